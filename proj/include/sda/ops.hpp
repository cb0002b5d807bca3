#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <initializer_list>

#include "sda/gemm.hpp"
#include "sda/tensor.hpp"

namespace sda {
namespace detail {

template <class T>
bool want_grad(const GraphT<T>& g, std::initializer_list<const TensorT<T>*> ins) {
  if (!g.recording()) return false;
  for (const auto* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <class T>
void check_image(const TensorT<T>& x, const char* op) {
  if (x.ndim() != 4)
    throw std::invalid_argument(std::string(op) + ": expected [N,C,H,W], got " +
                                shape_str(x.shape()));
}

// C[m x n] += A[m x k] * B^T, with B stored [n x k]. Fixed 8-lane
// accumulation order so results are reproducible.
template <class T>
void gemm_acc_bt(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a,
                 const T* __restrict b, T* __restrict c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* ar = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* br = b + j * k;
      T lane[8] = {T(0), T(0), T(0), T(0), T(0), T(0), T(0), T(0)};
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8)
        for (std::size_t r = 0; r < 8; ++r) lane[r] += ar[p + r] * br[p + r];
      T tail = T(0);
      for (; p < k; ++p) tail += ar[p] * br[p];
      c[i * n + j] +=
          (((lane[0] + lane[1]) + (lane[2] + lane[3])) + ((lane[4] + lane[5]) + (lane[6] + lane[7]))) +
          tail;
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution, stride 1, "same" padding. w is [Cout,Cin,k,k], b is [Cout] or
// an undefined tensor for no bias.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> conv2d(GraphT<T>& g, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                  int padding) {
  detail::check_image(x, "conv2d");
  if (w.ndim() != 4) throw std::invalid_argument("conv2d: weight must be [Cout,Cin,k,k]");
  const std::size_t batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t cout = w.dim(0), ksize = w.dim(2);
  if (w.dim(1) != cin)
    throw std::invalid_argument("conv2d: input has " + std::to_string(cin) +
                                " channels, weight expects " + std::to_string(w.dim(1)));
  if (ksize != w.dim(3) || (ksize != 1 && ksize != 3))
    throw std::invalid_argument("conv2d: kernel must be 1x1 or 3x3");
  if (padding != static_cast<int>(ksize - 1) / 2)
    throw std::invalid_argument("conv2d: padding must be (k-1)/2");
  const bool has_bias = b.defined() && b.size() > 0;
  if (has_bias && (b.ndim() != 1 || b.dim(0) != cout))
    throw std::invalid_argument("conv2d: bias must be [Cout]");
  if (!x.all_finite() || !w.all_finite() || (has_bias && !b.all_finite()))
    throw std::runtime_error("conv2d: non-finite input");

  const std::size_t plane = height * width;
  const std::size_t krows = cin * ksize * ksize;
  TensorT<T> out({batch, cout, height, width});

  std::vector<T> col;
  if (ksize != 1) col.resize(krows * plane);
  for (std::size_t n = 0; n < batch; ++n) {
    const T* xs = x.values().data() + n * cin * plane;
    const T* bmat = xs;
    if (ksize != 1) {
      im2col(xs, cin, height, width, ksize, static_cast<std::size_t>(padding), col.data());
      bmat = col.data();
    }
    T* os = out.values().data() + n * cout * plane;
    if (has_bias) {
      for (std::size_t co = 0; co < cout; ++co)
        std::fill(os + co * plane, os + (co + 1) * plane, b.values()[co]);
    }
    gemm_acc(cout, krows, plane, w.values().data(), bmat, os);
  }

  if (detail::want_grad(g, {&x, &w, &b})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, wc = w, bc = b, oc = out;
    const std::size_t pad = static_cast<std::size_t>(padding);
    g.record([xc, wc, bc, oc, batch, cin, cout, height, width, ksize, pad]() mutable {
      if (!oc.grad_allocated()) return;
      const std::size_t plane = height * width;
      const std::size_t krows = cin * ksize * ksize;
      const bool has_bias = bc.defined() && bc.size() > 0;
      std::vector<T> col(ksize != 1 ? krows * plane : 0);
      std::vector<T> dcol(xc.requires_grad() && ksize != 1 ? krows * plane : 0);
      // dW is accumulated transposed so all three gemms run in the fast
      // row-contiguous form: dW^T[K x Cout] += col[K x P] * dy^T[P x Cout].
      std::vector<T> dyt(wc.requires_grad() ? plane * cout : 0);
      std::vector<T> dwt(wc.requires_grad() ? krows * cout : 0);
      std::vector<T> wt;
      if (xc.requires_grad()) {
        wt.resize(krows * cout);
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t r = 0; r < krows; ++r) wt[r * cout + co] = wc.values()[co * krows + r];
      }
      for (std::size_t n = 0; n < batch; ++n) {
        const T* dy = oc.grad().data() + n * cout * plane;
        if (wc.requires_grad()) {
          const T* xs = xc.values().data() + n * cin * plane;
          const T* bmat = xs;
          if (ksize != 1) {
            im2col(xs, cin, height, width, ksize, pad, col.data());
            bmat = col.data();
          }
          constexpr std::size_t kTile = 32;
          for (std::size_t p0 = 0; p0 < plane; p0 += kTile)
            for (std::size_t c0 = 0; c0 < cout; c0 += kTile)
              for (std::size_t p = p0; p < std::min(p0 + kTile, plane); ++p)
                for (std::size_t co = c0; co < std::min(c0 + kTile, cout); ++co)
                  dyt[p * cout + co] = dy[co * plane + p];
          gemm_acc(krows, plane, cout, bmat, dyt.data(), dwt.data());
        }
        if (xc.requires_grad()) {
          T* dxs = xc.grad().data() + n * cin * plane;
          if (ksize == 1) {
            gemm_acc(krows, cout, plane, wt.data(), dy, dxs);
          } else {
            std::fill(dcol.begin(), dcol.end(), T(0));
            gemm_acc(krows, cout, plane, wt.data(), dy, dcol.data());
            col2im_acc(dcol.data(), cin, height, width, ksize, pad, dxs);
          }
        }
        if (has_bias && bc.requires_grad()) {
          for (std::size_t co = 0; co < cout; ++co) {
            double acc = 0.0;
            const T* row = dy + co * plane;
            for (std::size_t p = 0; p < plane; ++p) acc += static_cast<double>(row[p]);
            bc.grad()[co] += static_cast<T>(acc);
          }
        }
      }
      if (wc.requires_grad()) {
        for (std::size_t r = 0; r < krows; ++r)
          for (std::size_t co = 0; co < cout; ++co)
            wc.grad()[co * krows + r] += dwt[r * cout + co];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2x2 max pooling, non-overlapping. Gradient goes to the first-scanned
// maximum of each block.
// ---------------------------------------------------------------------------
template <class T>
TensorT<T> maxpool2x2(GraphT<T>& g, const TensorT<T>& x) {
  detail::check_image(x, "maxpool2x2");
  const std::size_t batch = x.dim(0), ch = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (height % 2 != 0 || width % 2 != 0)
    throw std::invalid_argument("maxpool2x2: spatial dims must be even, got " +
                                shape_str(x.shape()));
  const std::size_t oh = height / 2, ow = width / 2;
  TensorT<T> out({batch, ch, oh, ow});
  auto argmax = std::make_shared<std::vector<std::uint8_t>>(out.size());
  const T* xs = x.values().data();
  T* os = out.values().data();
  std::size_t oi = 0;
  for (std::size_t nc = 0; nc < batch * ch; ++nc) {
    const T* p = xs + nc * height * width;
    for (std::size_t h = 0; h < oh; ++h) {
      for (std::size_t w = 0; w < ow; ++w, ++oi) {
        const std::size_t base = 2 * h * width + 2 * w;
        T best = p[base];
        std::uint8_t idx = 0;
        const T cands[3] = {p[base + 1], p[base + width], p[base + width + 1]};
        for (std::uint8_t j = 0; j < 3; ++j)
          if (cands[j] > best) {
            best = cands[j];
            idx = static_cast<std::uint8_t>(j + 1);
          }
        os[oi] = best;
        (*argmax)[oi] = idx;
      }
    }
  }
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, argmax, batch, ch, height, width, oh, ow]() mutable {
      if (!oc.grad_allocated()) return;
      T* dx = xc.grad().data();
      const T* dy = oc.grad().data();
      std::size_t oi = 0;
      for (std::size_t nc = 0; nc < batch * ch; ++nc) {
        T* p = dx + nc * height * width;
        for (std::size_t h = 0; h < oh; ++h)
          for (std::size_t w = 0; w < ow; ++w, ++oi) {
            const std::size_t base = 2 * h * width + 2 * w;
            const std::uint8_t idx = (*argmax)[oi];
            const std::size_t off = (idx & 1u ? 1u : 0u) + (idx & 2u ? width : 0u);
            p[base + off] += dy[oi];
          }
      }
    });
  }
  return out;
}

// Nearest-neighbour 2x upsampling; backward sums the four replicated grads.
template <class T>
TensorT<T> upsample_nearest2x(GraphT<T>& g, const TensorT<T>& x) {
  detail::check_image(x, "upsample_nearest2x");
  const std::size_t batch = x.dim(0), ch = x.dim(1), height = x.dim(2), width = x.dim(3);
  const std::size_t oh = height * 2, ow = width * 2;
  TensorT<T> out({batch, ch, oh, ow});
  const T* xs = x.values().data();
  T* os = out.values().data();
  for (std::size_t nc = 0; nc < batch * ch; ++nc) {
    const T* src = xs + nc * height * width;
    T* dst = os + nc * oh * ow;
    for (std::size_t h = 0; h < oh; ++h) {
      const T* row = src + (h / 2) * width;
      for (std::size_t w = 0; w < ow; ++w) dst[h * ow + w] = row[w / 2];
    }
  }
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, batch, ch, height, width, oh, ow]() mutable {
      if (!oc.grad_allocated()) return;
      T* dx = xc.grad().data();
      const T* dy = oc.grad().data();
      for (std::size_t nc = 0; nc < batch * ch; ++nc) {
        T* dst = dx + nc * height * width;
        const T* src = dy + nc * oh * ow;
        for (std::size_t h = 0; h < height; ++h)
          for (std::size_t w = 0; w < width; ++w) {
            const T* r0 = src + (2 * h) * ow + 2 * w;
            const T* r1 = src + (2 * h + 1) * ow + 2 * w;
            dst[h * width + w] += (r0[0] + r0[1]) + (r1[0] + r1[1]);
          }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> leaky_relu(GraphT<T>& g, const TensorT<T>& x, T slope) {
  if (slope < T(0)) throw std::invalid_argument("leaky_relu: slope must be >= 0");
  TensorT<T> out(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : slope * xv[i];
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, slope]() mutable {
      if (!oc.grad_allocated()) return;
      const auto& xv = xc.values();
      const auto& dy = oc.grad();
      auto& dx = xc.grad();
      for (std::size_t i = 0; i < xv.size(); ++i)
        dx[i] += dy[i] * (xv[i] > T(0) ? T(1) : slope);
    });
  }
  return out;
}

// Per-(sample,channel) standardization, no learned affine terms.
template <class T>
TensorT<T> instance_norm(GraphT<T>& g, const TensorT<T>& x, T eps) {
  detail::check_image(x, "instance_norm");
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane < 2)
    throw std::invalid_argument("instance_norm: needs H*W >= 2, got " + shape_str(x.shape()));
  TensorT<T> out(x.shape());
  auto stats = std::make_shared<std::vector<T>>(2 * batch * ch);  // mean, inv_std pairs
  const T* xs = x.values().data();
  T* os = out.values().data();
  for (std::size_t nc = 0; nc < batch * ch; ++nc) {
    const T* p = xs + nc * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += static_cast<double>(p[i]);
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) {
      const double d = static_cast<double>(p[i]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(plane);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*stats)[2 * nc] = static_cast<T>(mean);
    (*stats)[2 * nc + 1] = static_cast<T>(inv);
    T* q = os + nc * plane;
    for (std::size_t i = 0; i < plane; ++i)
      q[i] = static_cast<T>((static_cast<double>(p[i]) - mean) * inv);
  }
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, stats, batch, ch, plane]() mutable {
      if (!oc.grad_allocated()) return;
      const T* xs = xc.values().data();
      const T* dy = oc.grad().data();
      T* dx = xc.grad().data();
      for (std::size_t nc = 0; nc < batch * ch; ++nc) {
        const T mean = (*stats)[2 * nc];
        const T inv = (*stats)[2 * nc + 1];
        const T* p = xs + nc * plane;
        const T* dyp = dy + nc * plane;
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = static_cast<double>(p[i] - mean) * static_cast<double>(inv);
          sum_dy += static_cast<double>(dyp[i]);
          sum_dy_xhat += static_cast<double>(dyp[i]) * xhat;
        }
        const double mean_dy = sum_dy / static_cast<double>(plane);
        const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(plane);
        T* dxp = dx + nc * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double xhat = static_cast<double>(p[i] - mean) * static_cast<double>(inv);
          dxp[i] += static_cast<T>(static_cast<double>(inv) *
                                   (static_cast<double>(dyp[i]) - mean_dy - xhat * mean_dy_xhat));
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> concat_channels(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_image(a, "concat_channels");
  detail::check_image(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw std::invalid_argument("concat_channels: mismatched shapes " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const std::size_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), plane = a.dim(2) * a.dim(3);
  TensorT<T> out({batch, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t n = 0; n < batch; ++n) {
    std::memcpy(out.values().data() + n * (ca + cb) * plane, a.values().data() + n * ca * plane,
                ca * plane * sizeof(T));
    std::memcpy(out.values().data() + (n * (ca + cb) + ca) * plane,
                b.values().data() + n * cb * plane, cb * plane * sizeof(T));
  }
  if (detail::want_grad(g, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    g.record([ac, bc, oc, batch, ca, cb, plane]() mutable {
      if (!oc.grad_allocated()) return;
      const T* dy = oc.grad().data();
      for (std::size_t n = 0; n < batch; ++n) {
        if (ac.requires_grad()) {
          T* da = ac.grad().data() + n * ca * plane;
          const T* src = dy + n * (ca + cb) * plane;
          for (std::size_t i = 0; i < ca * plane; ++i) da[i] += src[i];
        }
        if (bc.requires_grad()) {
          T* db = bc.grad().data() + n * cb * plane;
          const T* src = dy + (n * (ca + cb) + ca) * plane;
          for (std::size_t i = 0; i < cb * plane; ++i) db[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> slice_channels(GraphT<T>& g, const TensorT<T>& x, std::size_t c0, std::size_t c1) {
  detail::check_image(x, "slice_channels");
  if (c0 >= c1 || c1 > x.dim(1))
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for " + shape_str(x.shape()));
  const std::size_t batch = x.dim(0), cin = x.dim(1), plane = x.dim(2) * x.dim(3);
  const std::size_t cs = c1 - c0;
  TensorT<T> out({batch, cs, x.dim(2), x.dim(3)});
  for (std::size_t n = 0; n < batch; ++n)
    std::memcpy(out.values().data() + n * cs * plane,
                x.values().data() + (n * cin + c0) * plane, cs * plane * sizeof(T));
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, batch, cin, c0, cs, plane]() mutable {
      if (!oc.grad_allocated()) return;
      const T* dy = oc.grad().data();
      for (std::size_t n = 0; n < batch; ++n) {
        T* dx = xc.grad().data() + (n * cin + c0) * plane;
        const T* src = dy + n * cs * plane;
        for (std::size_t i = 0; i < cs * plane; ++i) dx[i] += src[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> softmax_channels(GraphT<T>& g, const TensorT<T>& x) {
  detail::check_image(x, "softmax_channels");
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  TensorT<T> out(x.shape());
  const T* xs = x.values().data();
  T* os = out.values().data();
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = n * ch * plane + p;
      T mx = xs[base];
      for (std::size_t c = 1; c < ch; ++c) mx = std::max(mx, xs[base + c * plane]);
      double denom = 0.0;
      for (std::size_t c = 0; c < ch; ++c) {
        const double e = std::exp(static_cast<double>(xs[base + c * plane] - mx));
        os[base + c * plane] = static_cast<T>(e);
        denom += e;
      }
      for (std::size_t c = 0; c < ch; ++c)
        os[base + c * plane] = static_cast<T>(static_cast<double>(os[base + c * plane]) / denom);
    }
  }
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, batch, ch, plane]() mutable {
      if (!oc.grad_allocated()) return;
      const T* s = oc.values().data();
      const T* dy = oc.grad().data();
      T* dx = xc.grad().data();
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t base = n * ch * plane + p;
          double dot = 0.0;
          for (std::size_t c = 0; c < ch; ++c)
            dot += static_cast<double>(dy[base + c * plane]) * static_cast<double>(s[base + c * plane]);
          for (std::size_t c = 0; c < ch; ++c)
            dx[base + c * plane] += static_cast<T>(
                static_cast<double>(s[base + c * plane]) *
                (static_cast<double>(dy[base + c * plane]) - dot));
        }
      }
    });
  }
  return out;
}

// Mean cross entropy over batch and pixels, from logits.
template <class T>
TensorT<T> cross_entropy(GraphT<T>& g, const TensorT<T>& logits, const IntTensor& labels) {
  detail::check_image(logits, "cross_entropy");
  const std::size_t batch = logits.dim(0), ch = logits.dim(1);
  const std::size_t height = logits.dim(2), width = logits.dim(3);
  if (labels.dims != std::vector<std::size_t>{batch, height, width})
    throw std::invalid_argument("cross_entropy: labels must be [N,H,W] matching logits");
  const std::size_t plane = height * width;
  for (std::int32_t v : labels.values)
    if (v < 0 || v >= static_cast<std::int32_t>(ch))
      throw std::invalid_argument("cross_entropy: label " + std::to_string(v) +
                                  " out of range [0," + std::to_string(ch) + ")");
  const T* xs = logits.values().data();
  double total = 0.0;
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = n * ch * plane + p;
      T mx = xs[base];
      for (std::size_t c = 1; c < ch; ++c) mx = std::max(mx, xs[base + c * plane]);
      double denom = 0.0;
      for (std::size_t c = 0; c < ch; ++c)
        denom += std::exp(static_cast<double>(xs[base + c * plane] - mx));
      const std::int32_t lab = labels.values[n * plane + p];
      total += std::log(denom) + static_cast<double>(mx) -
               static_cast<double>(xs[base + static_cast<std::size_t>(lab) * plane]);
    }
  }
  const double count = static_cast<double>(batch * plane);
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(total / count));
  if (detail::want_grad(g, {&logits})) {
    out.set_requires_grad(true);
    TensorT<T> xc = logits, oc = out;
    auto labs = std::make_shared<IntTensor>(labels);
    g.record([xc, oc, labs, batch, ch, plane]() mutable {
      if (!oc.grad_allocated()) return;
      const T gout = oc.grad()[0];
      const T* xs = xc.values().data();
      T* dx = xc.grad().data();
      const double scale = static_cast<double>(gout) / static_cast<double>(batch * plane);
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t p = 0; p < plane; ++p) {
          const std::size_t base = n * ch * plane + p;
          T mx = xs[base];
          for (std::size_t c = 1; c < ch; ++c) mx = std::max(mx, xs[base + c * plane]);
          double denom = 0.0;
          for (std::size_t c = 0; c < ch; ++c)
            denom += std::exp(static_cast<double>(xs[base + c * plane] - mx));
          const std::int32_t lab = labs->values[n * plane + p];
          for (std::size_t c = 0; c < ch; ++c) {
            const double prob = std::exp(static_cast<double>(xs[base + c * plane] - mx)) / denom;
            const double onehot = (static_cast<std::int32_t>(c) == lab) ? 1.0 : 0.0;
            dx[base + c * plane] += static_cast<T>((prob - onehot) * scale);
          }
        }
      }
    });
  }
  return out;
}

// Mean squared error over all elements; differentiable in both arguments.
template <class T>
TensorT<T> mse(GraphT<T>& g, const TensorT<T>& pred, const TensorT<T>& target) {
  if (pred.shape() != target.shape())
    throw std::invalid_argument("mse: shape mismatch " + shape_str(pred.shape()) + " vs " +
                                shape_str(target.shape()));
  const std::size_t n = pred.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.values()[i]) - static_cast<double>(target.values()[i]);
    acc += d * d;
  }
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (detail::want_grad(g, {&pred, &target})) {
    out.set_requires_grad(true);
    TensorT<T> pc = pred, tc = target, oc = out;
    g.record([pc, tc, oc, n]() mutable {
      if (!oc.grad_allocated()) return;
      const T gout = oc.grad()[0];
      const T scale = static_cast<T>(static_cast<double>(gout) * 2.0 / static_cast<double>(n));
      for (std::size_t i = 0; i < n; ++i) {
        const T d = (pc.values()[i] - tc.values()[i]) * scale;
        if (pc.requires_grad()) pc.grad()[i] += d;
        if (tc.requires_grad()) tc.grad()[i] -= d;
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> add(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (detail::want_grad(g, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    g.record([ac, bc, oc]() mutable {
      if (!oc.grad_allocated()) return;
      const auto& dy = oc.grad();
      if (ac.requires_grad())
        for (std::size_t i = 0; i < dy.size(); ++i) ac.grad()[i] += dy[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < dy.size(); ++i) bc.grad()[i] += dy[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> sub(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] - b.values()[i];
  if (detail::want_grad(g, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    g.record([ac, bc, oc]() mutable {
      if (!oc.grad_allocated()) return;
      const auto& dy = oc.grad();
      if (ac.requires_grad())
        for (std::size_t i = 0; i < dy.size(); ++i) ac.grad()[i] += dy[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < dy.size(); ++i) bc.grad()[i] -= dy[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  TensorT<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (detail::want_grad(g, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    g.record([ac, bc, oc]() mutable {
      if (!oc.grad_allocated()) return;
      const auto& dy = oc.grad();
      if (ac.requires_grad())
        for (std::size_t i = 0; i < dy.size(); ++i) ac.grad()[i] += dy[i] * bc.values()[i];
      if (bc.requires_grad())
        for (std::size_t i = 0; i < dy.size(); ++i) bc.grad()[i] += dy[i] * ac.values()[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(GraphT<T>& g, const TensorT<T>& x, T c) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = x.values()[i] * c;
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, c]() mutable {
      if (!oc.grad_allocated()) return;
      for (std::size_t i = 0; i < xc.size(); ++i) xc.grad()[i] += oc.grad()[i] * c;
    });
  }
  return out;
}

template <class T>
TensorT<T> sum(GraphT<T>& g, const TensorT<T>& x) {
  double acc = 0.0;
  for (T v : x.values()) acc += static_cast<double>(v);
  TensorT<T> out = TensorT<T>::scalar(static_cast<T>(acc));
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc]() mutable {
      if (!oc.grad_allocated()) return;
      const T gout = oc.grad()[0];
      for (std::size_t i = 0; i < xc.size(); ++i) xc.grad()[i] += gout;
    });
  }
  return out;
}

// Elementwise sqrt; subgradient 0 where the output is 0.
template <class T>
TensorT<T> sqrt_elem(GraphT<T>& g, const TensorT<T>& x) {
  TensorT<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x.values()[i] < T(0)) throw std::invalid_argument("sqrt_elem: negative input");
    out.values()[i] = std::sqrt(x.values()[i]);
  }
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc]() mutable {
      if (!oc.grad_allocated()) return;
      for (std::size_t i = 0; i < xc.size(); ++i) {
        const T o = oc.values()[i];
        if (o > T(0)) xc.grad()[i] += oc.grad()[i] * (T(1) / (T(2) * o));
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> matmul(GraphT<T>& g, const TensorT<T>& a, const TensorT<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> out({m, n});
  gemm_acc(m, k, n, a.values().data(), b.values().data(), out.values().data());
  if (detail::want_grad(g, {&a, &b})) {
    out.set_requires_grad(true);
    TensorT<T> ac = a, bc = b, oc = out;
    g.record([ac, bc, oc, m, k, n]() mutable {
      if (!oc.grad_allocated()) return;
      const T* dy = oc.grad().data();
      if (ac.requires_grad())
        detail::gemm_acc_bt(m, n, k, dy, bc.values().data(), ac.grad().data());
      if (bc.requires_grad()) {
        std::vector<T> at(k * m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) at[p * m + i] = ac.values()[i * k + p];
        gemm_acc(k, m, n, at.data(), dy, bc.grad().data());
      }
    });
  }
  return out;
}

// Same data, new dims (copying; backward adds straight through).
template <class T>
TensorT<T> reshape(GraphT<T>& g, const TensorT<T>& x, std::vector<std::size_t> dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  if (n != x.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                shape_str(dims));
  TensorT<T> out(std::move(dims));
  out.values() = x.values();
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc]() mutable {
      if (!oc.grad_allocated()) return;
      for (std::size_t i = 0; i < xc.size(); ++i) xc.grad()[i] += oc.grad()[i];
    });
  }
  return out;
}

template <class T>
TensorT<T> transpose2d(GraphT<T>& g, const TensorT<T>& x) {
  if (x.ndim() != 2) throw std::invalid_argument("transpose2d: expected matrix");
  const std::size_t m = x.dim(0), n = x.dim(1);
  TensorT<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.values()[j * m + i] = x.values()[i * n + j];
  if (detail::want_grad(g, {&x})) {
    out.set_requires_grad(true);
    TensorT<T> xc = x, oc = out;
    g.record([xc, oc, m, n]() mutable {
      if (!oc.grad_allocated()) return;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) xc.grad()[i * n + j] += oc.grad()[j * m + i];
    });
  }
  return out;
}

// --------------------------- non-differentiable ----------------------------

template <class T>
IntTensor argmax_channels(const TensorT<T>& x) {
  detail::check_image(x, "argmax_channels");
  const std::size_t batch = x.dim(0), ch = x.dim(1), plane = x.dim(2) * x.dim(3);
  IntTensor out({batch, x.dim(2), x.dim(3)});
  const T* xs = x.values().data();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = n * ch * plane + p;
      T best = xs[base];
      std::int32_t arg = 0;
      for (std::size_t c = 1; c < ch; ++c)
        if (xs[base + c * plane] > best) {
          best = xs[base + c * plane];
          arg = static_cast<std::int32_t>(c);
        }
      out.values[n * plane + p] = arg;
    }
  return out;
}

template <class T>
TensorT<T> eye(std::size_t n) {
  TensorT<T> t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.values()[i * n + i] = T(1);
  return t;
}

}  // namespace sda
