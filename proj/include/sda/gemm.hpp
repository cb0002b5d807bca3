#pragma once

#include <cstddef>
#include <vector>

namespace sda {

// C[m x n] += A[m x k] * B[k x n], all row-major. Accumulation order over p
// is fixed per output element, so results do not depend on tiling.
template <class T>
void gemm_acc(std::size_t m, std::size_t k, std::size_t n, const T* __restrict a,
              const T* __restrict b, T* __restrict c) {
  constexpr std::size_t kRowBlock = 4;
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock) {
    T* c0 = c + (i + 0) * n;
    T* c1 = c + (i + 1) * n;
    T* c2 = c + (i + 2) * n;
    T* c3 = c + (i + 3) * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a0 = a[(i + 0) * k + p];
      const T a1 = a[(i + 1) * k + p];
      const T a2 = a[(i + 2) * k + p];
      const T a3 = a[(i + 3) * k + p];
      const T* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T bv = bp[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      const T* __restrict bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// col[(ci*kh*kw + dy*kw + dx), (h*W + w)] = x[ci, h+dy-pad, w+dx-pad], zero
// outside. x is one image [C,H,W]; col is [C*k*k, H*W] (stride 1, same size).
template <class T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t ksize, std::size_t pad, T* col) {
  const std::size_t plane = height * width;
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t dy = 0; dy < ksize; ++dy) {
      for (std::size_t dx = 0; dx < ksize; ++dx, ++row) {
        T* out = col + row * plane;
        for (std::size_t h = 0; h < height; ++h) {
          const long sh = static_cast<long>(h + dy) - static_cast<long>(pad);
          if (sh < 0 || sh >= static_cast<long>(height)) {
            for (std::size_t w = 0; w < width; ++w) out[h * width + w] = T(0);
            continue;
          }
          const T* src = x + c * plane + static_cast<std::size_t>(sh) * width;
          for (std::size_t w = 0; w < width; ++w) {
            const long sw = static_cast<long>(w + dx) - static_cast<long>(pad);
            out[h * width + w] =
                (sw < 0 || sw >= static_cast<long>(width)) ? T(0) : src[sw];
          }
        }
      }
    }
  }
}

// Gather-form inverse of im2col: dx[ci,hi,wi] += sum over kernel offsets of
// dcol entries that read that input element. Deterministic per element.
template <class T>
void col2im_acc(const T* dcol, std::size_t channels, std::size_t height, std::size_t width,
                std::size_t ksize, std::size_t pad, T* dx) {
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t hi = 0; hi < height; ++hi) {
      for (std::size_t wi = 0; wi < width; ++wi) {
        T acc = T(0);
        for (std::size_t dy = 0; dy < ksize; ++dy) {
          const long h = static_cast<long>(hi) + static_cast<long>(pad) - static_cast<long>(dy);
          if (h < 0 || h >= static_cast<long>(height)) continue;
          for (std::size_t dx_ = 0; dx_ < ksize; ++dx_) {
            const long w = static_cast<long>(wi) + static_cast<long>(pad) - static_cast<long>(dx_);
            if (w < 0 || w >= static_cast<long>(width)) continue;
            const std::size_t row = (c * ksize + dy) * ksize + dx_;
            acc += dcol[row * plane + static_cast<std::size_t>(h) * width +
                        static_cast<std::size_t>(w)];
          }
        }
        dx[c * plane + hi * width + wi] += acc;
      }
    }
  }
}

}  // namespace sda
