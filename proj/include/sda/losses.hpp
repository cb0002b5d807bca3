#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "sda/nets.hpp"
#include "sda/ops.hpp"

namespace sda {

// Per-iteration adaptation loss record. l_a is recomputed here in double
// arithmetic so the identity l_a == l_ae + lambda_orth * l_orth holds exactly
// for the reported values.
struct LossReport {
  double term_x = 0.0;
  double term_level[3] = {0.0, 0.0, 0.0};
  double term_y = 0.0;
  double l_ae = 0.0;
  double l_orth = 0.0;
  double lambda_orth = 0.0;
  double l_a = 0.0;

  void finalize() {
    l_ae = term_x + term_level[0] + term_level[1] + term_level[2] + term_y;
    l_a = l_ae + lambda_orth * l_orth;
  }
};

// Sum of per-autoencoder mean squared reconstruction errors. Differentiable
// through both the reconstructions and their inputs, so during adaptation the
// gradient reaches the adaptors along both paths.
template <class T>
TensorT<T> reconstruction_loss(GraphT<T>& g, const FeatureBundleT<T>& bundle,
                               const AEBankT<T>& bank, LossReport* report = nullptr) {
  AEReconstructionsT<T> r = ae_forward(g, bank, bundle);
  TensorT<T> term = mse(g, r.r_x, bundle.x_in);
  if (report) report->term_x = static_cast<double>(term.item());
  TensorT<T> total = term;
  for (int i = 0; i < 3; ++i) {
    term = mse(g, r.r_level[i], r.in_level[i]);
    if (report) report->term_level[i] = static_cast<double>(term.item());
    total = add(g, total, term);
  }
  term = mse(g, r.r_y, bundle.y);
  if (report) report->term_y = static_cast<double>(term.item());
  total = add(g, total, term);
  return total;
}

// Spectral norm of W^T W - I estimated by power iteration. The iteration
// vector is computed outside the graph and treated as a constant; gradient
// flows through the final matrix products only (the usual stop-gradient
// approximation for this regularizer). Exactly orthogonal W contributes zero
// with zero gradient.
template <class T>
TensorT<T> srip_orth_loss(GraphT<T>& g, const std::vector<TensorT<T>>& ws, int power_iters,
                          std::uint64_t seed) {
  if (power_iters < 1) throw std::invalid_argument("srip_orth_loss: power_iters must be >= 1");
  TensorT<T> total = TensorT<T>::scalar(T(0));
  for (std::size_t wi = 0; wi < ws.size(); ++wi) {
    const TensorT<T>& w = ws[wi];
    if (w.ndim() != 2 || w.dim(0) != w.dim(1))
      throw std::invalid_argument("srip_orth_loss: expected square matrix, got " +
                                  shape_str(w.shape()));
    const std::size_t n = w.dim(0);

    // dev = W^T W - I on raw values, for the iteration only
    std::vector<double> dev(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k)
          acc += static_cast<double>(w.values()[k * n + i]) *
                 static_cast<double>(w.values()[k * n + j]);
        dev[i * n + j] = acc - (i == j ? 1.0 : 0.0);
      }

    Rng rng(splitmix64(seed ^ (wi * 0x9e3779b97f4a7c15ull)));
    std::vector<double> v(n), mv(n);
    double norm = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : v) x /= norm;

    double prev_sigma = -1.0;
    for (int it = 0; it < power_iters; ++it) {
      double mnorm = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += dev[i * n + j] * v[j];
        mv[i] = acc;
        mnorm += acc * acc;
      }
      mnorm = std::sqrt(mnorm);
      if (mnorm < 1e-30) break;  // W orthogonal: deviation is (numerically) zero
      for (std::size_t i = 0; i < n; ++i) v[i] = mv[i] / mnorm;
      if (std::abs(mnorm - prev_sigma) <= 1e-13 * std::max(mnorm, 1.0)) break;
      prev_sigma = mnorm;
    }

    // loss contribution ||(W^T W - I) v|| through graph ops, v constant
    TensorT<T> vc({n, 1});
    for (std::size_t i = 0; i < n; ++i) vc.values()[i] = static_cast<T>(v[i]);
    TensorT<T> wtw = matmul(g, transpose2d(g, w), w);
    TensorT<T> devt = sub(g, wtw, eye<T>(n));
    TensorT<T> dv = matmul(g, devt, vc);
    TensorT<T> s2 = sum(g, mul(g, dv, dv));
    if (s2.item() == T(0)) continue;  // exactly orthogonal: zero, no gradient
    total = add(g, total, sqrt_elem(g, s2));
  }
  return total;
}

// L_A = L_AE + lambda_orth * L_orth over the three feature transforms; the
// caller freezes task and auto-encoder weights so gradient reaches only the
// adaptor parameters.
template <class T>
TensorT<T> adaptation_loss(GraphT<T>& g, const FeatureBundleT<T>& bundle, const AEBankT<T>& bank,
                           const AdaptorSetT<T>& adaptors, T lambda_orth, LossReport* report,
                           int power_iters = 2, std::uint64_t orth_seed = 0x5da5eedull) {
  if (lambda_orth < T(0)) throw std::invalid_argument("adaptation_loss: lambda_orth must be >= 0");
  LossReport local;
  LossReport* rep = report ? report : &local;
  rep->lambda_orth = static_cast<double>(lambda_orth);
  TensorT<T> l_ae = reconstruction_loss(g, bundle, bank, rep);
  TensorT<T> l_a = l_ae;
  rep->l_orth = 0.0;
  if (lambda_orth > T(0)) {
    std::vector<TensorT<T>> ws = {adaptors.w_feature[0], adaptors.w_feature[1],
                                  adaptors.w_feature[2]};
    TensorT<T> l_orth = srip_orth_loss(g, ws, power_iters, orth_seed);
    rep->l_orth = static_cast<double>(l_orth.item());
    if (rep->l_orth != 0.0) l_a = add(g, l_ae, scale(g, l_orth, lambda_orth));
  }
  rep->finalize();
  return l_a;
}

}  // namespace sda
