#pragma once

#include <cmath>
#include <vector>

#include "sda/tensor.hpp"

namespace sda {

template <class T>
struct AdamConfig {
  T lr = T(1e-3);
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);
};

// Bias-corrected Adam over a fixed parameter list. Parameters without an
// allocated gradient are treated as having zero gradient.
template <class T>
class AdamT {
 public:
  AdamT(std::vector<TensorT<T>> params, AdamConfig<T> cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), T(0));
      v_[i].assign(params_[i].size(), T(0));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      const bool has_grad = p.grad_allocated();
      for (std::size_t j = 0; j < p.size(); ++j) {
        const T gj = has_grad ? p.grad()[j] : T(0);
        m_[i][j] = cfg_.beta1 * m_[i][j] + (T(1) - cfg_.beta1) * gj;
        v_[i][j] = cfg_.beta2 * v_[i][j] + (T(1) - cfg_.beta2) * gj * gj;
        const double mhat = static_cast<double>(m_[i][j]) / bc1;
        const double vhat = static_cast<double>(v_[i][j]) / bc2;
        p.values()[j] -= static_cast<T>(static_cast<double>(cfg_.lr) * mhat /
                                        (std::sqrt(vhat) + static_cast<double>(cfg_.eps)));
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.clear_grad();
  }

  long step_count() const { return t_; }
  const AdamConfig<T>& config() const { return cfg_; }

 private:
  std::vector<TensorT<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  AdamConfig<T> cfg_;
  long t_ = 0;
};

using Adam = AdamT<float>;

}  // namespace sda
