#pragma once

#include <functional>
#include <vector>

#include "sda/tensor.hpp"

namespace sda {

// Central finite-difference check of a scalar-valued tensor function against
// the tape's analytic gradients. Returns the max relative error over the
// checked coordinates: |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// With max_coords > 0 a seeded random subset of coordinates per input is
// checked instead of every one. Coordinates where both the analytic and
// numeric gradient are below min_abs_grad are skipped: central differences
// carry no information there at the working precision.
template <class T>
T grad_check(const std::function<TensorT<T>(GraphT<T>&, std::vector<TensorT<T>>&)>& f,
             std::vector<TensorT<T>> inputs, T h,
             std::size_t max_coords = 0, std::uint64_t subsample_seed = 0,
             T min_abs_grad = T(0)) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.clear_grad();
  }

  GraphT<T> g;
  TensorT<T> loss = f(g, inputs);
  if (loss.size() != 1)
    throw std::invalid_argument("grad_check: f must be scalar-valued, got " +
                                shape_str(loss.shape()));
  g.backward(loss);

  std::vector<std::vector<T>> analytic(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i)
    analytic[i] = inputs[i].grad_allocated() ? inputs[i].grad()
                                             : std::vector<T>(inputs[i].size(), T(0));

  auto eval = [&](std::vector<TensorT<T>>& ins) -> T {
    GraphT<T> gq(false);
    return f(gq, ins).item();
  };

  Rng pick(subsample_seed ^ 0x5eedull);
  T max_err = T(0);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::size_t n = inputs[i].size();
    std::vector<std::size_t> coords;
    if (max_coords == 0 || n <= max_coords) {
      coords.resize(n);
      for (std::size_t j = 0; j < n; ++j) coords[j] = j;
    } else {
      coords.reserve(max_coords);
      for (std::size_t j = 0; j < max_coords; ++j)
        coords.push_back(static_cast<std::size_t>(pick.integer(n)));
    }
    for (std::size_t j : coords) {
      const T orig = inputs[i].values()[j];
      const T xp = orig + h;  // rounded perturbations; divide by the step
      const T xm = orig - h;  // actually taken, not the nominal 2h
      inputs[i].values()[j] = xp;
      const T fp = eval(inputs);
      inputs[i].values()[j] = xm;
      const T fm = eval(inputs);
      inputs[i].values()[j] = orig;
      const T numeric = (fp - fm) / (xp - xm);
      const T a = analytic[i][j];
      if (std::max(std::abs(a), std::abs(numeric)) < min_abs_grad) continue;
      const T denom = std::max(std::max(std::abs(a), std::abs(numeric)), T(1e-8));
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace sda
