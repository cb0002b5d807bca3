#pragma once

#include "sda/tensor.hpp"

namespace sda {

// Monotone intensity remap matching the empirical CDF of x to that of ref
// (binned quantile mapping). A constant reference is degenerate: x is
// returned unchanged and *degenerate is set.
Tensor histogram_match(const Tensor& x, const Tensor& ref, int bins = 256,
                       bool* degenerate = nullptr);

// Per-pixel median of the 3x3 neighbourhood, mirror padding at the borders.
// Operates on the trailing [H,W] plane of every leading index.
Tensor median_filter3x3(const Tensor& x);

}  // namespace sda
