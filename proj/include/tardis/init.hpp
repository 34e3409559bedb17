#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "tardis/rng.hpp"
#include "tardis/tensor.hpp"

namespace tardis::init {

/// Uniform(+-sqrt(6 / (fan_in + fan_out))) matrix of shape rows x cols.
inline Tensor glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> v(rows * cols);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::matrix(rows, cols, std::move(v), true);
}

inline Tensor glorot_vector(std::size_t n, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(n + 1));
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor::vector(std::move(v), true);
}

inline Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }

inline Tensor constant(std::size_t n, double value) {
  return Tensor::vector(std::vector<double>(n, value), true);
}

}  // namespace tardis::init
