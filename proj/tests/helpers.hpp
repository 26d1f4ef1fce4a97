#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <functional>

#include "semslam/tensor.hpp"

namespace semslam::test {

/// Central finite difference of a scalar function of one tensor coordinate.
/// The function must re-run the forward pass from current parameter values.
inline double fd_tensor(Tensor& t, int idx, const std::function<double()>& eval, double h = 1e-5) {
  const double orig = t.value[idx];
  t.value[idx] = orig + h;
  const double hi = eval();
  t.value[idx] = orig - h;
  const double lo = eval();
  t.value[idx] = orig;
  return (hi - lo) / (2.0 * h);
}

/// Relative error with a floor so near-zero gradients compare absolutely.
inline double rel_err(double analytic, double numeric, double floor = 1e-6) {
  const double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

#define CHECK_GRAD(analytic, numeric) CHECK(semslam::test::rel_err((analytic), (numeric)) < 1e-4)

}  // namespace semslam::test
