#pragma once

#include <gtest/gtest.h>

#include "lieflow/lieflow.hpp"
#include "lieflow/oracles.hpp"

namespace lieflow::testing {

inline Matrix random_spd(CounterRng& rng, Index n, double floor = 0.5) {
  const Matrix a = rng.normal_matrix(n, n);
  return a * a.transpose() / static_cast<double>(n) + floor * Matrix::Identity(n, n);
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  EXPECT_EQ(a.rows(), b.rows());
  EXPECT_EQ(a.cols(), b.cols());
  return (a - b).cwiseAbs().maxCoeff();
}

/// 1-sigma width box for a Gaussian, scaled.
inline oracles::GridSpec grid_for(const Gaussian& g, double sds, Index points) {
  return oracles::GridSpec::box(g.mean(), sds * g.cov().diagonal().cwiseSqrt(), points);
}

}  // namespace lieflow::testing
