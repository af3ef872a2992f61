#pragma once

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace lieflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

/// Shape or size disagreement between arguments.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A numeric failure: non-SPD input, singular system, non-finite values.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, double condition = 0.0)
      : std::runtime_error(what), condition_(condition) {}
  /// Estimated condition number of the offending matrix, 0 if not applicable.
  double condition() const noexcept { return condition_; }

 private:
  double condition_;
};

/// An iterative procedure stopped before meeting its convergence criterion.
class ConvergenceError : public NumericError {
 public:
  ConvergenceError(const std::string& what, double residual)
      : NumericError(what), residual_(residual) {}
  double residual() const noexcept { return residual_; }

 private:
  double residual_;
};

namespace detail {

template <typename... Args>
std::string concat(const Args&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline void require_dims(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

}  // namespace detail
}  // namespace lieflow
