#pragma once

// Closed-form algebra of linear-Gaussian models: pushforward marginals,
// Bayesian posteriors, joints, and conditionals of partitioned Gaussians.
// Every inverse is taken through a Cholesky factorization.

#include <algorithm>
#include <vector>

#include "lieflow/core.hpp"

namespace lieflow {

/// How covariances are factorized. Jitter is opt-in; when enabled, the
/// covariance gets jitter_scale * trace / n added to its diagonal first.
struct FactorPolicy {
  double max_condition = 1e12;
  bool jitter = false;
  double jitter_scale = 1e-9;
};

/// Cholesky factorization of a symmetric positive-definite matrix.
class SpdFactor {
 public:
  explicit SpdFactor(const Matrix& m, const FactorPolicy& policy = {}) {
    if (m.rows() != m.cols())
      throw DimensionError(detail::concat("SPD factor: matrix is ", m.rows(), "x", m.cols()));
    if (!m.allFinite()) throw NumericError("SPD factor: non-finite entries");
    Matrix a = detail::symmetrize(m);
    if (policy.jitter && a.rows() > 0)
      a.diagonal().array() += policy.jitter_scale * a.trace() / static_cast<double>(a.rows());
    llt_.compute(a);
    if (llt_.info() != Eigen::Success)
      throw NumericError("SPD factor: matrix is not positive definite");
    const auto diag = llt_.matrixL().nestedExpression().diagonal();
    double lo = diag.minCoeff(), hi = diag.maxCoeff();
    if (!(lo > 0.0)) throw NumericError("SPD factor: matrix is not positive definite");
    // (max L_ii / min L_ii)^2 bounds the 2-norm condition number from below.
    condition_ = (hi / lo) * (hi / lo);
    if (condition_ > policy.max_condition)
      throw NumericError(detail::concat("SPD factor: condition number ~", condition_,
                                        " exceeds limit ", policy.max_condition),
                         condition_);
    log_det_ = 2.0 * diag.array().log().sum();
  }

  Index dim() const { return llt_.rows(); }
  double log_det() const { return log_det_; }
  double condition() const { return condition_; }

  template <typename Rhs>
  Matrix solve(const Eigen::MatrixBase<Rhs>& b) const {
    return llt_.solve(b);
  }
  Vector solve_vec(const Vector& b) const { return llt_.solve(b); }
  Matrix inverse() const { return llt_.solve(Matrix::Identity(dim(), dim())); }

  /// Squared Mahalanobis norm x^T M^{-1} x.
  double quad_form(const Vector& x) const {
    Vector y = llt_.matrixL().solve(x);
    return y.squaredNorm();
  }

  const Eigen::LLT<Matrix>& llt() const { return llt_; }

 private:
  Eigen::LLT<Matrix> llt_;
  double condition_ = 1.0;
  double log_det_ = 0.0;
};

/// Multivariate normal N(mean, cov); cov is stored symmetrized.
class Gaussian {
 public:
  Gaussian() = default;
  Gaussian(Vector mean, Matrix cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
    detail::require_dims(cov_.rows() == cov_.cols() && cov_.rows() == mean_.size(),
                         detail::concat("Gaussian: mean has ", mean_.size(), " entries but cov is ",
                                        cov_.rows(), "x", cov_.cols()));
    if (!mean_.allFinite() || !cov_.allFinite()) throw NumericError("Gaussian: non-finite parameters");
    const double scale = std::max(1.0, cov_.cwiseAbs().maxCoeff());
    if ((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
      throw NumericError("Gaussian: covariance is not symmetric");
    cov_ = detail::symmetrize(cov_);
  }

  static Gaussian standard(Index n) { return {Vector::Zero(n), Matrix::Identity(n, n)}; }

  Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  const Matrix& cov() const { return cov_; }

  /// Second moment E[x x^T] = cov + mean mean^T.
  Matrix second_moment() const { return cov_ + mean_ * mean_.transpose(); }

  bool is_spd() const {
    Eigen::LLT<Matrix> llt(cov_);
    return llt.info() == Eigen::Success;
  }

 private:
  Vector mean_;
  Matrix cov_;
};

/// y = weight * x + offset + noise, noise ~ N(0, noise_cov).
struct LinearGaussianMap {
  Matrix weight;
  Vector offset;
  Matrix noise_cov;

  LinearGaussianMap() = default;
  LinearGaussianMap(Matrix a, Vector b, Matrix s)
      : weight(std::move(a)), offset(std::move(b)), noise_cov(std::move(s)) {
    detail::require_dims(weight.rows() == offset.size() && noise_cov.rows() == offset.size() &&
                             noise_cov.cols() == offset.size(),
                         "LinearGaussianMap: weight rows, offset and noise_cov disagree");
  }

  Index input_dim() const { return weight.cols(); }
  Index output_dim() const { return weight.rows(); }
};

namespace detail {

inline void check_map(const Gaussian& prior, const LinearGaussianMap& map) {
  require_dims(map.input_dim() == prior.dim(),
               concat("map expects input of dimension ", map.input_dim(), ", prior has ", prior.dim()));
  require_dims(map.weight.rows() == map.offset.size() && map.noise_cov.rows() == map.offset.size() &&
                   map.noise_cov.cols() == map.offset.size(),
               "LinearGaussianMap: inconsistent shapes");
}

}  // namespace detail

/// Distribution of y = A x + b + noise when x ~ prior.
inline Gaussian marginal(const Gaussian& prior, const LinearGaussianMap& map,
                         const FactorPolicy& policy = {}) {
  detail::check_map(prior, map);
  SpdFactor{prior.cov(), policy};
  SpdFactor{map.noise_cov, policy};
  Matrix cov = map.noise_cov + map.weight * prior.cov() * map.weight.transpose();
  return {map.weight * prior.mean() + map.offset, detail::symmetrize(cov)};
}

/// p(x | y) for the model x ~ prior, y | x ~ map. Precision form:
/// cov = (P + A^T L A)^{-1}, mean = cov (A^T L (y - b) + P mu).
inline Gaussian posterior(const Gaussian& prior, const LinearGaussianMap& map, const Vector& observation,
                          const FactorPolicy& policy = {}) {
  detail::check_map(prior, map);
  detail::require_dims(observation.size() == map.output_dim(),
                       detail::concat("posterior: observation has ", observation.size(),
                                      " entries, map output is ", map.output_dim()));
  SpdFactor prior_f(prior.cov(), policy);
  SpdFactor noise_f(map.noise_cov, policy);
  Matrix noise_inv_a = noise_f.solve(map.weight);
  Matrix precision = prior_f.inverse() + map.weight.transpose() * noise_inv_a;
  Vector info = noise_inv_a.transpose() * (observation - map.offset) + prior_f.solve_vec(prior.mean());
  SpdFactor post_f(detail::symmetrize(precision), policy);
  return {post_f.solve_vec(info), detail::symmetrize(post_f.inverse())};
}

/// Joint Gaussian over the stacked vector (x, y).
inline Gaussian joint(const Gaussian& prior, const LinearGaussianMap& map, const FactorPolicy& policy = {}) {
  Gaussian y = marginal(prior, map, policy);
  const Index n = prior.dim(), m = map.output_dim();
  Vector mean(n + m);
  mean << prior.mean(), y.mean();
  Matrix cov(n + m, n + m);
  Matrix cross = map.weight * prior.cov();
  cov.topLeftCorner(n, n) = prior.cov();
  cov.topRightCorner(n, m) = cross.transpose();
  cov.bottomLeftCorner(m, n) = cross;
  cov.bottomRightCorner(m, m) = y.cov();
  return {mean, cov};
}

/// Conditional of a joint Gaussian given the coordinates in observed_indices.
/// Uses the precision partition: mu_a - P_aa^{-1} P_ab (x_b - mu_b), cov P_aa^{-1}.
inline Gaussian condition_partitioned(const Gaussian& joint_dist, const std::vector<Index>& observed_indices,
                                      const Vector& observed_values, const FactorPolicy& policy = {}) {
  const Index n = joint_dist.dim();
  if (observed_indices.empty() || static_cast<Index>(observed_indices.size()) >= n)
    throw DimensionError("condition_partitioned: observed index set must be a non-empty proper subset");
  detail::require_dims(static_cast<Index>(observed_indices.size()) == observed_values.size(),
                       "condition_partitioned: one observed value per index required");
  std::vector<char> observed(static_cast<size_t>(n), 0);
  for (Index i : observed_indices) {
    if (i < 0 || i >= n) throw DimensionError(detail::concat("condition_partitioned: index ", i, " out of range"));
    if (observed[static_cast<size_t>(i)]) throw DimensionError("condition_partitioned: duplicate index");
    observed[static_cast<size_t>(i)] = 1;
  }
  std::vector<Index> free_idx;
  for (Index i = 0; i < n; ++i)
    if (!observed[static_cast<size_t>(i)]) free_idx.push_back(i);

  Matrix precision = SpdFactor(joint_dist.cov(), policy).inverse();
  const Index a = static_cast<Index>(free_idx.size()), b = static_cast<Index>(observed_indices.size());
  Matrix p_aa(a, a), p_ab(a, b);
  Vector mu_a(a), diff(b);
  for (Index i = 0; i < a; ++i) {
    mu_a(i) = joint_dist.mean()(free_idx[i]);
    for (Index j = 0; j < a; ++j) p_aa(i, j) = precision(free_idx[i], free_idx[j]);
    for (Index j = 0; j < b; ++j) p_ab(i, j) = precision(free_idx[i], observed_indices[j]);
  }
  for (Index j = 0; j < b; ++j) diff(j) = observed_values(j) - joint_dist.mean()(observed_indices[j]);
  SpdFactor paa_f(detail::symmetrize(p_aa), policy);
  Vector mean = mu_a - paa_f.solve_vec(p_ab * diff);
  return {mean, detail::symmetrize(paa_f.inverse())};
}

inline double log_density(const Gaussian& g, const Vector& point, const FactorPolicy& policy = {}) {
  detail::require_dims(point.size() == g.dim(),
                       detail::concat("log_density: point has ", point.size(), " entries, Gaussian is ",
                                      g.dim(), "-dimensional"));
  SpdFactor f(g.cov(), policy);
  return -0.5 * (static_cast<double>(g.dim()) * kLog2Pi + f.log_det() + f.quad_form(point - g.mean()));
}

/// Differential entropy of N(., cov) given its factorization.
inline double gaussian_entropy(const SpdFactor& cov_factor) {
  return 0.5 * (static_cast<double>(cov_factor.dim()) * (1.0 + kLog2Pi) + cov_factor.log_det());
}

/// Clip the eigenvalues of a symmetric matrix from below. This is the exact
/// maximizer of a Gaussian covariance likelihood under the constraint cov >= floor*I.
inline Matrix clip_eigenvalues(const Matrix& m, double floor) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(detail::symmetrize(m));
  Vector ev = es.eigenvalues().cwiseMax(floor);
  return detail::symmetrize(es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose());
}

}  // namespace lieflow
