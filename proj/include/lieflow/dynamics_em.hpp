#pragma once

// EM estimation of Lie generators from pairs of given latent vectors under the
// first-order transition model
//   z_next = z + sum_j lambda_j G^j z + eps,  eps ~ N(0, Omega),  lambda ~ N(0, Lambda).
// The E-step posterior over lambda is Gaussian; the M-step for G solves the
// Kronecker normal equations and Omega is the expected residual covariance.

#include <cstdint>
#include <optional>
#include <vector>

#include "lieflow/gaussian.hpp"
#include "lieflow/lie_algebra.hpp"
#include "lieflow/parallel.hpp"
#include "lieflow/random.hpp"

namespace lieflow {

struct DynamicsModel {
  GeneratorBasis basis;
  Matrix trans_cov;        // Omega, d x d
  Matrix coeff_prior_cov;  // Lambda, J x J

  Index latent_dim() const { return basis.latent_dim(); }
  Index count() const { return basis.count(); }

  void validate() const {
    detail::require_dims(trans_cov.rows() == latent_dim() && trans_cov.cols() == latent_dim(),
                         "DynamicsModel: Omega must be d x d");
    detail::require_dims(coeff_prior_cov.rows() == count() && coeff_prior_cov.cols() == count(),
                         "DynamicsModel: Lambda must be J x J");
    SpdFactor{trans_cov};
    SpdFactor{coeff_prior_cov};
  }
};

/// N aligned pairs of latent vectors, one pair per row.
struct PairDataset {
  Matrix z_i;     // N x d
  Matrix z_next;  // N x d

  PairDataset() = default;
  PairDataset(Matrix first, Matrix second) : z_i(std::move(first)), z_next(std::move(second)) {
    detail::require_dims(z_i.rows() == z_next.rows() && z_i.cols() == z_next.cols(),
                         "PairDataset: both frames need the same shape");
    detail::require_dims(z_i.rows() >= 1 && z_i.cols() >= 1, "PairDataset: need at least one pair");
  }

  Index count() const { return z_i.rows(); }
  Index latent_dim() const { return z_i.cols(); }
  Vector first(Index i) const { return z_i.row(i).transpose(); }
  Vector second(Index i) const { return z_next.row(i).transpose(); }
  Vector delta(Index i) const { return (z_next.row(i) - z_i.row(i)).transpose(); }
};

/// Gaussian posterior N(mean, cov) over one pair's coefficients.
struct CoeffPosterior {
  Vector mean;  // q
  Matrix cov;   // K

  Matrix second_moment() const { return cov + mean * mean.transpose(); }
};

/// Factorizations of Omega and Lambda shared across all pairs of an E-step.
struct DynamicsFactors {
  SpdFactor omega;
  SpdFactor lambda;

  DynamicsFactors(const DynamicsModel& model, const FactorPolicy& policy = {})
      : omega(model.trans_cov, policy), lambda(model.coeff_prior_cov, policy) {}
};

inline CoeffPosterior e_step_lambda(const DynamicsModel& model, const DynamicsFactors& factors, const Vector& z,
                                    const Vector& z_next, const FactorPolicy& policy = {}) {
  detail::require_dims(z.size() == model.latent_dim() && z_next.size() == model.latent_dim(),
                       "e_step_lambda: pair dimension does not match the model");
  const Matrix a = assemble_A(model.basis, z);
  const Matrix omega_inv_a = factors.omega.solve(a);
  Matrix precision = factors.lambda.inverse() + a.transpose() * omega_inv_a;
  SpdFactor k_factor(detail::symmetrize(precision), policy);
  CoeffPosterior post;
  post.mean = k_factor.solve_vec(omega_inv_a.transpose() * (z_next - z));
  post.cov = detail::symmetrize(k_factor.inverse());
  return post;
}

/// K = (Lambda^-1 + A^T Omega^-1 A)^-1, q = K A^T Omega^-1 (z_next - z), A = assemble_A(G, z).
inline CoeffPosterior e_step_lambda(const DynamicsModel& model, const Vector& z, const Vector& z_next,
                                    const FactorPolicy& policy = {}) {
  return e_step_lambda(model, DynamicsFactors(model, policy), z, z_next, policy);
}

inline std::vector<CoeffPosterior> e_step_all(const DynamicsModel& model, const PairDataset& data,
                                              unsigned threads = 1, const FactorPolicy& policy = {}) {
  detail::require_dims(data.latent_dim() == model.latent_dim(), "e_step: dataset and model latent dims differ");
  const DynamicsFactors factors(model, policy);
  std::vector<CoeffPosterior> out(static_cast<size_t>(data.count()));
  parallel_for(out.size(), threads, [&](size_t i) {
    const auto row = static_cast<Index>(i);
    out[i] = e_step_lambda(model, factors, data.first(row), data.second(row), policy);
  });
  return out;
}

namespace detail {

inline void check_posteriors(const PairDataset& data, const std::vector<CoeffPosterior>& posteriors) {
  require_dims(static_cast<Index>(posteriors.size()) == data.count(), "one coefficient posterior per pair required");
  const Index J = posteriors.front().mean.size();
  for (const auto& p : posteriors)
    require_dims(p.mean.size() == J && p.cov.rows() == J && p.cov.cols() == J,
                 "coefficient posteriors must share one dimension");
}

/// G_flat = numerator * gram^{-1} via a Cholesky solve of the symmetric gram.
inline Matrix solve_normal_equations(const Matrix& numerator, const Matrix& gram, const FactorPolicy& policy) {
  try {
    SpdFactor f(gram, policy);
    return f.solve(numerator.transpose()).transpose();
  } catch (const NumericError& e) {
    throw NumericError(std::string("generator M-step: singular Kronecker gram matrix (") + e.what() + ")",
                       e.condition());
  }
}

}  // namespace detail

/// G_flat = (sum dz (z kron E[lambda])^T) (sum z z^T kron E[lambda lambda^T])^{-1}.
inline GeneratorBasis m_step_G(const PairDataset& data, const std::vector<CoeffPosterior>& posteriors,
                               const FactorPolicy& policy = {}) {
  detail::check_posteriors(data, posteriors);
  const Index d = data.latent_dim(), J = posteriors.front().mean.size();
  Matrix numerator = Matrix::Zero(d, d * J);
  Matrix gram = Matrix::Zero(d * J, d * J);
  for (Index i = 0; i < data.count(); ++i) {
    const Vector z = data.first(i);
    const auto& p = posteriors[static_cast<size_t>(i)];
    numerator += data.delta(i) * kron(z, p.mean).transpose();
    gram += kron(Matrix(z * z.transpose()), p.second_moment());
  }
  return block_unflatten(detail::solve_normal_equations(numerator, detail::symmetrize(gram), policy), d, J);
}

/// Omega = (1/N) sum [dz dz^T - A q dz^T - dz q^T A^T + A E[lambda lambda^T] A^T] with A from `basis`.
inline Matrix m_step_Omega(const PairDataset& data, const std::vector<CoeffPosterior>& posteriors,
                           const GeneratorBasis& basis) {
  detail::check_posteriors(data, posteriors);
  detail::require_dims(basis.latent_dim() == data.latent_dim() && basis.count() == posteriors.front().mean.size(),
                       "m_step_Omega: basis does not match the data/posteriors");
  const Index d = data.latent_dim();
  Matrix acc = Matrix::Zero(d, d);
  for (Index i = 0; i < data.count(); ++i) {
    const auto& p = posteriors[static_cast<size_t>(i)];
    const Matrix a = assemble_A(basis, data.first(i));
    const Vector dz = data.delta(i);
    const Vector aq = a * p.mean;
    acc += dz * dz.transpose() - aq * dz.transpose() - dz * aq.transpose() + a * p.second_moment() * a.transpose();
  }
  return detail::symmetrize(acc / static_cast<double>(data.count()));
}

/// Zero-mean Gaussian MLE of the coefficient prior: (1/N) sum (K_i + q_i q_i^T).
inline Matrix update_Lambda(const std::vector<CoeffPosterior>& posteriors) {
  if (posteriors.empty()) throw DimensionError("update_Lambda: no posteriors");
  const Index J = posteriors.front().mean.size();
  Matrix acc = Matrix::Zero(J, J);
  for (const auto& p : posteriors) acc += p.second_moment();
  return detail::symmetrize(acc / static_cast<double>(posteriors.size()));
}

/// sum_i E_q[log N(z_next | z + A lambda, Omega) + log N(lambda | 0, Lambda)] in closed form.
inline double expected_complete_data_ll(const DynamicsModel& model, const PairDataset& data,
                                        const std::vector<CoeffPosterior>& posteriors,
                                        const FactorPolicy& policy = {}) {
  detail::check_posteriors(data, posteriors);
  detail::require_dims(posteriors.front().mean.size() == model.count(), "expected_complete_data_ll: J mismatch");
  const DynamicsFactors f(model, policy);
  const double d = static_cast<double>(model.latent_dim()), J = static_cast<double>(model.count());
  const Matrix lambda_inv = f.lambda.inverse();
  double total = 0.0;
  for (Index i = 0; i < data.count(); ++i) {
    const auto& p = posteriors[static_cast<size_t>(i)];
    const Matrix a = assemble_A(model.basis, data.first(i));
    const Vector r = data.delta(i) - a * p.mean;
    const double trans = f.omega.quad_form(r) + (f.omega.solve(a) * p.cov * a.transpose()).trace();
    const double prior = (lambda_inv * p.second_moment()).trace();
    total += -0.5 * (d * kLog2Pi + f.omega.log_det() + trans) - 0.5 * (J * kLog2Pi + f.lambda.log_det() + prior);
  }
  return total;
}

/// Sum of the entropies of the coefficient posteriors.
inline double posterior_entropy(const std::vector<CoeffPosterior>& posteriors) {
  double h = 0.0;
  for (const auto& p : posteriors) h += gaussian_entropy(SpdFactor(p.cov, FactorPolicy{1e300}));
  return h;
}

/// log N(z_next - z | 0, Omega + A Lambda A^T): the coefficient-marginalized transition density.
inline double predictive_log_density(const DynamicsModel& model, const Vector& z, const Vector& z_next) {
  const Gaussian prior(Vector::Zero(model.count()), model.coeff_prior_cov);
  const LinearGaussianMap map(assemble_A(model.basis, z), Vector::Zero(model.latent_dim()), model.trans_cov);
  return log_density(marginal(prior, map), z_next - z);
}

struct EmConfig {
  Index initial_generators = 1;
  int max_iters = 500;
  double tolerance = 1e-8;
  bool orthogonalize = true;
  double variance_threshold = 0.99;
  bool estimate_lambda = false;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  /// Eigenvalue floor applied to the Omega and Lambda updates.
  double cov_floor = 1e-10;
  FactorPolicy policy{};
};

struct DynamicsFitResult {
  DynamicsModel model;
  /// Per iteration: expected complete-data log-likelihood at the updated
  /// parameters plus the entropy of the posteriors that produced them (the
  /// EM free energy), recorded before orthogonalization.
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

/// G^j entries iid N(0, 1/d), Omega = I, Lambda = I.
inline DynamicsModel initial_dynamics(Index d, Index J, std::uint64_t seed) {
  CounterRng rng(seed, stream_id({0x64796eull, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(J)}));
  std::vector<Matrix> gens;
  for (Index j = 0; j < J; ++j) gens.push_back(rng.normal_matrix(d, d) / std::sqrt(static_cast<double>(d)));
  return {GeneratorBasis(std::move(gens)), Matrix::Identity(d, d), Matrix::Identity(J, J)};
}

/// Orthogonalize the generators. Lambda is carried along (M Lambda M^T) so that
/// sum_j lambda_j G^j keeps its distribution; a frozen Lambda would otherwise
/// lose the scale the generators had.
inline void orthogonalize_model(DynamicsModel& model, double threshold, double floor) {
  if (model.basis.norm() == 0.0) return;
  auto ortho = orthogonalize_with_mixing(model.basis, threshold);
  model.coeff_prior_cov = clip_eigenvalues(ortho.mixing * model.coeff_prior_cov * ortho.mixing.transpose(), floor);
  model.basis = std::move(ortho.basis);
}

inline DynamicsFitResult fit_dynamics(const PairDataset& data, const EmConfig& config,
                                      std::optional<DynamicsModel> initial = std::nullopt) {
  if (config.initial_generators < 1) throw DimensionError("fit: initial_generators must be >= 1");
  DynamicsFitResult result;
  result.model = initial ? *initial : initial_dynamics(data.latent_dim(), config.initial_generators, config.seed);
  DynamicsModel& model = result.model;
  detail::require_dims(model.latent_dim() == data.latent_dim(), "fit: model and dataset latent dims differ");
  for (int iter = 0; iter < config.max_iters; ++iter) {
    const auto posteriors = e_step_all(model, data, config.threads, config.policy);
    model.basis = m_step_G(data, posteriors, config.policy);
    model.trans_cov = clip_eigenvalues(m_step_Omega(data, posteriors, model.basis), config.cov_floor);
    if (config.estimate_lambda) model.coeff_prior_cov = clip_eigenvalues(update_Lambda(posteriors), config.cov_floor);
    const double objective =
        expected_complete_data_ll(model, data, posteriors, config.policy) + posterior_entropy(posteriors);
    if (!std::isfinite(objective)) throw NumericError("fit: objective is not finite");
    result.trace.push_back(objective);
    result.iterations = iter + 1;
    if (config.orthogonalize) orthogonalize_model(model, config.variance_threshold, config.cov_floor);
    if (iter > 0) {
      const double prev = result.trace[result.trace.size() - 2];
      if (std::abs(objective - prev) < config.tolerance * std::abs(objective)) {
        result.converged = true;
        break;
      }
    }
  }
  return result;
}

}  // namespace lieflow
