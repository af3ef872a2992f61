#pragma once

// Coefficient inference for a single pair and trajectories along the
// one-parameter subgroup exp(t sum_j lambda_j G^j).

#include <vector>

#include "lieflow/dynamics_em.hpp"

namespace lieflow {

/// Directional derivative of the matrix exponential at l in direction e,
/// read off the upper-right block of exp([[l, e], [0, l]]).
inline Matrix matrix_exp_derivative(const Matrix& l, const Matrix& e, double tol = 1e-13) {
  const Index n = l.rows();
  Matrix big = Matrix::Zero(2 * n, 2 * n);
  big.topLeftCorner(n, n) = l;
  big.topRightCorner(n, n) = e;
  big.bottomRightCorner(n, n) = l;
  return matrix_exp(big, tol).topRightCorner(n, n);
}

struct CoefficientFit {
  Vector lambda;
  int iterations = 0;
  double objective = 0.0;  // 0.5 r^T Omega^-1 r + 0.5 lambda^T Lambda^-1 lambda
};

/// MAP coefficients under the exact model z_next = exp(sum_j lambda_j G^j) z + eps,
/// found by Gauss-Newton with step halving from `start`.
inline CoefficientFit refine_coefficients(const DynamicsModel& model, const Vector& z, const Vector& z_next,
                                          Vector start, int max_iters = 100, const FactorPolicy& policy = {}) {
  const SpdFactor omega(model.trans_cov, policy), lam(model.coeff_prior_cov, policy);
  const Index J = model.count();
  auto objective = [&](const Vector& l) {
    const Vector r = z_next - matrix_exp(model.basis.combine(l)) * z;
    return 0.5 * omega.quad_form(r) + 0.5 * lam.quad_form(l);
  };
  CoefficientFit fit{std::move(start), 0, 0.0};
  fit.objective = objective(fit.lambda);
  for (int it = 0; it < max_iters; ++it) {
    const Matrix l = model.basis.combine(fit.lambda);
    const Vector r = z_next - matrix_exp(l) * z;
    Matrix jac(z.size(), J);
    for (Index j = 0; j < J; ++j) jac.col(j) = matrix_exp_derivative(l, model.basis[j]) * z;
    const Matrix oj = omega.solve(jac);
    const Matrix h = jac.transpose() * oj + lam.inverse();
    const Vector grad = oj.transpose() * r - lam.solve_vec(fit.lambda);
    const Vector step = SpdFactor(detail::symmetrize(h), policy).solve_vec(grad);
    fit.iterations = it + 1;
    double t = 1.0;
    bool improved = false;
    for (int k = 0; k < 40; ++k, t *= 0.5) {
      const Vector cand = fit.lambda + t * step;
      const double val = objective(cand);
      if (val <= fit.objective) {
        fit.lambda = cand;
        fit.objective = val;
        improved = true;
        break;
      }
    }
    if (!improved || (t * step).norm() <= 1e-14 * (1.0 + fit.lambda.norm())) break;
  }
  return fit;
}

/// Posterior mean of lambda under the first-order model, optionally refined
/// to the MAP under the exact exponential model.
inline Vector infer_coefficients(const DynamicsModel& model, const Vector& z, const Vector& z_next, bool exact,
                                 const FactorPolicy& policy = {}) {
  Vector lambda = e_step_lambda(model, z, z_next, policy).mean;
  if (exact) lambda = refine_coefficients(model, z, z_next, lambda, 100, policy).lambda;
  return lambda;
}

/// Rows z(t_k) = exp(t_k sum_j lambda_j G^j) z0.
inline Matrix rollout(const GeneratorBasis& basis, const Vector& lambda, const Vector& z0, const std::vector<double>& times) {
  const Matrix l = basis.combine(lambda);
  Matrix out(static_cast<Index>(times.size()), z0.size());
  for (size_t k = 0; k < times.size(); ++k) out.row(static_cast<Index>(k)) = (matrix_exp(times[k] * l) * z0).transpose();
  return out;
}

}  // namespace lieflow
