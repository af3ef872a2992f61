#pragma once

// Posterior expectations consumed by the transition M-steps when the latent
// vectors themselves are uncertain, and the M-steps that consume them.

#include <utility>
#include <vector>

#include "lieflow/dynamics_em.hpp"

namespace lieflow {

/// Per-pair expectations under a posterior over (z_i, lambda, z_next), with
/// dz = z_next - z_i and u = z_i kron lambda.
struct LatentMoments {
  Vector ez_i, ez_next;            // E[z_i], E[z_next]
  Matrix ezz_i, ezz_next;          // E[z_i z_i^T], E[z_next z_next^T]
  Matrix ez_next_z;                // E[z_next z_i^T]
  Vector elam;                     // E[lambda]
  Matrix elamlam;                  // E[lambda lambda^T]
  Matrix e_dz_zkronlam;            // E[dz u^T], d x dJ
  Matrix e_zz_kron_lamlam;         // E[u u^T], dJ x dJ
  Matrix e_lam_dz;                 // E[lambda dz^T], J x d
  Matrix e_dz_dz;                  // E[dz dz^T]

  Index latent_dim() const { return ez_i.size(); }
  Index count() const { return elam.size(); }

  /// Moments when z_i and z_next are known exactly and lambda ~ N(q, K).
  static LatentMoments from_point(const Vector& z, const Vector& z_next, const CoeffPosterior& coeffs) {
    LatentMoments m;
    const Vector dz = z_next - z;
    const Matrix ll = coeffs.second_moment();
    m.ez_i = z;
    m.ez_next = z_next;
    m.ezz_i = z * z.transpose();
    m.ezz_next = z_next * z_next.transpose();
    m.ez_next_z = z_next * z.transpose();
    m.elam = coeffs.mean;
    m.elamlam = ll;
    m.e_dz_zkronlam = dz * kron(z, coeffs.mean).transpose();
    m.e_zz_kron_lamlam = kron(m.ezz_i, ll);
    m.e_lam_dz = coeffs.mean * dz.transpose();
    m.e_dz_dz = dz * dz.transpose();
    return m;
  }

  /// Largest violation of the PSD constraints E[xx^T] - E[x]E[x]^T >= 0
  /// (returns the most negative eigenvalue, or 0).
  double psd_violation() const {
    auto worst = [](const Matrix& second, const Vector& first) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(detail::symmetrize(second - first * first.transpose()));
      return std::min(0.0, es.eigenvalues().minCoeff());
    };
    return std::min({worst(ezz_i, ez_i), worst(ezz_next, ez_next), worst(elamlam, elam)});
  }
};

/// Expected residual covariance E[(dz - G_flat u)(dz - G_flat u)^T] for one pair.
inline Matrix expected_residual(const LatentMoments& m, const Matrix& g_flat) {
  Matrix gx = g_flat * m.e_dz_zkronlam.transpose();
  return detail::symmetrize(m.e_dz_dz - gx - gx.transpose() + g_flat * m.e_zz_kron_lamlam * g_flat.transpose());
}

/// G and Omega from expected sufficient statistics:
///   G_flat = (sum E[dz u^T]) (sum E[u u^T])^{-1},
///   Omega  = (1/N) sum E[(dz - G_flat u)(dz - G_flat u)^T].
inline std::pair<GeneratorBasis, Matrix> m_step_dynamics(const std::vector<LatentMoments>& moments,
                                                         const FactorPolicy& policy = {}) {
  if (moments.empty()) throw DimensionError("m_step_dynamics: no moments");
  const Index d = moments.front().latent_dim(), J = moments.front().count();
  Matrix numerator = Matrix::Zero(d, d * J);
  Matrix gram = Matrix::Zero(d * J, d * J);
  for (const auto& m : moments) {
    detail::require_dims(m.latent_dim() == d && m.count() == J, "m_step_dynamics: inconsistent moment shapes");
    numerator += m.e_dz_zkronlam;
    gram += m.e_zz_kron_lamlam;
  }
  const Matrix g_flat = detail::solve_normal_equations(numerator, detail::symmetrize(gram), policy);
  Matrix omega = Matrix::Zero(d, d);
  for (const auto& m : moments) omega += expected_residual(m, g_flat);
  omega /= static_cast<double>(moments.size());
  return {block_unflatten(g_flat, d, J), detail::symmetrize(omega)};
}

/// Omega alone for a fixed basis.
inline Matrix m_step_omega_given(const std::vector<LatentMoments>& moments, const GeneratorBasis& basis) {
  const Matrix g_flat = block_flatten(basis);
  const Index d = basis.latent_dim();
  Matrix omega = Matrix::Zero(d, d);
  for (const auto& m : moments) omega += expected_residual(m, g_flat);
  return detail::symmetrize(omega / static_cast<double>(moments.size()));
}

inline Matrix update_Lambda(const std::vector<LatentMoments>& moments) {
  const Index J = moments.front().count();
  Matrix acc = Matrix::Zero(J, J);
  for (const auto& m : moments) acc += m.elamlam;
  return detail::symmetrize(acc / static_cast<double>(moments.size()));
}

/// E[log N(z_next | z_i + A lambda, Omega) + log N(lambda | 0, Lambda)] for one pair.
inline double expected_transition_ll(const LatentMoments& m, const Matrix& g_flat, const SpdFactor& omega,
                                     const SpdFactor& lambda) {
  const double d = static_cast<double>(m.latent_dim()), J = static_cast<double>(m.count());
  const Matrix r = expected_residual(m, g_flat);
  const double trans = -0.5 * (d * kLog2Pi + omega.log_det() + omega.solve(r).trace());
  const double prior = -0.5 * (J * kLog2Pi + lambda.log_det() + lambda.solve(m.elamlam).trace());
  return trans + prior;
}

}  // namespace lieflow
