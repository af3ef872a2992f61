#pragma once

// Joint EM over image pairs with a probabilistic-PCA observation model
//   z_i ~ N(0, I),  x_i = W z_i + mu + e,  lambda ~ N(0, Lambda),
//   z_next = z_i + A(z_i) lambda + eps,  x_next = W z_next + mu + e',
// with e, e' ~ N(0, sigma^2 I) and eps ~ N(0, Omega).
//
// The posterior over (z_i, lambda, z_next) is not Gaussian because A(z_i)
// lambda is bilinear, so the E-step has three backends: tensor-grid
// quadrature over (z_i, lambda) with z_next integrated analytically,
// self-normalized importance sampling from p(z_i | x_i) p(lambda), and a
// structured mean-field fixed point q(z_i, z_next) q(lambda).

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lieflow/latent_moments.hpp"

namespace lieflow {

struct PpcaModel {
  Matrix loading;     // W, D x d
  Vector data_mean;   // mu, D
  double noise_var;   // sigma^2
  DynamicsModel dynamics;

  Index image_dim() const { return loading.rows(); }
  Index latent_dim() const { return loading.cols(); }

  void validate() const {
    if (!(noise_var > 0.0)) throw NumericError("PpcaModel: noise variance must be positive");
    detail::require_dims(data_mean.size() == image_dim(), "PpcaModel: mu must have D entries");
    detail::require_dims(image_dim() >= latent_dim() && latent_dim() >= 1, "PpcaModel: need D >= d >= 1");
    detail::require_dims(dynamics.latent_dim() == latent_dim(), "PpcaModel: dynamics act on a different latent dim");
  }
};

/// N pairs of images, one vectorized image per row.
struct ImagePairDataset {
  Matrix x_i;     // N x D
  Matrix x_next;  // N x D
  Index height = 1;
  Index width = 0;

  ImagePairDataset() = default;
  ImagePairDataset(Matrix first, Matrix second, Index h = 1, Index w = 0)
      : x_i(std::move(first)), x_next(std::move(second)), height(h), width(w > 0 ? w : x_i.cols() / std::max<Index>(h, 1)) {
    detail::require_dims(x_i.rows() == x_next.rows() && x_i.cols() == x_next.cols(),
                         "ImagePairDataset: both frames need the same shape");
    detail::require_dims(x_i.rows() >= 1 && x_i.cols() >= 1, "ImagePairDataset: need at least one pair");
  }

  Index count() const { return x_i.rows(); }
  Index image_dim() const { return x_i.cols(); }
  Vector first(Index i) const { return x_i.row(i).transpose(); }
  Vector second(Index i) const { return x_next.row(i).transpose(); }
};

enum class EStepMethod { quadrature, fixed_point, monte_carlo };

inline std::string to_string(EStepMethod m) {
  switch (m) {
    case EStepMethod::quadrature: return "quadrature";
    case EStepMethod::fixed_point: return "fixed-point";
    case EStepMethod::monte_carlo: return "mc";
  }
  return "?";
}

struct EStepConfig {
  EStepMethod method = EStepMethod::fixed_point;
  /// Treat lambda as identically zero (no coefficient latent).
  bool freeze_coefficients = false;
  // quadrature
  Index grid_points = 48;
  double box_sds = 12.0;
  int box_expansions = 5;
  double boundary_tolerance = 1e-8;
  // fixed point
  int fixed_point_iters = 1000;
  double fixed_point_tol = 1e-10;
  // monte carlo
  Index samples = 100000;
  double min_ess_fraction = 0.01;
  std::uint64_t seed = 0;
  FactorPolicy policy{};
};

/// Output of the joint E-step for one pair.
struct JointEStep {
  LatentMoments moments;
  /// Lower bound on log p(x_i, x_next) at the current parameters: exact up to
  /// grid resolution for quadrature, an importance-sampling estimate for
  /// monte_carlo, the mean-field evidence lower bound for fixed_point.
  double log_evidence = 0.0;
  /// Monte-Carlo standard errors of every moment (monte_carlo only).
  std::optional<LatentMoments> standard_errors;
  double effective_sample_size = 0.0;
  int iterations = 0;
};

/// Parameter-only quantities shared by all pairs in one E-step.
class PpcaFactors {
 public:
  PpcaFactors(const PpcaModel& model, const FactorPolicy& policy = {})
      : model_(model),
        omega_(model.dynamics.trans_cov, policy),
        lambda_(model.dynamics.coeff_prior_cov, policy),
        post_(model.loading.transpose() * model.loading +
                  model.noise_var * Matrix::Identity(model.latent_dim(), model.latent_dim()),
              policy) {
    model.validate();
    const Index d = model.latent_dim(), D = model.image_dim(), J = model.dynamics.count();
    const double s2 = model.noise_var;
    wtw_ = model.loading.transpose() * model.loading;
    omega_inv_ = detail::symmetrize(omega_.inverse());
    lambda_inv_ = detail::symmetrize(lambda_.inverse());
    post_cov_ = detail::symmetrize(s2 * post_.inverse());
    post_cov_factor_.emplace(post_cov_, FactorPolicy{1e300});
    gamma_ = detail::symmetrize(SpdFactor(omega_inv_ + wtw_ / s2, policy).inverse());
    gamma_factor_.emplace(gamma_, FactorPolicy{1e300});
    transfer_ = gamma_ * omega_inv_;
    Matrix c = s2 * Matrix::Identity(D, D) + model.loading * model.dynamics.trans_cov * model.loading.transpose();
    next_cov_.emplace(detail::symmetrize(c), policy);
    wcw_ = detail::symmetrize(model.loading.transpose() * next_cov_->solve(model.loading));
    Matrix marg = s2 * Matrix::Identity(D, D) + model.loading * model.loading.transpose();
    marginal_x_.emplace(detail::symmetrize(marg), policy);
    h_.resize(static_cast<size_t>(J * J));
    for (Index j = 0; j < J; ++j)
      for (Index k = 0; k < J; ++k)
        h_[static_cast<size_t>(j * J + k)] =
            model.dynamics.basis[j].transpose() * omega_inv_ * model.dynamics.basis[k];
    g_flat_ = block_flatten(model.dynamics.basis);
    (void)d;
  }

  const PpcaModel& model() const { return model_; }
  const SpdFactor& omega() const { return omega_; }
  const SpdFactor& lambda() const { return lambda_; }
  const Matrix& omega_inv() const { return omega_inv_; }
  const Matrix& lambda_inv() const { return lambda_inv_; }
  const Matrix& wtw() const { return wtw_; }
  /// (W^T W + sigma^2 I) factor.
  const SpdFactor& posterior_precision() const { return post_; }
  const Matrix& posterior_cov() const { return post_cov_; }
  const SpdFactor& posterior_cov_factor() const { return *post_cov_factor_; }
  const Matrix& gamma() const { return gamma_; }
  const SpdFactor& gamma_factor() const { return *gamma_factor_; }
  /// Gamma Omega^{-1}
  const Matrix& transfer() const { return transfer_; }
  /// sigma^2 I + W Omega W^T
  const SpdFactor& next_cov() const { return *next_cov_; }
  const Matrix& wcw() const { return wcw_; }
  /// sigma^2 I + W W^T
  const SpdFactor& marginal_x() const { return *marginal_x_; }
  /// G^j^T Omega^{-1} G^k
  const Matrix& h(Index j, Index k) const { return h_[static_cast<size_t>(j * model_.dynamics.count() + k)]; }
  const Matrix& g_flat() const { return g_flat_; }

 private:
  const PpcaModel& model_;
  SpdFactor omega_, lambda_, post_;
  Matrix wtw_, omega_inv_, lambda_inv_, post_cov_, gamma_, transfer_, wcw_, g_flat_;
  std::optional<SpdFactor> post_cov_factor_, gamma_factor_, next_cov_, marginal_x_;
  std::vector<Matrix> h_;
};

/// p(z | x) = N((W^T W + sigma^2 I)^{-1} W^T (x - mu), sigma^2 (W^T W + sigma^2 I)^{-1}).
inline Gaussian posterior_z_given_x(const PpcaModel& model, const Vector& x) {
  if (!(model.noise_var > 0.0)) throw NumericError("posterior_z_given_x: noise variance must be positive");
  detail::require_dims(x.size() == model.image_dim(), "posterior_z_given_x: image has the wrong dimension");
  const Index d = model.latent_dim();
  SpdFactor m(model.loading.transpose() * model.loading + model.noise_var * Matrix::Identity(d, d));
  return {m.solve_vec(model.loading.transpose() * (x - model.data_mean)),
          detail::symmetrize(model.noise_var * m.inverse())};
}

/// p(z_next | x_next, z_i, lambda) = N(gamma, Gamma) with
/// Gamma = (Omega^{-1} + W^T W / sigma^2)^{-1},
/// gamma = Gamma (W^T (x_next - mu) / sigma^2 + Omega^{-1} (z_i + A lambda)).
inline Gaussian posterior_znext(const PpcaModel& model, const Vector& x_next, const Vector& z_i,
                                const Vector& lambda) {
  detail::require_dims(x_next.size() == model.image_dim() && z_i.size() == model.latent_dim() &&
                           lambda.size() == model.dynamics.count(),
                       "posterior_znext: dimension mismatch");
  const double s2 = model.noise_var;
  SpdFactor omega(model.dynamics.trans_cov);
  const Matrix wt = model.loading.transpose();
  SpdFactor prec(omega.inverse() + wt * model.loading / s2);
  const Vector prior_mean = z_i + assemble_A(model.dynamics.basis, z_i) * lambda;
  return {prec.solve_vec(wt * (x_next - model.data_mean) / s2 + omega.solve_vec(prior_mean)),
          detail::symmetrize(prec.inverse())};
}

namespace detail {

/// Flattened per-point features whose expectations give LatentMoments.
/// Layout: z, gamma, z z^T, gamma gamma^T, gamma z^T, lambda, lambda lambda^T,
/// delta u^T, u u^T, lambda delta^T, delta delta^T, with delta = gamma - z.
struct FeatureLayout {
  Index d, J;
  Index z0, g0, zz0, gg0, gz0, l0, ll0, du0, uu0, ld0, dd0, size;

  FeatureLayout(Index d_, Index J_) : d(d_), J(J_) {
    Index o = 0;
    z0 = o; o += d;
    g0 = o; o += d;
    zz0 = o; o += d * d;
    gg0 = o; o += d * d;
    gz0 = o; o += d * d;
    l0 = o; o += J;
    ll0 = o; o += J * J;
    du0 = o; o += d * d * J;
    uu0 = o; o += d * J * d * J;
    ld0 = o; o += J * d;
    dd0 = o; o += d * d;
    size = o;
  }

  static void put(Vector& f, Index offset, const Matrix& m) {
    // column-major copy
    for (Index c = 0; c < m.cols(); ++c)
      for (Index r = 0; r < m.rows(); ++r) f(offset + c * m.rows() + r) = m(r, c);
  }
  static Matrix get(const Vector& f, Index offset, Index rows, Index cols) {
    Matrix m(rows, cols);
    for (Index c = 0; c < cols; ++c)
      for (Index r = 0; r < rows; ++r) m(r, c) = f(offset + c * rows + r);
    return m;
  }

  void features(const Vector& z, const Vector& lambda, const Vector& gamma, Vector& f) const {
    const Vector delta = gamma - z;
    const Vector u = kron(z, lambda);
    f.segment(z0, d) = z;
    f.segment(g0, d) = gamma;
    put(f, zz0, z * z.transpose());
    put(f, gg0, gamma * gamma.transpose());
    put(f, gz0, gamma * z.transpose());
    f.segment(l0, J) = lambda;
    put(f, ll0, lambda * lambda.transpose());
    put(f, du0, delta * u.transpose());
    put(f, uu0, u * u.transpose());
    put(f, ld0, lambda * delta.transpose());
    put(f, dd0, delta * delta.transpose());
  }

  /// Expectations of the features plus the conditional covariance Gamma of z_next.
  LatentMoments moments(const Vector& e, const Matrix& gamma_cov) const {
    LatentMoments m;
    m.ez_i = e.segment(z0, d);
    m.ez_next = e.segment(g0, d);
    m.ezz_i = symmetrize(get(e, zz0, d, d));
    m.ezz_next = symmetrize(get(e, gg0, d, d) + gamma_cov);
    m.ez_next_z = get(e, gz0, d, d);
    m.elam = e.segment(l0, J);
    m.elamlam = symmetrize(get(e, ll0, J, J));
    m.e_dz_zkronlam = get(e, du0, d, d * J);
    m.e_zz_kron_lamlam = symmetrize(get(e, uu0, d * J, d * J));
    m.e_lam_dz = get(e, ld0, J, d);
    m.e_dz_dz = symmetrize(get(e, dd0, d, d) + gamma_cov);
    return m;
  }

  /// Same layout without the Gamma offsets (used for standard errors).
  LatentMoments raw(const Vector& e) const { return moments(e, Matrix::Zero(d, d)); }
};

}  // namespace detail

/// Expected complete-data log-likelihood of one pair under the moments:
/// both reconstructions, the N(0, I) prior on z_i, the transition, and the
/// coefficient prior (omitted when coefficients are frozen at zero).
inline double ppca_expected_ll(const PpcaModel& model, const SpdFactor& omega, const SpdFactor& lambda,
                               const Matrix& g_flat, const Vector& x, const Vector& x_next,
                               const LatentMoments& m, bool include_coeff_prior) {
  const double D = static_cast<double>(model.image_dim()), d = static_cast<double>(model.latent_dim());
  const double s2 = model.noise_var;
  const Matrix wtw = model.loading.transpose() * model.loading;
  auto recon = [&](const Vector& img, const Vector& ez, const Matrix& ezz) {
    const Vector xm = img - model.data_mean;
    // ||x - W E[z]||^2 + tr(W^T W Cov[z]) avoids cancellation when sigma^2 is tiny
    const double err = (xm - model.loading * ez).squaredNorm() + (wtw * (ezz - ez * ez.transpose())).trace();
    return -0.5 * D * (kLog2Pi + std::log(s2)) - 0.5 * err / s2;
  };
  double total = recon(x, m.ez_i, m.ezz_i) + recon(x_next, m.ez_next, m.ezz_next);
  total += -0.5 * (d * kLog2Pi + m.ezz_i.trace());
  const Matrix r = expected_residual(m, g_flat);
  total += -0.5 * (d * kLog2Pi + omega.log_det() + omega.solve(r).trace());
  if (include_coeff_prior) {
    const double J = static_cast<double>(m.count());
    total += -0.5 * (J * kLog2Pi + lambda.log_det() + lambda.solve(m.elamlam).trace());
  }
  return total;
}

namespace detail {

inline double log_marginal_x(const PpcaFactors& f, const Vector& x) {
  const Vector xm = x - f.model().data_mean;
  return -0.5 * (static_cast<double>(xm.size()) * kLog2Pi + f.marginal_x().log_det() + f.marginal_x().quad_form(xm));
}

/// log N(x_next | W m + mu, sigma^2 I + W Omega W^T) from precomputed pieces.
struct NextImageDensity {
  Vector wcx;  // W^T C^{-1} x_next_mu
  double xcx;  // x_next_mu^T C^{-1} x_next_mu
  double constant;
  const Matrix* wcw;

  NextImageDensity(const PpcaFactors& f, const Vector& x_next) {
    const Vector xm = x_next - f.model().data_mean;
    const Vector cx = f.next_cov().solve_vec(xm);
    wcx = f.model().loading.transpose() * cx;
    xcx = xm.dot(cx);
    constant = -0.5 * (static_cast<double>(xm.size()) * kLog2Pi + f.next_cov().log_det());
    wcw = &f.wcw();
  }

  double operator()(const Vector& m) const { return constant - 0.5 * (xcx - 2.0 * m.dot(wcx) + m.dot(*wcw * m)); }
};

/// State of the structured mean-field fixed point.
struct MeanField {
  Vector mean_zz;  // (z_i, z_next) stacked, 2d
  Matrix cov_zz;
  Vector mean_lam;
  Matrix cov_lam;
  int iterations = 0;
  double residual = 0.0;
};

inline MeanField mean_field(const PpcaFactors& f, const Vector& x, const Vector& x_next, const EStepConfig& cfg) {
  const PpcaModel& model = f.model();
  const Index d = model.latent_dim(), J = model.dynamics.count();
  const double s2 = model.noise_var;
  const Vector b1 = model.loading.transpose() * (x - model.data_mean) / s2;
  const Vector b2 = model.loading.transpose() * (x_next - model.data_mean) / s2;
  const Matrix& oi = f.omega_inv();
  const Matrix eye = Matrix::Identity(d, d);

  MeanField mf;
  mf.mean_lam = Vector::Zero(J);
  mf.cov_lam = cfg.freeze_coefficients ? Matrix::Zero(J, J) : model.dynamics.coeff_prior_cov;
  mf.mean_zz = Vector::Zero(2 * d);
  Vector h(2 * d);
  h << b1, b2;
  const int max_iters = cfg.freeze_coefficients ? 1 : cfg.fixed_point_iters;
  for (int it = 0; it < max_iters; ++it) {
    // q(z_i, z_next) given q(lambda)
    const Matrix lbar = model.dynamics.basis.combine(mf.mean_lam);
    const Matrix eb = eye + lbar;
    const Matrix ell = mf.cov_lam + mf.mean_lam * mf.mean_lam.transpose();
    Matrix btob = oi + lbar.transpose() * oi + oi * lbar;
    for (Index j = 0; j < J; ++j)
      for (Index k = 0; k < J; ++k)
        if (ell(j, k) != 0.0) btob += ell(j, k) * f.h(j, k);
    Matrix prec(2 * d, 2 * d);
    prec.topLeftCorner(d, d) = eye + f.wtw() / s2 + btob;
    prec.topRightCorner(d, d) = -eb.transpose() * oi;
    prec.bottomLeftCorner(d, d) = -oi * eb;
    prec.bottomRightCorner(d, d) = f.wtw() / s2 + oi;
    SpdFactor pf(symmetrize(prec), cfg.policy);
    const Vector new_zz = pf.solve_vec(h);
    mf.cov_zz = symmetrize(pf.inverse());

    double change = (new_zz - mf.mean_zz).cwiseAbs().maxCoeff();
    mf.mean_zz = new_zz;
    if (!cfg.freeze_coefficients) {
      // q(lambda) given q(z_i, z_next)
      const Vector mz = mf.mean_zz.head(d), mn = mf.mean_zz.tail(d);
      const Matrix ezz = mf.cov_zz.topLeftCorner(d, d) + mz * mz.transpose();
      const Matrix enz = mf.cov_zz.bottomLeftCorner(d, d) + mn * mz.transpose();
      Matrix lprec = f.lambda_inv();
      Vector lin(J);
      for (Index j = 0; j < J; ++j) {
        for (Index k = 0; k < J; ++k) lprec(j, k) += (f.h(j, k) * ezz).trace();
        lin(j) = (model.dynamics.basis[j].transpose() * oi * (enz - ezz)).trace();
      }
      SpdFactor lf(symmetrize(lprec), cfg.policy);
      const Vector new_lam = lf.solve_vec(lin);
      change = std::max(change, (new_lam - mf.mean_lam).cwiseAbs().maxCoeff());
      mf.mean_lam = new_lam;
      mf.cov_lam = symmetrize(lf.inverse());
    }
    mf.iterations = it + 1;
    mf.residual = change;
    const double scale = std::max(1.0, std::max(mf.mean_zz.cwiseAbs().maxCoeff(), mf.mean_lam.cwiseAbs().maxCoeff()));
    if (change <= cfg.fixed_point_tol * scale && it > 0) return mf;
  }
  if (!cfg.freeze_coefficients)
    throw ConvergenceError(concat("fixed-point E-step did not converge in ", cfg.fixed_point_iters,
                                  " iterations (residual ", mf.residual, ")"),
                           mf.residual);
  return mf;
}

inline LatentMoments mean_field_moments(const MeanField& mf, Index d) {
  LatentMoments m;
  const Vector mz = mf.mean_zz.head(d), mn = mf.mean_zz.tail(d);
  m.ez_i = mz;
  m.ez_next = mn;
  m.ezz_i = symmetrize(mf.cov_zz.topLeftCorner(d, d) + mz * mz.transpose());
  m.ezz_next = symmetrize(mf.cov_zz.bottomRightCorner(d, d) + mn * mn.transpose());
  m.ez_next_z = mf.cov_zz.bottomLeftCorner(d, d) + mn * mz.transpose();
  m.elam = mf.mean_lam;
  m.elamlam = symmetrize(mf.cov_lam + mf.mean_lam * mf.mean_lam.transpose());
  const Matrix cross = m.ez_next_z - m.ezz_i;
  m.e_dz_zkronlam = kron(cross, Matrix(mf.mean_lam.transpose()));
  m.e_zz_kron_lamlam = kron(m.ezz_i, m.elamlam);
  m.e_lam_dz = mf.mean_lam * (mn - mz).transpose();
  m.e_dz_dz = symmetrize(m.ezz_next - m.ez_next_z - m.ez_next_z.transpose() + m.ezz_i);
  return m;
}

inline double entropy_of(const Matrix& cov) {
  if (cov.rows() == 0) return 0.0;
  return gaussian_entropy(SpdFactor(cov, FactorPolicy{1e300}));
}

}  // namespace detail

inline JointEStep e_step_fixed_point(const PpcaFactors& f, const Vector& x, const Vector& x_next,
                                     const EStepConfig& cfg) {
  const auto mf = detail::mean_field(f, x, x_next, cfg);
  JointEStep out;
  out.moments = detail::mean_field_moments(mf, f.model().latent_dim());
  out.iterations = mf.iterations;
  const double h = detail::entropy_of(mf.cov_zz) + (cfg.freeze_coefficients ? 0.0 : detail::entropy_of(mf.cov_lam));
  out.log_evidence = ppca_expected_ll(f.model(), f.omega(), f.lambda(), f.g_flat(), x, x_next, out.moments,
                                      !cfg.freeze_coefficients) +
                     h;
  return out;
}

inline JointEStep e_step_quadrature(const PpcaFactors& f, const Vector& x, const Vector& x_next,
                                    const EStepConfig& cfg) {
  const PpcaModel& model = f.model();
  const Index d = model.latent_dim(), J = model.dynamics.count();
  const Index K = cfg.freeze_coefficients ? d : d + J;
  if (d + d + J > 6) throw DimensionError("quadrature E-step supports d + d + J <= 6 only");
  if (cfg.grid_points < 16) throw DimensionError("quadrature E-step needs at least 16 points per dimension");

  // Box centred on the mean-field solution, scaled by its marginal spreads.
  Vector center(K), half(K);
  {
    EStepConfig mf_cfg = cfg;
    detail::MeanField mf;
    try {
      mf = detail::mean_field(f, x, x_next, mf_cfg);
    } catch (const ConvergenceError&) {
      mf_cfg.fixed_point_iters = 1;
      mf_cfg.freeze_coefficients = true;
      mf = detail::mean_field(f, x, x_next, mf_cfg);
      mf.mean_lam = Vector::Zero(J);
      mf.cov_lam = model.dynamics.coeff_prior_cov;
    }
    center.head(d) = mf.mean_zz.head(d);
    half.head(d) = cfg.box_sds * 1.5 * mf.cov_zz.topLeftCorner(d, d).diagonal().cwiseSqrt();
    if (!cfg.freeze_coefficients) {
      center.tail(J) = mf.mean_lam;
      half.tail(J) = cfg.box_sds * 1.5 * mf.cov_lam.diagonal().cwiseSqrt();
    }
  }

  const Vector u = f.posterior_precision().solve_vec(model.loading.transpose() * (x - model.data_mean));
  const detail::NextImageDensity next_density(f, x_next);
  const detail::FeatureLayout layout(d, J);
  const Vector b2 = model.loading.transpose() * (x_next - model.data_mean) / model.noise_var;
  const Vector gamma_offset = f.gamma() * b2;
  const Matrix& transfer = f.transfer();

  const Index n = cfg.grid_points;
  Index total = 1;
  for (Index k = 0; k < K; ++k) total *= n;

  for (int attempt = 0; attempt <= cfg.box_expansions; ++attempt) {
    Vector lo = center - half;
    Vector step = 2.0 * half / static_cast<double>(n - 1);
    std::vector<double> logf(static_cast<size_t>(total));
    std::vector<Index> idx(static_cast<size_t>(K), 0);
    Vector point(K);
    double peak = -std::numeric_limits<double>::infinity();
    double boundary_peak = -std::numeric_limits<double>::infinity();
    for (Index p = 0; p < total; ++p) {
      Index rem = p;
      bool on_face = false;
      for (Index k = K - 1; k >= 0; --k) {
        const Index i = rem % n;
        rem /= n;
        idx[static_cast<size_t>(k)] = i;
        point(k) = lo(k) + step(k) * static_cast<double>(i);
        if (i == 0 || i == n - 1) on_face = true;
      }
      const Vector z = point.head(d);
      const Vector lam = cfg.freeze_coefficients ? Vector::Zero(J) : Vector(point.tail(J));
      const Vector zd = z - u;
      double lf = -0.5 * f.posterior_cov_factor().quad_form(zd);
      if (!cfg.freeze_coefficients) lf += -0.5 * f.lambda().quad_form(lam);
      const Vector m = z + assemble_A(model.dynamics.basis, z) * lam;
      lf += next_density(m);
      logf[static_cast<size_t>(p)] = lf;
      peak = std::max(peak, lf);
      if (on_face) boundary_peak = std::max(boundary_peak, lf);
    }
    if (boundary_peak - peak > std::log(cfg.boundary_tolerance)) {
      half *= 1.6;
      continue;
    }
    // Trapezoid weights and accumulation.
    Vector acc = Vector::Zero(layout.size);
    Vector feat(layout.size);
    double wsum = 0.0;
    for (Index p = 0; p < total; ++p) {
      Index rem = p;
      double w = 1.0;
      for (Index k = K - 1; k >= 0; --k) {
        const Index i = rem % n;
        rem /= n;
        point(k) = lo(k) + step(k) * static_cast<double>(i);
        w *= (i == 0 || i == n - 1) ? 0.5 : 1.0;
      }
      w *= std::exp(logf[static_cast<size_t>(p)] - peak);
      if (w == 0.0) continue;
      const Vector z = point.head(d);
      const Vector lam = cfg.freeze_coefficients ? Vector::Zero(J) : Vector(point.tail(J));
      const Vector gamma = gamma_offset + transfer * (z + assemble_A(model.dynamics.basis, z) * lam);
      layout.features(z, lam, gamma, feat);
      acc += w * feat;
      wsum += w;
    }
    double cell = 1.0;
    for (Index k = 0; k < K; ++k) cell *= step(k);
    JointEStep out;
    out.moments = layout.moments(acc / wsum, f.gamma());
    // Normalizers of the Gaussian factors dropped above.
    double log_norm = -0.5 * (static_cast<double>(d) * kLog2Pi + f.posterior_cov_factor().log_det());
    if (!cfg.freeze_coefficients)
      log_norm += -0.5 * (static_cast<double>(J) * kLog2Pi + f.lambda().log_det());
    out.log_evidence = detail::log_marginal_x(f, x) + log_norm + peak + std::log(wsum * cell);
    out.iterations = attempt;
    return out;
  }
  throw NumericError("quadrature E-step: posterior mass on the box boundary exceeds tolerance after expansion");
}

inline JointEStep e_step_monte_carlo(const PpcaFactors& f, const Vector& x, const Vector& x_next,
                                     const EStepConfig& cfg, std::uint64_t pair_index = 0) {
  const PpcaModel& model = f.model();
  const Index d = model.latent_dim(), J = model.dynamics.count();
  const Index n = cfg.samples;
  if (n < 2) throw DimensionError("monte-carlo E-step needs at least two samples");
  const Vector u = f.posterior_precision().solve_vec(model.loading.transpose() * (x - model.data_mean));
  const Matrix lz = f.posterior_cov_factor().llt().matrixL();
  const Matrix ll = f.lambda().llt().matrixL();
  const detail::NextImageDensity next_density(f, x_next);
  const detail::FeatureLayout layout(d, J);
  const Vector b2 = model.loading.transpose() * (x_next - model.data_mean) / model.noise_var;
  const Vector gamma_offset = f.gamma() * b2;

  CounterRng rng(cfg.seed, stream_id({0x6d63ull, pair_index}));
  Matrix zs(d, n), ls(J, n);
  std::vector<double> logw(static_cast<size_t>(n));
  double peak = -std::numeric_limits<double>::infinity();
  for (Index s = 0; s < n; ++s) {
    const Vector z = u + lz * rng.normal_vector(d);
    const Vector lam = cfg.freeze_coefficients ? Vector::Zero(J) : Vector(ll * rng.normal_vector(J));
    zs.col(s) = z;
    ls.col(s) = lam;
    const double lw = next_density(z + assemble_A(model.dynamics.basis, z) * lam);
    logw[static_cast<size_t>(s)] = lw;
    peak = std::max(peak, lw);
  }
  double wsum = 0.0, w2sum = 0.0;
  std::vector<double> w(static_cast<size_t>(n));
  for (Index s = 0; s < n; ++s) {
    w[static_cast<size_t>(s)] = std::exp(logw[static_cast<size_t>(s)] - peak);
    wsum += w[static_cast<size_t>(s)];
    w2sum += w[static_cast<size_t>(s)] * w[static_cast<size_t>(s)];
  }
  const double ess = wsum * wsum / w2sum;
  if (ess < cfg.min_ess_fraction * static_cast<double>(n))
    throw NumericError(detail::concat("monte-carlo E-step: effective sample size ", ess, " below ",
                                      cfg.min_ess_fraction * 100.0, "% of ", n, " samples"));
  Vector mean = Vector::Zero(layout.size), feat(layout.size);
  auto features_of = [&](Index s) {
    const Vector z = zs.col(s);
    const Vector lam = ls.col(s);
    const Vector gamma = gamma_offset + f.transfer() * (z + assemble_A(model.dynamics.basis, z) * lam);
    layout.features(z, lam, gamma, feat);
  };
  for (Index s = 0; s < n; ++s) {
    features_of(s);
    mean += (w[static_cast<size_t>(s)] / wsum) * feat;
  }
  Vector var = Vector::Zero(layout.size);
  for (Index s = 0; s < n; ++s) {
    features_of(s);
    const double wn = w[static_cast<size_t>(s)] / wsum;
    var += (wn * wn) * (feat - mean).cwiseAbs2();
  }
  JointEStep out;
  out.moments = layout.moments(mean, f.gamma());
  out.standard_errors = layout.raw(var.cwiseSqrt());
  out.effective_sample_size = ess;
  out.log_evidence = detail::log_marginal_x(f, x) + peak + std::log(wsum / static_cast<double>(n));
  return out;
}

/// Expectations under p(z_i, lambda, z_next | x_i, x_next) by the configured backend.
inline JointEStep e_step_joint(const PpcaFactors& f, const Vector& x, const Vector& x_next, const EStepConfig& cfg,
                               std::uint64_t pair_index = 0) {
  detail::require_dims(x.size() == f.model().image_dim() && x_next.size() == f.model().image_dim(),
                       "e_step_joint: image dimension does not match the model");
  switch (cfg.method) {
    case EStepMethod::quadrature: return e_step_quadrature(f, x, x_next, cfg);
    case EStepMethod::fixed_point: return e_step_fixed_point(f, x, x_next, cfg);
    case EStepMethod::monte_carlo: return e_step_monte_carlo(f, x, x_next, cfg, pair_index);
  }
  throw DimensionError("e_step_joint: unknown method");
}

inline JointEStep e_step_joint(const PpcaModel& model, const Vector& x, const Vector& x_next, const EStepConfig& cfg,
                               std::uint64_t pair_index = 0) {
  return e_step_joint(PpcaFactors(model, cfg.policy), x, x_next, cfg, pair_index);
}

/// Mean of all 2N frames.
inline Vector m_step_mu(const ImagePairDataset& data) {
  return (data.x_i.colwise().sum() + data.x_next.colwise().sum()).transpose() / (2.0 * static_cast<double>(data.count()));
}

/// W = (sum x_next_mu E[z_next]^T + x_mu E[z_i]^T)(sum E[z_next z_next^T] + E[z_i z_i^T])^{-1}.
inline Matrix m_step_W(const ImagePairDataset& data, const Vector& mu, const std::vector<LatentMoments>& moments,
                       const FactorPolicy& policy = {}) {
  detail::require_dims(static_cast<Index>(moments.size()) == data.count(), "m_step_W: one moment set per pair");
  const Index d = moments.front().latent_dim(), D = data.image_dim();
  Matrix cross = Matrix::Zero(D, d), gram = Matrix::Zero(d, d);
  for (Index i = 0; i < data.count(); ++i) {
    const auto& m = moments[static_cast<size_t>(i)];
    cross += (data.second(i) - mu) * m.ez_next.transpose() + (data.first(i) - mu) * m.ez_i.transpose();
    gram += m.ezz_next + m.ezz_i;
  }
  try {
    return SpdFactor(detail::symmetrize(gram), policy).solve(cross.transpose()).transpose();
  } catch (const NumericError& e) {
    throw NumericError(std::string("m_step_W: singular latent gram matrix (") + e.what() + ")", e.condition());
  }
}

/// sigma^2 = 1/(2ND) sum over both frames of E||x_mu - W z||^2, clamped at `floor`.
inline double m_step_sigma(const ImagePairDataset& data, const std::vector<LatentMoments>& moments, const Matrix& w,
                           const Vector& mu, double floor = 1e-12) {
  detail::require_dims(static_cast<Index>(moments.size()) == data.count(), "m_step_sigma: one moment set per pair");
  const Matrix wtw = w.transpose() * w;
  double acc = 0.0;
  for (Index i = 0; i < data.count(); ++i) {
    const auto& m = moments[static_cast<size_t>(i)];
    const Vector a = data.first(i) - mu, b = data.second(i) - mu;
    acc += (a - w * m.ez_i).squaredNorm() + (wtw * (m.ezz_i - m.ez_i * m.ez_i.transpose())).trace();
    acc += (b - w * m.ez_next).squaredNorm() + (wtw * (m.ezz_next - m.ez_next * m.ez_next.transpose())).trace();
  }
  const double s2 = acc / (2.0 * static_cast<double>(data.count()) * static_cast<double>(data.image_dim()));
  return std::max(s2, floor);
}

/// Posterior-mean reconstruction W E[z | x] + mu.
inline Vector reconstruct(const PpcaModel& model, const Vector& x) {
  return model.loading * posterior_z_given_x(model, x).mean() + model.data_mean;
}

/// Mean squared per-pixel error of posterior-mean reconstructions over both frames.
inline double reconstruction_mse(const PpcaModel& model, const ImagePairDataset& data) {
  double acc = 0.0;
  for (Index i = 0; i < data.count(); ++i) {
    acc += (reconstruct(model, data.first(i)) - data.first(i)).squaredNorm();
    acc += (reconstruct(model, data.second(i)) - data.second(i)).squaredNorm();
  }
  return acc / (2.0 * static_cast<double>(data.count() * data.image_dim()));
}

struct PpcaConfig {
  Index latent_dim = 2;
  Index initial_generators = 1;
  EStepConfig estep{};
  int max_iters = 200;
  double tolerance = 1e-8;
  bool orthogonalize = true;
  double variance_threshold = 0.99;
  bool estimate_lambda = false;
  bool estimate_omega = true;
  double noise_floor = 1e-12;
  double cov_floor = 1e-10;
  std::uint64_t seed = 0;
  unsigned threads = 1;
};

struct PpcaFitResult {
  PpcaModel model;
  /// Per iteration: the bound from the E-step at the old parameters plus the
  /// change of the expected complete-data log-likelihood produced by the
  /// M-step (the EM free energy at the updated parameters).
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

/// W from the top-d principal directions of the pooled centred frames scaled
/// to the PPCA maximum-likelihood lengths; sigma^2 is the mean discarded variance.
inline PpcaModel initial_ppca(const ImagePairDataset& data, Index d, Index J, std::uint64_t seed, double noise_floor) {
  const Index D = data.image_dim(), N = data.count();
  detail::require_dims(d >= 1 && d <= D, "initial_ppca: need 1 <= d <= D");
  const Vector mu = m_step_mu(data);
  Matrix centred(2 * N, D);
  centred.topRows(N) = data.x_i.rowwise() - mu.transpose();
  centred.bottomRows(N) = data.x_next.rowwise() - mu.transpose();
  Eigen::JacobiSVD<Matrix> svd(centred, Eigen::ComputeThinV);
  const Vector ev = svd.singularValues().array().square() / static_cast<double>(2 * N);
  double s2 = 0.0;
  for (Index k = d; k < D; ++k) s2 += (k < ev.size() ? ev(k) : 0.0);
  s2 = D > d ? s2 / static_cast<double>(D - d) : noise_floor;
  s2 = std::max(s2, noise_floor);
  Matrix w(D, d);
  for (Index k = 0; k < d; ++k) {
    const double e = k < ev.size() ? ev(k) : 0.0;
    Vector v = svd.matrixV().col(k);
    // deterministic sign: largest-magnitude entry positive
    Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    w.col(k) = v * std::sqrt(std::max(e - s2, 1e-6 * std::max(e, 1e-12)));
  }
  return {w, mu, s2, initial_dynamics(d, J, seed)};
}

inline std::vector<JointEStep> ppca_e_step_all(const PpcaModel& model, const ImagePairDataset& data,
                                               const EStepConfig& cfg, unsigned threads) {
  const PpcaFactors factors(model, cfg.policy);
  std::vector<JointEStep> out(static_cast<size_t>(data.count()));
  parallel_for(out.size(), threads, [&](size_t i) {
    const auto row = static_cast<Index>(i);
    out[i] = e_step_joint(factors, data.first(row), data.second(row), cfg, i);
  });
  return out;
}

inline double ppca_total_expected_ll(const PpcaModel& model, const ImagePairDataset& data,
                                     const std::vector<JointEStep>& estep, bool include_coeff_prior,
                                     const FactorPolicy& policy) {
  const SpdFactor omega(model.dynamics.trans_cov, policy), lambda(model.dynamics.coeff_prior_cov, policy);
  const Matrix g_flat = block_flatten(model.dynamics.basis);
  double total = 0.0;
  for (Index i = 0; i < data.count(); ++i)
    total += ppca_expected_ll(model, omega, lambda, g_flat, data.first(i), data.second(i),
                              estep[static_cast<size_t>(i)].moments, include_coeff_prior);
  return total;
}

inline PpcaFitResult fit_ppca(const ImagePairDataset& data, const PpcaConfig& config,
                              std::optional<PpcaModel> initial = std::nullopt) {
  PpcaFitResult result;
  result.model = initial ? *initial
                         : initial_ppca(data, config.latent_dim, config.initial_generators, config.seed,
                                        config.noise_floor);
  PpcaModel& model = result.model;
  model.validate();
  detail::require_dims(model.image_dim() == data.image_dim(), "fit_ppca: model and dataset image dims differ");
  const bool frozen = config.estep.freeze_coefficients;
  EStepConfig ecfg = config.estep;
  for (int iter = 0; iter < config.max_iters; ++iter) {
    ecfg.seed = stream_id({config.estep.seed, static_cast<std::uint64_t>(iter)});
    const auto estep = ppca_e_step_all(model, data, ecfg, config.threads);
    double bound = 0.0;
    for (const auto& e : estep) bound += e.log_evidence;
    const double q_old = ppca_total_expected_ll(model, data, estep, !frozen, ecfg.policy);

    std::vector<LatentMoments> moments;
    moments.reserve(estep.size());
    for (const auto& e : estep) moments.push_back(e.moments);
    model.loading = m_step_W(data, model.data_mean, moments, ecfg.policy);
    model.noise_var = m_step_sigma(data, moments, model.loading, model.data_mean, config.noise_floor);
    if (!frozen) {
      auto [basis, omega] = m_step_dynamics(moments, ecfg.policy);
      model.dynamics.basis = std::move(basis);
      if (config.estimate_omega) model.dynamics.trans_cov = clip_eigenvalues(omega, config.cov_floor);
      if (config.estimate_lambda)
        model.dynamics.coeff_prior_cov = clip_eigenvalues(update_Lambda(moments), config.cov_floor);
    } else if (config.estimate_omega) {
      model.dynamics.trans_cov = clip_eigenvalues(m_step_omega_given(moments, model.dynamics.basis), config.cov_floor);
    }
    const double q_new = ppca_total_expected_ll(model, data, estep, !frozen, ecfg.policy);
    const double objective = bound + q_new - q_old;
    if (!std::isfinite(objective)) throw NumericError("fit_ppca: objective is not finite");
    result.trace.push_back(objective);
    result.iterations = iter + 1;
    if (config.orthogonalize && !frozen)
      orthogonalize_model(model.dynamics, config.variance_threshold, config.cov_floor);
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
