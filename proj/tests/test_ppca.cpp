#include "support.hpp"

namespace lieflow {
namespace {

using testing::max_abs_diff;
using testing::random_spd;

PpcaModel random_ppca(CounterRng& rng, Index D, Index d, Index J, double s2, double omega_scale) {
  std::vector<Matrix> gens;
  for (Index j = 0; j < J; ++j) gens.push_back(rng.normal_matrix(d, d));
  DynamicsModel dyn{GeneratorBasis(gens), omega_scale * random_spd(rng, d, 0.5), random_spd(rng, J, 0.5)};
  return {rng.normal_matrix(D, d), rng.normal_vector(D), s2, dyn};
}

// Draw a pair from the generative model itself.
std::pair<Vector, Vector> sample_pair(CounterRng& rng, const PpcaModel& m) {
  const Index d = m.latent_dim(), D = m.image_dim(), J = m.dynamics.count();
  const Vector z = rng.normal_vector(d);
  const Vector lam = SpdFactor(m.dynamics.coeff_prior_cov).llt().matrixL() * rng.normal_vector(J);
  const Vector zn = z + assemble_A(m.dynamics.basis, z) * lam +
                    SpdFactor(m.dynamics.trans_cov).llt().matrixL() * rng.normal_vector(d);
  const double s = std::sqrt(m.noise_var);
  return {m.loading * z + m.data_mean + s * rng.normal_vector(D), m.loading * zn + m.data_mean + s * rng.normal_vector(D)};
}

void expect_moments_near(const LatentMoments& a, const LatentMoments& b, double tol) {
  EXPECT_LT(max_abs_diff(a.ez_i, b.ez_i), tol);
  EXPECT_LT(max_abs_diff(a.ez_next, b.ez_next), tol);
  EXPECT_LT(max_abs_diff(a.ezz_i, b.ezz_i), tol);
  EXPECT_LT(max_abs_diff(a.ezz_next, b.ezz_next), tol);
  EXPECT_LT(max_abs_diff(a.ez_next_z, b.ez_next_z), tol);
  EXPECT_LT(max_abs_diff(a.elam, b.elam), tol);
  EXPECT_LT(max_abs_diff(a.elamlam, b.elamlam), tol);
  EXPECT_LT(max_abs_diff(a.e_dz_zkronlam, b.e_dz_zkronlam), tol);
  EXPECT_LT(max_abs_diff(a.e_zz_kron_lamlam, b.e_zz_kron_lamlam), tol);
  EXPECT_LT(max_abs_diff(a.e_lam_dz, b.e_lam_dz), tol);
  EXPECT_LT(max_abs_diff(a.e_dz_dz, b.e_dz_dz), tol);
}

TEST(PosteriorZ, ScalarFusion) {
  const PpcaModel m{Matrix::Ones(1, 1), Vector::Zero(1), 1.0, initial_dynamics(1, 1, 0)};
  const Gaussian q = posterior_z_given_x(m, Vector::Constant(1, 2.0));
  EXPECT_NEAR(q.mean()(0), 1.0, 1e-15);
  EXPECT_NEAR(q.cov()(0, 0), 0.5, 1e-15);
}

TEST(PosteriorZ, ZeroLoadingGivesPrior) {
  const PpcaModel m{Matrix::Zero(3, 2), Vector::Ones(3), 0.3, initial_dynamics(2, 1, 0)};
  const Gaussian q = posterior_z_given_x(m, Vector::LinSpaced(3, -1, 1));
  EXPECT_LT(max_abs_diff(q.mean(), Vector::Zero(2)), 1e-15);
  EXPECT_LT(max_abs_diff(q.cov(), Matrix::Identity(2, 2)), 1e-15);
}

TEST(PosteriorZ, MatchesQuadratureOracle) {
  CounterRng rng(1, 0);
  const PpcaModel m = random_ppca(rng, 4, 2, 1, 0.5, 1.0);
  const Vector x = rng.normal_vector(4);
  const Gaussian q = posterior_z_given_x(m, x);
  const Gaussian prior = Gaussian::standard(2);
  const Gaussian noise(Vector::Zero(4), m.noise_var * Matrix::Identity(4, 4));
  const oracles::LogDensity logf = [&](const Vector& z) {
    return log_density(prior, z) + log_density(noise, x - m.loading * z - m.data_mean);
  };
  const auto r = oracles::quadrature_moments(logf, testing::grid_for(q, 9.0, 128));
  EXPECT_LT(max_abs_diff(r.mean, q.mean()), 1e-6);
  EXPECT_LT(max_abs_diff(r.second_moment - r.mean * r.mean.transpose(), q.cov()), 1e-6);
}

TEST(PosteriorZ, AgreesWithGaussianPosterior) {
  CounterRng rng(2, 0);
  for (int t = 0; t < 10; ++t) {
    const PpcaModel m = random_ppca(rng, 5, 3, 1, 0.1 + rng.uniform(), 1.0);
    const Vector x = rng.normal_vector(5);
    const Gaussian a = posterior_z_given_x(m, x);
    const Gaussian b = posterior(Gaussian::standard(3), {m.loading, m.data_mean, m.noise_var * Matrix::Identity(5, 5)}, x);
    EXPECT_LT(max_abs_diff(a.mean(), b.mean()), 1e-12);
    EXPECT_LT(max_abs_diff(a.cov(), b.cov()), 1e-12);
  }
}

TEST(PosteriorZ, RejectsNonPositiveNoise) {
  const PpcaModel m{Matrix::Ones(1, 1), Vector::Zero(1), 0.0, initial_dynamics(1, 1, 0)};
  EXPECT_THROW(posterior_z_given_x(m, Vector::Zero(1)), NumericError);
}

TEST(PosteriorZnext, ZeroLoadingIsPureTransition) {
  CounterRng rng(3, 0);
  PpcaModel m = random_ppca(rng, 3, 2, 2, 0.2, 1.0);
  m.loading.setZero();
  const Vector z = rng.normal_vector(2), lam = rng.normal_vector(2);
  const Gaussian q = posterior_znext(m, rng.normal_vector(3), z, lam);
  EXPECT_LT(max_abs_diff(q.mean(), z + assemble_A(m.dynamics.basis, z) * lam), 1e-12);
  EXPECT_LT(max_abs_diff(q.cov(), m.dynamics.trans_cov), 1e-12);
}

TEST(PosteriorZnext, FlatTransitionGivesPpcaPosterior) {
  CounterRng rng(4, 0);
  PpcaModel m = random_ppca(rng, 4, 2, 1, 0.3, 1.0);
  m.dynamics.trans_cov = 1e9 * Matrix::Identity(2, 2);
  const Vector xn = rng.normal_vector(4);
  const Gaussian q = posterior_znext(m, xn, rng.normal_vector(2), rng.normal_vector(1));
  // Without a prior the observation alone gives N((W^T W)^-1 W^T x_mu, sigma^2 (W^T W)^-1).
  const Matrix wtw = m.loading.transpose() * m.loading;
  const Vector ref = wtw.ldlt().solve(m.loading.transpose() * (xn - m.data_mean));
  EXPECT_LT(max_abs_diff(q.mean(), ref), 1e-6);
  EXPECT_LT(max_abs_diff(q.cov(), m.noise_var * Matrix(wtw.inverse())), 1e-6);
}

TEST(PosteriorZnext, MatchesQuadratureOracle) {
  CounterRng rng(5, 0);
  const PpcaModel m = random_ppca(rng, 4, 2, 2, 0.4, 0.5);
  const Vector xn = rng.normal_vector(4), z = rng.normal_vector(2), lam = 0.3 * rng.normal_vector(2);
  const Gaussian q = posterior_znext(m, xn, z, lam);
  const Gaussian trans(z + assemble_A(m.dynamics.basis, z) * lam, m.dynamics.trans_cov);
  const Gaussian noise(Vector::Zero(4), m.noise_var * Matrix::Identity(4, 4));
  const oracles::LogDensity logf = [&](const Vector& zn) {
    return log_density(trans, zn) + log_density(noise, xn - m.loading * zn - m.data_mean);
  };
  const auto r = oracles::quadrature_moments(logf, testing::grid_for(q, 9.0, 128));
  EXPECT_LT(max_abs_diff(r.mean, q.mean()), 1e-6);
  EXPECT_LT(max_abs_diff(r.second_moment - r.mean * r.mean.transpose(), q.cov()), 1e-6);
}

// Brute-force posterior over (z_i, lambda, z_next) at d = J = 1 from the
// product of the model's factors, with every moment computed on a 3-D grid.
LatentMoments brute_force_moments(const PpcaModel& m, const Vector& x, const Vector& xn, double* log_evidence) {
  const Index D = m.image_dim();
  const double g = m.dynamics.basis[0](0, 0), om = m.dynamics.trans_cov(0, 0), la = m.dynamics.coeff_prior_cov(0, 0);
  const Gaussian noise(Vector::Zero(D), m.noise_var * Matrix::Identity(D, D));
  const oracles::LogDensity logf = [&](const Vector& p) {
    const double z = p(0), lam = p(1), zn = p(2);
    const double mean_next = z + g * z * lam;
    return -0.5 * (kLog2Pi + z * z) - 0.5 * (kLog2Pi + std::log(la) + lam * lam / la) -
           0.5 * (kLog2Pi + std::log(om) + (zn - mean_next) * (zn - mean_next) / om) +
           log_density(noise, x - m.loading.col(0) * z - m.data_mean) +
           log_density(noise, xn - m.loading.col(0) * zn - m.data_mean);
  };
  const oracles::Feature feat = [](const Vector& p) {
    const double z = p(0), lam = p(1), zn = p(2), dz = zn - z;
    Vector f(11);
    f << z, zn, z * z, zn * zn, zn * z, lam, lam * lam, dz * z * lam, z * z * lam * lam, lam * dz, dz * dz;
    return f;
  };
  // Box from the fixed-point approximation, generously widened.
  EStepConfig cfg;
  const auto mf = e_step_joint(m, x, xn, cfg);
  Vector c(3), h(3);
  c << mf.moments.ez_i(0), mf.moments.elam(0), mf.moments.ez_next(0);
  h << std::sqrt(mf.moments.ezz_i(0, 0) - c(0) * c(0)), std::sqrt(mf.moments.elamlam(0, 0) - c(1) * c(1)),
      std::sqrt(mf.moments.ezz_next(0, 0) - c(2) * c(2));
  const auto r = oracles::quadrature_moments(logf, oracles::GridSpec::box(c, 14.0 * h, 96), feat);
  if (log_evidence) *log_evidence = r.log_normalizer;
  const Vector& e = r.features;
  auto s = [](double v) { return Matrix::Constant(1, 1, v); };
  LatentMoments out;
  out.ez_i = s(e(0));
  out.ez_next = s(e(1));
  out.ezz_i = s(e(2));
  out.ezz_next = s(e(3));
  out.ez_next_z = s(e(4));
  out.elam = s(e(5));
  out.elamlam = s(e(6));
  out.e_dz_zkronlam = s(e(7));
  out.e_zz_kron_lamlam = s(e(8));
  out.e_lam_dz = s(e(9));
  out.e_dz_dz = s(e(10));
  return out;
}

TEST(JointEStep, QuadratureMatchesBruteForceJointDensity) {
  CounterRng rng(6, 0);
  for (int t = 0; t < 3; ++t) {
    const PpcaModel m = random_ppca(rng, 3, 1, 1, 0.05, 0.2);
    const auto [x, xn] = sample_pair(rng, m);
    EStepConfig cfg;
    cfg.method = EStepMethod::quadrature;
    cfg.grid_points = 64;
    const auto q = e_step_joint(m, x, xn, cfg);
    double logz = 0.0;
    const auto ref = brute_force_moments(m, x, xn, &logz);
    expect_moments_near(q.moments, ref, 1e-6);
    EXPECT_NEAR(q.log_evidence, logz, 1e-6);
  }
}

TEST(JointEStep, FrozenCoefficientsMatchGaussianPosterior) {
  CounterRng rng(7, 0);
  const PpcaModel m = random_ppca(rng, 4, 2, 1, 0.3, 0.5);
  const auto [x, xn] = sample_pair(rng, m);
  // (z_i, z_next) ~ N(0, [[I, I], [I, I + Omega]]); images are W z + mu + noise.
  Matrix cov(4, 4);
  cov << Matrix::Identity(2, 2), Matrix::Identity(2, 2), Matrix::Identity(2, 2),
      Matrix::Identity(2, 2) + m.dynamics.trans_cov;
  Matrix a = Matrix::Zero(8, 4);
  a.topLeftCorner(4, 2) = m.loading;
  a.bottomRightCorner(4, 2) = m.loading;
  Vector b(8);
  b << m.data_mean, m.data_mean;
  const Gaussian j = joint(Gaussian(Vector::Zero(4), cov), {a, b, m.noise_var * Matrix::Identity(8, 8)});
  Vector obs(8);
  obs << x, xn;
  const Gaussian post = condition_partitioned(j, {4, 5, 6, 7, 8, 9, 10, 11}, obs);
  const Matrix second = post.second_moment();
  for (auto method : {EStepMethod::fixed_point, EStepMethod::quadrature}) {
    EStepConfig cfg;
    cfg.method = method;
    cfg.freeze_coefficients = true;
    cfg.grid_points = 96;
    const auto r = e_step_joint(m, x, xn, cfg);
    const double tol = method == EStepMethod::fixed_point ? 1e-10 : 1e-6;
    EXPECT_LT(max_abs_diff(r.moments.ez_i, post.mean().head(2)), tol) << to_string(method);
    EXPECT_LT(max_abs_diff(r.moments.ez_next, post.mean().tail(2)), tol) << to_string(method);
    EXPECT_LT(max_abs_diff(r.moments.ezz_i, second.topLeftCorner(2, 2)), tol) << to_string(method);
    EXPECT_LT(max_abs_diff(r.moments.ezz_next, second.bottomRightCorner(2, 2)), tol) << to_string(method);
    EXPECT_LT(max_abs_diff(r.moments.ez_next_z, second.bottomLeftCorner(2, 2)), tol) << to_string(method);
    EXPECT_LT(r.moments.elamlam.norm(), 1e-15);
  }
}

TEST(JointEStep, ExactObservationLimit) {
  PpcaModel m{Matrix::Identity(2, 2), Vector::Zero(2), 1e-10,
              {GeneratorBasis({(Matrix(2, 2) << 0, -1, 1, 0).finished()}), 1e-2 * Matrix::Identity(2, 2),
               Matrix::Identity(1, 1)}};
  const Vector x = Vector::LinSpaced(2, 0.5, 1.5);
  const auto r = e_step_joint(m, x, x, EStepConfig{});
  EXPECT_LT(max_abs_diff(r.moments.ez_i, x), 1e-6);
  EXPECT_LT(max_abs_diff(r.moments.ez_next, x), 1e-6);
  EXPECT_LT(std::abs(r.moments.elam(0)), 1e-6);
}

TEST(JointEStep, FixedPointAndMonteCarloAgreeWithQuadrature) {
  CounterRng rng(8, 0);
  const PpcaModel m = random_ppca(rng, 3, 1, 1, 1e-4, 0.1);
  const auto [x, xn] = sample_pair(rng, m);
  EStepConfig q;
  q.method = EStepMethod::quadrature;
  const auto ref = e_step_joint(m, x, xn, q);
  EStepConfig fp;
  expect_moments_near(e_step_joint(m, x, xn, fp).moments, ref.moments, 1e-3);
  EStepConfig mc;
  mc.method = EStepMethod::monte_carlo;
  mc.samples = 200000;
  mc.seed = 3;
  const auto r = e_step_joint(m, x, xn, mc);
  ASSERT_TRUE(r.standard_errors.has_value());
  const auto& se = *r.standard_errors;
  EXPECT_LE(std::abs(r.moments.ez_i(0) - ref.moments.ez_i(0)), 3 * se.ez_i(0));
  EXPECT_LE(std::abs(r.moments.elam(0) - ref.moments.elam(0)), 3 * se.elam(0));
  EXPECT_LE(std::abs(r.moments.ezz_i(0, 0) - ref.moments.ezz_i(0, 0)), 3 * se.ezz_i(0, 0));
  EXPECT_LE(std::abs(r.moments.elamlam(0, 0) - ref.moments.elamlam(0, 0)), 3 * se.elamlam(0, 0));
}

TEST(JointEStep, MomentsSatisfyPsdInvariants) {
  CounterRng rng(9, 0);
  const PpcaModel m = random_ppca(rng, 3, 1, 1, 0.05, 0.3);
  const auto [x, xn] = sample_pair(rng, m);
  for (auto method : {EStepMethod::fixed_point, EStepMethod::quadrature, EStepMethod::monte_carlo}) {
    EStepConfig cfg;
    cfg.method = method;
    cfg.samples = 20000;
    EXPECT_GE(e_step_joint(m, x, xn, cfg).moments.psd_violation(), -1e-12) << to_string(method);
  }
}

TEST(JointEStep, QuadratureRejectsLargeDimensions) {
  CounterRng rng(10, 0);
  const PpcaModel m = random_ppca(rng, 6, 3, 1, 0.1, 1.0);
  EStepConfig cfg;
  cfg.method = EStepMethod::quadrature;
  EXPECT_THROW(e_step_joint(m, rng.normal_vector(6), rng.normal_vector(6), cfg), DimensionError);
}

TEST(JointEStep, MonteCarloReportsDegenerateWeights) {
  CounterRng rng(11, 0);
  PpcaModel m = random_ppca(rng, 3, 1, 1, 1e-8, 1e-8);
  EStepConfig cfg;
  cfg.method = EStepMethod::monte_carlo;
  cfg.samples = 1000;
  EXPECT_THROW(e_step_joint(m, rng.normal_vector(3), 10 * rng.normal_vector(3), cfg), NumericError);
}

TEST(MStepMu, Examples) {
  const Vector a = Vector::LinSpaced(3, 1, 3);
  EXPECT_LT(max_abs_diff(m_step_mu(ImagePairDataset(a.transpose(), a.transpose())), a), 1e-15);
  EXPECT_LT(m_step_mu(ImagePairDataset(a.transpose(), -a.transpose())).norm(), 1e-15);
  CounterRng rng(12, 0);
  const Matrix x = rng.normal_matrix(7, 4), y = rng.normal_matrix(7, 4);
  Vector sum = Vector::Zero(4);
  for (Index i = 0; i < 7; ++i) sum += x.row(i).transpose() + y.row(i).transpose();
  EXPECT_LT(max_abs_diff(m_step_mu(ImagePairDataset(x, y)), sum / 14.0), 1e-12);
}

std::vector<LatentMoments> point_moments(const Matrix& z, const Matrix& zn) {
  std::vector<LatentMoments> out;
  for (Index i = 0; i < z.rows(); ++i)
    out.push_back(LatentMoments::from_point(z.row(i).transpose(), zn.row(i).transpose(),
                                            {Vector::Zero(1), Matrix::Identity(1, 1)}));
  return out;
}

TEST(MStepW, IdentityLimit) {
  CounterRng rng(13, 0);
  const Matrix x = rng.normal_matrix(10, 3), y = rng.normal_matrix(10, 3);
  const ImagePairDataset data(x, y);
  const Vector mu = Vector::Zero(3);
  EXPECT_LT(max_abs_diff(m_step_W(data, mu, point_moments(x, y)), Matrix::Identity(3, 3)), 1e-12);
}

TEST(MStepW, UninformativeMomentsGiveZero) {
  CounterRng rng(14, 0);
  const ImagePairDataset data(rng.normal_matrix(5, 3), rng.normal_matrix(5, 3));
  LatentMoments m = LatentMoments::from_point(Vector::Zero(2), Vector::Zero(2), {Vector::Zero(1), Matrix::Identity(1, 1)});
  m.ezz_i = m.ezz_next = Matrix::Identity(2, 2);
  EXPECT_LT(m_step_W(data, Vector::Zero(3), std::vector<LatentMoments>(5, m)).norm(), 1e-15);
}

TEST(MStepSigma, Examples) {
  CounterRng rng(15, 0);
  const Matrix w = rng.normal_matrix(4, 2);
  const Matrix z = rng.normal_matrix(6, 2), zn = rng.normal_matrix(6, 2);
  const ImagePairDataset exact(z * w.transpose(), zn * w.transpose());
  EXPECT_EQ(m_step_sigma(exact, point_moments(z, zn), w, Vector::Zero(4)), 1e-12);

  const ImagePairDataset data(rng.normal_matrix(6, 4), rng.normal_matrix(6, 4));
  const Vector mu = m_step_mu(data);
  Matrix stacked(12, 4);
  stacked << data.x_i, data.x_next;
  const double var = (stacked.rowwise() - mu.transpose()).squaredNorm() / 48.0;
  EXPECT_NEAR(m_step_sigma(data, point_moments(z, zn), Matrix::Zero(4, 2), mu), var, 1e-14);
}

TEST(MStepDynamics, DeltaMomentsReduceToLatentMSteps) {
  CounterRng rng(16, 0);
  const Matrix z = rng.normal_matrix(30, 2), zn = rng.normal_matrix(30, 2);
  const DynamicsModel model{GeneratorBasis({rng.normal_matrix(2, 2), rng.normal_matrix(2, 2)}), Matrix::Identity(2, 2),
                            Matrix::Identity(2, 2)};
  const PairDataset data(z, zn);
  const auto posts = e_step_all(model, data);
  std::vector<LatentMoments> moments;
  for (Index i = 0; i < 30; ++i) moments.push_back(LatentMoments::from_point(data.first(i), data.second(i), posts[static_cast<size_t>(i)]));
  const auto [g, omega] = m_step_dynamics(moments);
  const GeneratorBasis g_ref = m_step_G(data, posts);
  EXPECT_LT(max_abs_diff(block_flatten(g), block_flatten(g_ref)), 1e-10);
  EXPECT_LT(max_abs_diff(omega, m_step_Omega(data, posts, g_ref)), 1e-10);
}

TEST(MStepDynamics, ZeroCoefficientMomentsGiveZero) {
  CounterRng rng(17, 0);
  const Matrix z = rng.normal_matrix(10, 2), zn = rng.normal_matrix(10, 2);
  std::vector<LatentMoments> moments;
  for (Index i = 0; i < 10; ++i)
    moments.push_back(LatentMoments::from_point(z.row(i).transpose(), zn.row(i).transpose(),
                                                {Vector::Zero(1), Matrix::Identity(1, 1)}));
  EXPECT_LT(block_flatten(m_step_dynamics(moments).first).norm(), 1e-15);
}

// PPCA EM on stacked pairs sharing one latent, written out directly.
struct TiedPpca {
  Matrix w;
  double s2;
  void step(const ImagePairDataset& data, const Vector& mu) {
    const Index d = w.cols(), D = w.rows(), N = data.count();
    const Matrix m = 2.0 * w.transpose() * w + s2 * Matrix::Identity(d, d);
    const Matrix minv = m.inverse();
    Matrix cross = Matrix::Zero(D, d), gram = Matrix::Zero(d, d);
    std::vector<Vector> ez;
    std::vector<Matrix> ezz;
    for (Index i = 0; i < N; ++i) {
      const Vector s = data.first(i) + data.second(i) - 2.0 * mu;
      const Vector e = minv * w.transpose() * s;
      ez.push_back(e);
      ezz.push_back(s2 * minv + e * e.transpose());
      cross += s * e.transpose();
      gram += 2.0 * ezz.back();
    }
    const Matrix w_new = cross * gram.inverse();
    double acc = 0.0;
    for (Index i = 0; i < N; ++i) {
      const Vector a = data.first(i) - mu, b = data.second(i) - mu;
      acc += a.squaredNorm() + b.squaredNorm() - 2.0 * (a + b).dot(w_new * ez[static_cast<size_t>(i)]) +
             2.0 * (w_new.transpose() * w_new * ezz[static_cast<size_t>(i)]).trace();
    }
    w = w_new;
    s2 = acc / (2.0 * N * D);
  }
};

TEST(PpcaFit, FrozenCoefficientsAndTinyNoiseReduceToTiedPpca) {
  SequenceSpec spec;
  spec.pair_count = 60;
  spec.image_width = 6;
  spec.noise_std = 0.1;
  const auto [data, truth] = generate_image_pairs(spec, Embedding::linear);
  PpcaConfig cfg;
  cfg.max_iters = 15;
  cfg.tolerance = 0;
  cfg.estep.freeze_coefficients = true;
  cfg.estimate_omega = false;
  PpcaModel init = initial_ppca(data, 2, 1, 0, 1e-12);
  init.dynamics.trans_cov = 1e-9 * Matrix::Identity(2, 2);
  const auto fit = fit_ppca(data, cfg, init);
  TiedPpca ref{init.loading, init.noise_var};
  for (int it = 0; it < cfg.max_iters; ++it) ref.step(data, init.data_mean);
  EXPECT_LT(max_abs_diff(fit.model.loading, ref.w), 1e-6);
  EXPECT_NEAR(fit.model.noise_var, ref.s2, 1e-6);
}

TEST(PpcaFit, RecoversNoiseVariance) {
  SequenceSpec spec;
  spec.pair_count = 2000;
  spec.image_width = 8;
  spec.noise_std = 0.05;
  spec.lambda_scale = 1e-12;
  const auto [data, truth] = generate_image_pairs(spec, Embedding::linear);
  PpcaConfig cfg;
  cfg.estep.freeze_coefficients = true;
  cfg.max_iters = 200;
  const auto fit = fit_ppca(data, cfg);
  EXPECT_NEAR(fit.model.noise_var, 0.0025, 0.1 * 0.0025);
}

TEST(PpcaFit, IdentityTransitionsLearnNoMotion) {
  SequenceSpec spec;
  spec.pair_count = 200;
  spec.image_width = 6;
  spec.noise_std = 0.0;
  spec.lambda_scale = 1e-12;
  auto [data, truth] = generate_image_pairs(spec, Embedding::linear);
  CounterRng rng(18, 0);
  data.x_i += 0.01 * rng.normal_matrix(data.count(), 6);
  data.x_next = data.x_i;
  PpcaConfig cfg;
  cfg.orthogonalize = false;
  cfg.max_iters = 300;
  const auto fit = fit_ppca(data, cfg);
  EXPECT_LT(block_flatten(fit.model.dynamics.basis).norm(), 1e-3);
  EXPECT_LT(principal_angle(fit.model.loading, truth.loading), 1e-2);
}

TEST(PpcaFit, NoiseFreeStaticPairsDriveNoiseToFloorMonotonically) {
  SequenceSpec spec;
  spec.pair_count = 100;
  spec.image_width = 5;
  spec.noise_std = 0.0;
  spec.lambda_scale = 1e-12;
  auto [data, truth] = generate_image_pairs(spec, Embedding::linear);
  data.x_next = data.x_i;
  PpcaConfig cfg;
  cfg.max_iters = 100;
  cfg.tolerance = 0;
  cfg.orthogonalize = false;
  const auto fit = fit_ppca(data, cfg);
  EXPECT_LT(fit.model.noise_var, 1e-10);
  for (size_t i = 1; i < fit.trace.size(); ++i)
    EXPECT_GE(fit.trace[i] - fit.trace[i - 1], -1e-6 * std::abs(fit.trace[i - 1])) << i;
}

TEST(PpcaFit, QuadratureEStepIsMonotone) {
  CounterRng rng(19, 0);
  const PpcaModel truth = random_ppca(rng, 3, 1, 1, 0.01, 0.05);
  Matrix x(40, 3), xn(40, 3);
  for (Index i = 0; i < 40; ++i) {
    const auto [a, b] = sample_pair(rng, truth);
    x.row(i) = a.transpose();
    xn.row(i) = b.transpose();
  }
  PpcaConfig cfg;
  cfg.latent_dim = 1;
  cfg.estep.method = EStepMethod::quadrature;
  cfg.estep.grid_points = 32;
  cfg.orthogonalize = false;
  cfg.max_iters = 12;
  cfg.tolerance = 0;
  const auto fit = fit_ppca(ImagePairDataset(x, xn), cfg);
  for (size_t i = 1; i < fit.trace.size(); ++i)
    EXPECT_GE(fit.trace[i] - fit.trace[i - 1], -1e-8 * std::abs(fit.trace[i - 1])) << i;
}

TEST(PpcaFit, DeterministicAcrossThreadCounts) {
  SequenceSpec spec;
  spec.pair_count = 40;
  spec.image_width = 6;
  const auto [data, truth] = generate_image_pairs(spec, Embedding::linear);
  PpcaConfig cfg;
  cfg.max_iters = 5;
  cfg.estep.method = EStepMethod::monte_carlo;
  cfg.estep.samples = 2000;
  cfg.threads = 1;
  const auto a = fit_ppca(data, cfg);
  cfg.threads = 3;
  const auto b = fit_ppca(data, cfg);
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(a.model.loading, b.model.loading);
}

}  // namespace
}  // namespace lieflow
