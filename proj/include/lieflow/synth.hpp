#pragma once

// Synthetic pair datasets with known generators, and the span-angle metric
// used to score recovered generators.

#include <complex>
#include <numbers>
#include <optional>
#include <string>
#include <utility>

#include "lieflow/ppca_joint_em.hpp"

namespace lieflow {

enum class GroupKind { rotation2d, cyclic_shift, contrast, latent_random };
enum class Embedding { linear, raster };

inline std::string to_string(GroupKind k) {
  switch (k) {
    case GroupKind::rotation2d: return "rotation2d";
    case GroupKind::cyclic_shift: return "cyclic_shift";
    case GroupKind::contrast: return "contrast";
    case GroupKind::latent_random: return "latent_random";
  }
  return "?";
}

inline GroupKind parse_group_kind(const std::string& s) {
  if (s == "rotation2d") return GroupKind::rotation2d;
  if (s == "cyclic_shift") return GroupKind::cyclic_shift;
  if (s == "contrast") return GroupKind::contrast;
  if (s == "latent_random") return GroupKind::latent_random;
  throw DimensionError("unknown group kind '" + s + "'");
}

struct SequenceSpec {
  GroupKind kind = GroupKind::rotation2d;
  Index latent_dim = 2;
  Index generator_count = 1;  // latent_random only
  Index image_height = 1;
  Index image_width = 16;
  double lambda_scale = 0.05;
  /// Additive noise on z_next for latent pairs; pixel noise for image pairs.
  double noise_std = 0.0;
  /// Transition noise on z_next when generating image pairs.
  double latent_noise_std = 0.0;
  Index pair_count = 500;
  std::uint64_t seed = 0;
  bool first_order = false;
  /// Use these coefficients for every pair instead of drawing them.
  std::optional<Vector> fixed_lambda;

  Index image_dim() const { return image_height * image_width; }

  void validate() const {
    if (!(lambda_scale >= 0.0) || !(noise_std >= 0.0) || !(latent_noise_std >= 0.0))
      throw DimensionError("SequenceSpec: scales must be non-negative");
    if (pair_count < 1) throw DimensionError("SequenceSpec: need at least one pair");
    if (latent_dim < 1) throw DimensionError("SequenceSpec: latent dim must be positive");
    if (kind == GroupKind::rotation2d && latent_dim != 2)
      throw DimensionError("SequenceSpec: rotation2d acts on d = 2");
    if (kind == GroupKind::latent_random && generator_count < 1)
      throw DimensionError("SequenceSpec: latent_random needs at least one generator");
  }
};

/// Real band-limited derivative on n samples: exp(t G) x shifts x by t samples
/// (circularly, towards higher indices) for signals without a Nyquist component.
inline Matrix shift_generator(Index n) {
  if (n < 2) throw DimensionError("shift_generator: need at least two samples");
  Matrix g(n, n);
  const double tau = 2.0 * std::numbers::pi;
  for (Index m = 0; m < n; ++m) {
    for (Index l = 0; l < n; ++l) {
      std::complex<double> acc = 0.0;
      for (Index k = 0; k < n; ++k) {
        Index kk = k <= n / 2 ? k : k - n;
        if (2 * kk == n) kk = 0;  // Nyquist has no real derivative
        const double omega = tau * static_cast<double>(kk) / static_cast<double>(n);
        acc += std::complex<double>(0.0, -omega) *
               std::exp(std::complex<double>(0.0, tau * static_cast<double>(k * (m - l)) / static_cast<double>(n)));
      }
      g(m, l) = acc.real() / static_cast<double>(n);
    }
  }
  return g;
}

/// D x d orthonormal Fourier basis: cos/sin pairs at frequencies 1..d/2 (d even).
inline Matrix fourier_loading(Index D, Index d) {
  if (d % 2 != 0 || d < 2 || d / 2 >= (D + 1) / 2)
    throw DimensionError(detail::concat("fourier_loading: need even d with d/2 < D/2, got D=", D, " d=", d));
  Matrix w(D, d);
  const double scale = std::sqrt(2.0 / static_cast<double>(D));
  for (Index f = 1; f <= d / 2; ++f)
    for (Index m = 0; m < D; ++m) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(f * m) / static_cast<double>(D);
      w(m, 2 * (f - 1)) = scale * std::cos(a);
      w(m, 2 * (f - 1) + 1) = scale * std::sin(a);
    }
  return w;
}

/// Unnormalized generators: the planar rotation [[0,-1],[1,0]], the unit shift
/// derivative, the identity, or seeded antisymmetric-plus-diagonal matrices.
inline GeneratorBasis canonical_generator(const SequenceSpec& spec) {
  spec.validate();
  const Index d = spec.latent_dim;
  switch (spec.kind) {
    case GroupKind::rotation2d: {
      Matrix g(2, 2);
      g << 0, -1, 1, 0;
      return GeneratorBasis({g});
    }
    case GroupKind::cyclic_shift: return GeneratorBasis({shift_generator(d)});
    case GroupKind::contrast: return GeneratorBasis({Matrix::Identity(d, d)});
    case GroupKind::latent_random: {
      CounterRng rng(spec.seed, stream_id({0x67656eull, static_cast<std::uint64_t>(d)}));
      std::vector<Matrix> gens;
      for (Index j = 0; j < spec.generator_count; ++j) {
        const Matrix a = rng.normal_matrix(d, d);
        Matrix g = 0.5 * (a - a.transpose());
        g.diagonal() += rng.normal_vector(d);
        gens.push_back(g);
      }
      return GeneratorBasis(std::move(gens));
    }
  }
  throw DimensionError("canonical_generator: unknown kind");
}

/// Canonical generators scaled to unit Frobenius norm.
inline GeneratorBasis true_generator(const SequenceSpec& spec) {
  std::vector<Matrix> gens = canonical_generator(spec).generators();
  for (auto& g : gens) g /= g.norm();
  return GeneratorBasis(std::move(gens));
}

struct GroundTruth {
  GeneratorBasis generators;
  Matrix lambda;      // N x J
  Matrix loading;     // D x d (image datasets only)
  Vector data_mean;   // D (image datasets only)
  Matrix latent_i;    // N x d
  Matrix latent_next; // N x d
};

namespace detail {

struct LatentDraw {
  Matrix z, z_next, lambda;
};

inline LatentDraw draw_latents(const SequenceSpec& spec, const GeneratorBasis& gens, double noise_std) {
  const Index N = spec.pair_count, d = gens.latent_dim(), J = gens.count();
  if (spec.fixed_lambda) require_dims(spec.fixed_lambda->size() == J, "SequenceSpec: fixed_lambda has the wrong length");
  LatentDraw out{Matrix(N, d), Matrix(N, d), Matrix(N, J)};
  for (Index i = 0; i < N; ++i) {
    CounterRng rng(spec.seed, stream_id({0x7061697273ull, static_cast<std::uint64_t>(i)}));
    const Vector z = rng.normal_vector(d);
    Vector lam = spec.lambda_scale * rng.normal_vector(J);
    if (spec.fixed_lambda) lam = *spec.fixed_lambda;
    const Vector eps = noise_std * rng.normal_vector(d);
    const Coefficients c(lam);
    const Vector moved = spec.first_order ? apply_first_order(gens, c, z) : apply_exact(gens, c, z);
    out.z.row(i) = z.transpose();
    out.z_next.row(i) = (moved + eps).transpose();
    out.lambda.row(i) = lam.transpose();
  }
  return out;
}

}  // namespace detail

/// z_i ~ N(0, I), lambda ~ N(0, lambda_scale^2 I), z_next = exp(sum_j lambda_j G^j) z_i
/// (or its first-order form) plus N(0, noise_std^2 I).
inline std::pair<PairDataset, GroundTruth> generate_latent_pairs(const SequenceSpec& spec) {
  spec.validate();
  GeneratorBasis gens = true_generator(spec);
  auto draw = detail::draw_latents(spec, gens, spec.noise_std);
  GroundTruth truth{gens, draw.lambda, Matrix(), Vector(), draw.z, draw.z_next};
  return {PairDataset(std::move(draw.z), std::move(draw.z_next)), std::move(truth)};
}

/// Image pairs x = W z + pixel noise. The linear embedding draws a seeded
/// orthonormal W for any group kind; the raster embedding renders a 1-D
/// signal of length D whose latent is its low-frequency Fourier coefficients,
/// so the cyclic shift acts on the latent as a block rotation.
inline std::pair<ImagePairDataset, GroundTruth> generate_image_pairs(const SequenceSpec& spec, Embedding embedding) {
  spec.validate();
  const Index D = spec.image_dim(), d = spec.latent_dim;
  if (D < d) throw DimensionError("generate_image_pairs: image dim must be at least the latent dim");
  Matrix w;
  GeneratorBasis gens;
  if (embedding == Embedding::linear) {
    if (spec.kind == GroupKind::cyclic_shift && d < 2) throw DimensionError("generate_image_pairs: bad latent dim");
    gens = true_generator(spec);
    CounterRng rng(spec.seed, stream_id({0x6c6f6164ull, static_cast<std::uint64_t>(D), static_cast<std::uint64_t>(d)}));
    Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(D, d));
    w = qr.householderQ() * Matrix::Identity(D, d);
  } else {
    if (spec.kind != GroupKind::cyclic_shift || spec.image_height != 1)
      throw DimensionError("generate_image_pairs: raster embedding renders 1-D cyclic shifts only");
    w = fourier_loading(D, d);
    const Matrix g = w.transpose() * shift_generator(D) * w;
    gens = GeneratorBasis({g / g.norm()});
  }
  auto draw = detail::draw_latents(spec, gens, spec.latent_noise_std);
  const Index N = spec.pair_count;
  Matrix x(N, D), xn(N, D);
  for (Index i = 0; i < N; ++i) {
    CounterRng rng(spec.seed, stream_id({0x706978656cull, static_cast<std::uint64_t>(i)}));
    x.row(i) = (w * draw.z.row(i).transpose() + spec.noise_std * rng.normal_vector(D)).transpose();
    xn.row(i) = (w * draw.z_next.row(i).transpose() + spec.noise_std * rng.normal_vector(D)).transpose();
  }
  GroundTruth truth{gens, draw.lambda, w, Vector::Zero(D), draw.z, draw.z_next};
  return {ImagePairDataset(std::move(x), std::move(xn), spec.image_height, spec.image_width), std::move(truth)};
}

/// Orthonormal basis of the column span (columns with singular value below
/// rel_tol of the largest are dropped).
inline Matrix orthonormal_span(const Matrix& a, double rel_tol = 1e-12) {
  Eigen::JacobiSVD<Matrix> svd(a, Eigen::ComputeThinU);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || !(s(0) > 0.0)) throw NumericError("orthonormal_span: zero matrix");
  Index r = 0;
  while (r < s.size() && s(r) > rel_tol * s(0)) ++r;
  return svd.matrixU().leftCols(r);
}

/// Largest principal angle between the column spans of a and b. When the
/// spans differ in dimension, the smaller is measured against the larger.
inline double principal_angle(const Matrix& a, const Matrix& b) {
  detail::require_dims(a.rows() == b.rows(), "principal_angle: ambient dimensions differ");
  Matrix qa = orthonormal_span(a), qb = orthonormal_span(b);
  if (qa.cols() > qb.cols()) std::swap(qa, qb);
  const Matrix residual = qa - qb * (qb.transpose() * qa);
  const double sine = Eigen::JacobiSVD<Matrix>(residual).singularValues()(0);
  if (sine < 0.7) return std::asin(sine);
  const double cosine = Eigen::JacobiSVD<Matrix>(qb.transpose() * qa).singularValues().minCoeff();
  return std::acos(std::clamp(cosine, 0.0, 1.0));
}

/// Largest principal angle between the spans of the vectorized generators.
inline double subspace_angle(const GeneratorBasis& est, const GeneratorBasis& truth) {
  detail::require_dims(est.latent_dim() == truth.latent_dim(), "subspace_angle: latent dims differ");
  return principal_angle(vectorized_basis(est), vectorized_basis(truth));
}

}  // namespace lieflow
