#pragma once

// Generator-basis arithmetic: matrix exponential, group actions on latent
// vectors, the coefficient design matrix, Kronecker block layout, and the
// orthogonalization of a generator set.

#include <cmath>
#include <vector>

#include "lieflow/core.hpp"

namespace lieflow {

/// Ordered set of J square d x d generators.
class GeneratorBasis {
 public:
  GeneratorBasis() = default;
  explicit GeneratorBasis(std::vector<Matrix> generators) : generators_(std::move(generators)) {
    if (generators_.empty()) throw DimensionError("GeneratorBasis: at least one generator is required");
    const Index d = generators_.front().rows();
    for (const Matrix& g : generators_)
      detail::require_dims(g.rows() == d && g.cols() == d,
                           detail::concat("GeneratorBasis: generators must all be ", d, "x", d));
  }

  Index latent_dim() const { return generators_.empty() ? 0 : generators_.front().rows(); }
  Index count() const { return static_cast<Index>(generators_.size()); }
  const Matrix& operator[](Index j) const { return generators_[static_cast<size_t>(j)]; }
  const std::vector<Matrix>& generators() const { return generators_; }

  /// sum_j lambda_j G^j
  Matrix combine(const Vector& lambda) const {
    detail::require_dims(lambda.size() == count(),
                         detail::concat("GeneratorBasis: expected ", count(), " coefficients, got ", lambda.size()));
    Matrix m = Matrix::Zero(latent_dim(), latent_dim());
    for (Index j = 0; j < count(); ++j) m += lambda(j) * generators_[static_cast<size_t>(j)];
    return m;
  }

  /// Frobenius norm of the stacked generators.
  double norm() const {
    double s = 0.0;
    for (const Matrix& g : generators_) s += g.squaredNorm();
    return std::sqrt(s);
  }

 private:
  std::vector<Matrix> generators_;
};

/// Combination coefficients lambda for one transition.
struct Coefficients {
  Vector lambda;

  Coefficients() = default;
  explicit Coefficients(Vector l) : lambda(std::move(l)) {
    if (!lambda.allFinite()) throw NumericError("Coefficients: non-finite entries");
  }
};

/// e^m by scaling and squaring: m is scaled by 2^-s so that its Frobenius
/// norm is at most 0.5, a Taylor series of order >= 13 is summed until the
/// next term falls below the tolerance budget, and the result squared s times.
inline Matrix matrix_exp(const Matrix& m, double tol = 1e-12) {
  if (m.rows() != m.cols()) throw DimensionError(detail::concat("matrix_exp: matrix is ", m.rows(), "x", m.cols()));
  if (!m.allFinite()) throw NumericError("matrix_exp: non-finite entries");
  const Index n = m.rows();
  const double norm = m.norm();
  int squarings = 0;
  if (norm > 0.5) squarings = static_cast<int>(std::ceil(std::log2(norm / 0.5)));
  const Matrix a = std::ldexp(1.0, -squarings) * m;
  // Squaring amplifies the relative series error by about 2^s.
  const double term_tol = 0.1 * tol * std::ldexp(1.0, -squarings);
  Matrix sum = Matrix::Identity(n, n);
  Matrix term = Matrix::Identity(n, n);
  for (int k = 1; k <= 60; ++k) {
    term = (term * a) / static_cast<double>(k);
    sum += term;
    if (k >= 13 && term.norm() <= term_tol) break;
  }
  for (int i = 0; i < squarings; ++i) sum = sum * sum;
  return sum;
}

/// z + sum_j lambda_j G^j z
inline Vector apply_first_order(const GeneratorBasis& basis, const Coefficients& coeffs, const Vector& z) {
  detail::require_dims(z.size() == basis.latent_dim(),
                       detail::concat("apply_first_order: z has ", z.size(), " entries, basis acts on ",
                                      basis.latent_dim()));
  return z + basis.combine(coeffs.lambda) * z;
}

/// exp(sum_j lambda_j G^j) z
inline Vector apply_exact(const GeneratorBasis& basis, const Coefficients& coeffs, const Vector& z,
                          double tol = 1e-12) {
  detail::require_dims(z.size() == basis.latent_dim(),
                       detail::concat("apply_exact: z has ", z.size(), " entries, basis acts on ",
                                      basis.latent_dim()));
  return matrix_exp(basis.combine(coeffs.lambda), tol) * z;
}

/// d x J matrix with column m equal to G^m z, so that A lambda = sum_j lambda_j G^j z.
inline Matrix assemble_A(const GeneratorBasis& basis, const Vector& z) {
  detail::require_dims(z.size() == basis.latent_dim(),
                       detail::concat("assemble_A: z has ", z.size(), " entries, basis acts on ",
                                      basis.latent_dim()));
  Matrix a(basis.latent_dim(), basis.count());
  for (Index j = 0; j < basis.count(); ++j) a.col(j) = basis[j] * z;
  return a;
}

/// d x (dJ) block matrix G_flat with G_flat (z kron lambda) = sum_j lambda_j G^j z.
/// Column k*J + j holds column k of G^j.
inline Matrix block_flatten(const GeneratorBasis& basis) {
  const Index d = basis.latent_dim(), J = basis.count();
  Matrix flat(d, d * J);
  for (Index k = 0; k < d; ++k)
    for (Index j = 0; j < J; ++j) flat.col(k * J + j) = basis[j].col(k);
  return flat;
}

inline GeneratorBasis block_unflatten(const Matrix& flat, Index d, Index J) {
  if (d < 1 || J < 1 || flat.rows() != d || flat.cols() != d * J)
    throw DimensionError(detail::concat("block_unflatten: expected ", d, "x", d * J, " matrix, got ", flat.rows(),
                                        "x", flat.cols()));
  std::vector<Matrix> gens(static_cast<size_t>(J), Matrix(d, d));
  for (Index k = 0; k < d; ++k)
    for (Index j = 0; j < J; ++j) gens[static_cast<size_t>(j)].col(k) = flat.col(k * J + j);
  return GeneratorBasis(std::move(gens));
}

/// Kronecker product of two vectors, index k*b.size() + j = a_k b_j.
inline Vector kron(const Vector& a, const Vector& b) {
  Vector out(a.size() * b.size());
  for (Index k = 0; k < a.size(); ++k) out.segment(k * b.size(), b.size()) = a(k) * b;
  return out;
}

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Index i = 0; i < a.rows(); ++i)
    for (Index j = 0; j < a.cols(); ++j) out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

/// Row-major vectorization of a square generator.
inline Vector vectorize(const Matrix& g) {
  Vector v(g.size());
  for (Index r = 0; r < g.rows(); ++r)
    for (Index c = 0; c < g.cols(); ++c) v(r * g.cols() + c) = g(r, c);
  return v;
}

inline Matrix unvectorize(const Vector& v, Index d) {
  Matrix g(d, d);
  for (Index r = 0; r < d; ++r)
    for (Index c = 0; c < d; ++c) g(r, c) = v(r * d + c);
  return g;
}

/// d^2 x J matrix of row-major vectorized generators.
inline Matrix vectorized_basis(const GeneratorBasis& basis) {
  const Index d = basis.latent_dim();
  Matrix v(d * d, basis.count());
  for (Index j = 0; j < basis.count(); ++j) v.col(j) = vectorize(basis[j]);
  return v;
}

/// Result of orthogonalization: the new basis and the coordinates of the old
/// generators in it (old G^j ~= sum_k mixing(k, j) new G^k).
struct OrthogonalizedBasis {
  GeneratorBasis basis;
  Matrix mixing;
  Vector singular_values;
};

/// Principal components of the vectorized generators (uncentered, so the span
/// is preserved). Keeps the fewest components whose squared singular values
/// reach variance_threshold of the total. Output generators are orthonormal
/// in the Frobenius inner product, ordered by decreasing singular value, and
/// signed so that the first non-negligible entry of each is positive.
inline OrthogonalizedBasis orthogonalize_with_mixing(const GeneratorBasis& basis, double variance_threshold = 0.99) {
  if (!(variance_threshold > 0.0 && variance_threshold <= 1.0))
    throw DimensionError("orthogonalize: variance_threshold must lie in (0, 1]");
  const Index d = basis.latent_dim();
  Matrix v = vectorized_basis(basis);
  if (!v.allFinite()) throw NumericError("orthogonalize: non-finite generators");
  if (v.norm() == 0.0) throw NumericError("orthogonalize: all generators are zero");
  Eigen::JacobiSVD<Matrix> svd(v, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  Vector cumulative(s.size());
  double acc = 0.0;
  for (Index i = 0; i < s.size(); ++i) {
    acc += s(i) * s(i);
    cumulative(i) = acc;
  }
  const double total = cumulative(s.size() - 1);
  Index keep = s.size();
  for (Index i = 0; i < s.size(); ++i) {
    if (cumulative(i) >= variance_threshold * total) {
      keep = i + 1;
      break;
    }
  }
  // An orthonormal input has a degenerate spectrum, so the SVD would return an
  // arbitrary rotation of it; keep the generators themselves instead.
  const bool orthonormal =
      keep == basis.count() && (v.transpose() * v - Matrix::Identity(keep, keep)).cwiseAbs().maxCoeff() < 1e-12;
  std::vector<Matrix> gens;
  Matrix mixing = Matrix::Zero(keep, basis.count());
  for (Index k = 0; k < keep; ++k) {
    Vector u = orthonormal ? Vector(v.col(k)) : Vector(svd.matrixU().col(k));
    const double cutoff = 1e-10 * u.cwiseAbs().maxCoeff();
    double sign = 1.0;
    for (Index i = 0; i < u.size(); ++i) {
      if (std::abs(u(i)) > cutoff) {
        sign = u(i) > 0.0 ? 1.0 : -1.0;
        break;
      }
    }
    u *= sign;
    gens.push_back(unvectorize(u, d));
    if (orthonormal)
      mixing(k, k) = sign;
    else
      mixing.row(k) = sign * s(k) * svd.matrixV().col(k).transpose();
  }
  return {GeneratorBasis(std::move(gens)), mixing, s};
}

inline GeneratorBasis orthogonalize(const GeneratorBasis& basis, double variance_threshold = 0.99) {
  return orthogonalize_with_mixing(basis, variance_threshold).basis;
}

}  // namespace lieflow
