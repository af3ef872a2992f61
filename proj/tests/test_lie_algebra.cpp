#include "support.hpp"

namespace lieflow {
namespace {

using testing::max_abs_diff;

Matrix planar() {
  Matrix j(2, 2);
  j << 0, -1, 1, 0;
  return j;
}

Matrix taylor_oracle(const Matrix& m) {
  Matrix sum = Matrix::Identity(m.rows(), m.cols()), term = sum;
  for (int k = 1; k <= 60; ++k) {
    term = term * m / k;
    sum += term;
  }
  return sum;
}

TEST(MatrixExp, ZeroIsIdentity) { EXPECT_EQ(matrix_exp(Matrix::Zero(3, 3)), Matrix::Identity(3, 3)); }

TEST(MatrixExp, QuarterTurn) {
  EXPECT_LT(max_abs_diff(matrix_exp(std::numbers::pi / 2 * planar()), planar()), 1e-14);
}

TEST(MatrixExp, Diagonal) {
  Matrix d = Matrix::Zero(2, 2);
  d(0, 0) = 0.7;
  d(1, 1) = -2.5;
  const Matrix e = matrix_exp(d);
  EXPECT_NEAR(e(0, 0), std::exp(0.7), 1e-14);
  EXPECT_NEAR(e(1, 1), std::exp(-2.5), 1e-15);
  EXPECT_EQ(e(0, 1), 0.0);
}

TEST(MatrixExp, MatchesTaylorOracle) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    CounterRng rng(s, 1);
    Matrix m = rng.normal_matrix(4, 4);
    m *= (0.5 + 1.5 * rng.uniform()) / m.norm();
    EXPECT_LT(max_abs_diff(matrix_exp(m), taylor_oracle(m)), 1e-10);
  }
}

TEST(MatrixExp, InverseProperty) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    CounterRng rng(s, 2);
    Matrix m = rng.normal_matrix(3, 3);
    m *= 5.0 * rng.uniform() / m.norm();
    EXPECT_LT(max_abs_diff(matrix_exp(m) * matrix_exp(-m), Matrix::Identity(3, 3)), 1e-9);
  }
}

TEST(MatrixExp, DerivativeAtZeroIsGenerator) {
  CounterRng rng(3, 3);
  const GeneratorBasis basis({rng.normal_matrix(3, 3)});
  const Vector z = rng.normal_vector(3);
  const double h = 1e-5;
  const Vector fd = (apply_exact(basis, Coefficients(Vector::Constant(1, h)), z) -
                     apply_exact(basis, Coefficients(Vector::Constant(1, -h)), z)) / (2 * h);
  const Vector gz = basis[0] * z;
  EXPECT_LT((fd - gz).norm() / gz.norm(), 1e-6);
}

TEST(MatrixExp, RejectsBadInput) {
  EXPECT_THROW(matrix_exp(Matrix::Zero(2, 3)), DimensionError);
  Matrix m = Matrix::Zero(2, 2);
  m(0, 0) = std::nan("");
  EXPECT_THROW(matrix_exp(m), NumericError);
}

TEST(Actions, FirstOrderBasics) {
  const Vector z = Vector::LinSpaced(3, 1, 3);
  const GeneratorBasis id({Matrix::Identity(3, 3)});
  EXPECT_EQ(apply_first_order(id, Coefficients(Vector::Zero(1)), z), z);
  EXPECT_LT(max_abs_diff(apply_first_order(id, Coefficients(Vector::Constant(1, 0.25)), z), 1.25 * z), 1e-15);
}

TEST(Actions, FirstOrderErrorIsQuadratic) {
  CounterRng rng(4, 0);
  const GeneratorBasis basis({rng.normal_matrix(3, 3) / 3.0, rng.normal_matrix(3, 3) / 3.0});
  const Vector z = rng.normal_vector(3);
  Vector lam = rng.normal_vector(2);
  lam *= 1e-3 / lam.norm();
  const Coefficients c(lam);
  EXPECT_LT((apply_first_order(basis, c, z) - apply_exact(basis, c, z)).norm(), 10 * lam.squaredNorm() * z.norm());
}

TEST(Actions, ExactRotation) {
  const GeneratorBasis basis({planar()});
  const Vector out = apply_exact(basis, Coefficients(Vector::Constant(1, std::numbers::pi)), Vector::Unit(2, 0));
  EXPECT_NEAR(out(0), -1.0, 1e-14);
  EXPECT_NEAR(out(1), 0.0, 1e-14);
  EXPECT_EQ(apply_exact(basis, Coefficients(Vector::Zero(1)), Vector::Unit(2, 1)), Vector::Unit(2, 1));
}

TEST(Actions, OneParameterSubgroupComposes) {
  CounterRng rng(5, 0);
  const GeneratorBasis basis({rng.normal_matrix(3, 3)});
  const Vector z = rng.normal_vector(3);
  const Vector two = apply_exact(basis, Coefficients(Vector::Constant(1, 0.3)),
                                 apply_exact(basis, Coefficients(Vector::Constant(1, -0.7)), z));
  EXPECT_LT(max_abs_diff(two, apply_exact(basis, Coefficients(Vector::Constant(1, -0.4)), z)), 1e-9);
}

TEST(AssembleA, Basics) {
  const Vector z = Vector::LinSpaced(3, -1, 2);
  EXPECT_EQ(assemble_A(GeneratorBasis({Matrix::Identity(3, 3)}), z), Matrix(z));
  CounterRng rng(6, 0);
  const GeneratorBasis basis({rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)});
  EXPECT_EQ(assemble_A(basis, Vector::Zero(3)), Matrix::Zero(3, 2));
}

TEST(AssembleA, ThreeWayConsistency) {
  CounterRng rng(7, 0);
  const GeneratorBasis basis({rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)});
  const Vector z = rng.normal_vector(3);
  const Matrix a = assemble_A(basis, z), flat = block_flatten(basis);
  for (int k = 0; k < 100; ++k) {
    const Vector lam = rng.normal_vector(2);
    const Vector direct = basis.combine(lam) * z;
    EXPECT_LT(max_abs_diff(a * lam, direct), 1e-12);
    EXPECT_LT(max_abs_diff(flat * kron(z, lam), direct), 1e-12);
    EXPECT_LT(max_abs_diff(apply_first_order(basis, Coefficients(lam), z) - z, direct), 1e-12);
  }
}

TEST(BlockFlatten, RoundTripAndSingleGenerator) {
  CounterRng rng(8, 0);
  const Matrix g = rng.normal_matrix(3, 3);
  EXPECT_EQ(block_flatten(GeneratorBasis({g})), g);
  const GeneratorBasis basis({rng.normal_matrix(3, 3), g, rng.normal_matrix(3, 3)});
  const GeneratorBasis back = block_unflatten(block_flatten(basis), 3, 3);
  for (Index j = 0; j < 3; ++j) EXPECT_EQ(back[j], basis[j]);
  EXPECT_THROW(block_unflatten(Matrix::Zero(3, 8), 3, 3), DimensionError);
}

TEST(Orthogonalize, OrthonormalBasisKeepsSpan) {
  Matrix a = Matrix::Zero(2, 2), b = Matrix::Zero(2, 2);
  a(0, 0) = 1;
  b(0, 1) = 1;
  const GeneratorBasis in({a, b});
  const GeneratorBasis out = orthogonalize(in, 1.0);
  EXPECT_EQ(out.count(), 2);
  EXPECT_LT(subspace_angle(out, in), 1e-12);
}

TEST(Orthogonalize, DuplicatePairCollapses) {
  CounterRng rng(9, 0);
  const Matrix g = rng.normal_matrix(3, 3);
  const GeneratorBasis out = orthogonalize(GeneratorBasis({g, g}), 0.99);
  EXPECT_EQ(out.count(), 1);
  EXPECT_NEAR(out[0].norm(), 1.0, 1e-12);
  EXPECT_LT(subspace_angle(out, GeneratorBasis({g})), 1e-8);
}

TEST(Orthogonalize, LinearDependenceDropsOneGenerator) {
  CounterRng rng(10, 0);
  const Matrix a = rng.normal_matrix(3, 3), b = rng.normal_matrix(3, 3);
  const GeneratorBasis in({a, b, 0.3 * a - 1.7 * b});
  const GeneratorBasis out = orthogonalize(in, 1.0 - 1e-9);
  EXPECT_EQ(out.count(), 2);
  EXPECT_LT(subspace_angle(out, in), 1e-8);
}

TEST(Orthogonalize, OutputIsOrthonormalAndIdempotent) {
  CounterRng rng(11, 0);
  const GeneratorBasis in({rng.normal_matrix(3, 3), rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)});
  const GeneratorBasis once = orthogonalize(in, 1.0);
  const Matrix v = vectorized_basis(once);
  EXPECT_LT(max_abs_diff(v.transpose() * v, Matrix::Identity(3, 3)), 1e-8);
  const GeneratorBasis twice = orthogonalize(once, 1.0);
  for (Index j = 0; j < 3; ++j) {
    const double d = std::min((twice[j] - once[j]).norm(), (twice[j] + once[j]).norm());
    EXPECT_LT(d, 1e-10);
  }
}

TEST(Orthogonalize, MixingReconstructsInput) {
  CounterRng rng(12, 0);
  const GeneratorBasis in({rng.normal_matrix(2, 2), rng.normal_matrix(2, 2)});
  const auto o = orthogonalize_with_mixing(in, 1.0);
  for (Index j = 0; j < 2; ++j) {
    Matrix rebuilt = Matrix::Zero(2, 2);
    for (Index k = 0; k < o.basis.count(); ++k) rebuilt += o.mixing(k, j) * o.basis[k];
    EXPECT_LT(max_abs_diff(rebuilt, in[j]), 1e-12);
  }
}

TEST(Orthogonalize, NeverIncreasesCountAndRejectsZero) {
  CounterRng rng(13, 0);
  for (int t = 0; t < 10; ++t) {
    std::vector<Matrix> gens;
    for (int j = 0; j < 1 + t % 4; ++j) gens.push_back(rng.normal_matrix(2, 2));
    const GeneratorBasis in(gens);
    EXPECT_LE(orthogonalize(in, 0.99).count(), in.count());
  }
  EXPECT_THROW(orthogonalize(GeneratorBasis({Matrix::Zero(2, 2)})), NumericError);
}

TEST(Coefficients, RejectNonFinite) {
  EXPECT_THROW(Coefficients(Vector::Constant(1, std::numeric_limits<double>::infinity())), NumericError);
}

}  // namespace
}  // namespace lieflow
