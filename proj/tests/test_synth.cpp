#include "support.hpp"

namespace lieflow {
namespace {

using testing::max_abs_diff;

TEST(TrueGenerator, RotationExponentiatesToRotation) {
  SequenceSpec spec;
  const GeneratorBasis g = canonical_generator(spec);
  const double theta = 0.7;
  Matrix r(2, 2);
  r << std::cos(theta), -std::sin(theta), std::sin(theta), std::cos(theta);
  EXPECT_LT(max_abs_diff(matrix_exp(theta * g[0]), r), 1e-14);
  EXPECT_NEAR(true_generator(spec)[0].norm(), 1.0, 1e-15);
}

TEST(TrueGenerator, ContrastDoublesAtLogTwo) {
  SequenceSpec spec;
  spec.kind = GroupKind::contrast;
  spec.latent_dim = 3;
  EXPECT_LT(max_abs_diff(matrix_exp(std::log(2.0) * canonical_generator(spec)[0]), 2.0 * Matrix::Identity(3, 3)), 1e-14);
}

Matrix cyclic_permutation(Index n) {
  Matrix p = Matrix::Zero(n, n);
  for (Index m = 0; m < n; ++m) p((m + 1) % n, m) = 1.0;
  return p;
}

TEST(TrueGenerator, CyclicShiftOfOddLengthIsPermutation) {
  SequenceSpec spec;
  spec.kind = GroupKind::cyclic_shift;
  spec.latent_dim = 5;
  EXPECT_LT(max_abs_diff(matrix_exp(canonical_generator(spec)[0]), cyclic_permutation(5)), 1e-6);
}

TEST(TrueGenerator, CyclicShiftOfEvenLengthShiftsNyquistFreeSignals) {
  // Without the alternating component a unit step is an exact cyclic shift.
  const Index n = 4;
  const Matrix e = matrix_exp(shift_generator(n));
  Vector nyquist(n);
  for (Index m = 0; m < n; ++m) nyquist(m) = (m % 2 == 0) ? 1.0 : -1.0;
  CounterRng rng(1, 0);
  for (int t = 0; t < 5; ++t) {
    Vector x = rng.normal_vector(n);
    x -= nyquist * nyquist.dot(x) / nyquist.squaredNorm();
    EXPECT_LT(max_abs_diff(e * x, cyclic_permutation(n) * x), 1e-12);
  }
}

TEST(TrueGenerator, LatentRandomIsNormalizedAndSeeded) {
  SequenceSpec spec;
  spec.kind = GroupKind::latent_random;
  spec.latent_dim = 3;
  spec.generator_count = 2;
  spec.seed = 4;
  const GeneratorBasis a = true_generator(spec), b = true_generator(spec);
  for (Index j = 0; j < 2; ++j) {
    EXPECT_NEAR(a[j].norm(), 1.0, 1e-14);
    EXPECT_EQ(a[j], b[j]);
  }
  spec.seed = 5;
  EXPECT_NE(true_generator(spec)[0], a[0]);
}

TEST(TrueGenerator, RejectsIncompatibleDims) {
  SequenceSpec spec;
  spec.latent_dim = 3;
  EXPECT_THROW(true_generator(spec), DimensionError);
}

TEST(LatentPairs, NoMotionNoNoiseIsIdentity) {
  SequenceSpec spec;
  spec.lambda_scale = 0.0;
  spec.pair_count = 20;
  const auto [data, truth] = generate_latent_pairs(spec);
  EXPECT_EQ(data.z_i, data.z_next);
}

TEST(LatentPairs, FirstOrderAndExactModesAgreeToSecondOrder) {
  SequenceSpec spec;
  spec.lambda_scale = 1e-3;
  spec.pair_count = 200;
  const auto exact = generate_latent_pairs(spec).first;
  spec.first_order = true;
  const auto first = generate_latent_pairs(spec).first;
  for (Index i = 0; i < exact.count(); ++i)
    EXPECT_LT((exact.second(i) - first.second(i)).norm(), 10 * spec.lambda_scale * spec.lambda_scale) << i;
}

TEST(LatentPairs, FirstOrderResidualIsSecondOrderInScale) {
  SequenceSpec spec;
  spec.kind = GroupKind::latent_random;
  spec.latent_dim = 3;
  spec.generator_count = 2;
  spec.lambda_scale = 1e-2;
  spec.pair_count = 300;
  const auto [data, truth] = generate_latent_pairs(spec);
  for (Index i = 0; i < data.count(); ++i) {
    const Vector z = data.first(i);
    const Vector r = data.second(i) - z - assemble_A(truth.generators, z) * truth.lambda.row(i).transpose();
    EXPECT_LE(r.norm(), 10 * spec.lambda_scale * spec.lambda_scale * z.norm()) << i;
  }
}

TEST(LatentPairs, BitReproducible) {
  SequenceSpec spec;
  spec.seed = 11;
  spec.noise_std = 0.1;
  const auto a = generate_latent_pairs(spec), b = generate_latent_pairs(spec);
  EXPECT_EQ(serialize(dataset_file(a.first, a.second)), serialize(dataset_file(b.first, b.second)));
  spec.seed = 12;
  EXPECT_NE(generate_latent_pairs(spec).first.z_i, a.first.z_i);
}

TEST(ImagePairs, LinearEmbeddingIsInvertible) {
  SequenceSpec spec;
  spec.pair_count = 30;
  spec.image_width = 7;
  const auto [data, truth] = generate_image_pairs(spec, Embedding::linear);
  EXPECT_LT(max_abs_diff(truth.loading.transpose() * truth.loading, Matrix::Identity(2, 2)), 1e-14);
  EXPECT_LT(max_abs_diff(data.x_i * truth.loading, truth.latent_i), 1e-14);
  EXPECT_LT(max_abs_diff(data.x_next * truth.loading, truth.latent_next), 1e-14);
}

TEST(ImagePairs, RasterShiftByWholeSamples) {
  SequenceSpec spec;
  spec.kind = GroupKind::cyclic_shift;
  spec.latent_dim = 4;
  spec.image_width = 12;
  spec.pair_count = 10;
  const Matrix g = fourier_loading(12, 4).transpose() * shift_generator(12) * fourier_loading(12, 4);
  for (int steps : {1, 3}) {
    spec.fixed_lambda = Vector::Constant(1, steps * g.norm());
    const auto [data, truth] = generate_image_pairs(spec, Embedding::raster);
    for (Index i = 0; i < data.count(); ++i) {
      const Vector x = data.first(i), y = data.second(i);
      for (Index m = 0; m < 12; ++m) EXPECT_NEAR(y((m + steps) % 12), x(m), 1e-12);
    }
  }
}

TEST(ImagePairs, RasterRequiresOneDimensionalShift) {
  SequenceSpec spec;
  EXPECT_THROW(generate_image_pairs(spec, Embedding::raster), DimensionError);
}

TEST(ImagePairs, PooledFramesHaveLatentRank) {
  SequenceSpec spec;
  spec.pair_count = 300;
  spec.image_width = 10;
  spec.noise_std = 0.01;
  const auto [data, truth] = generate_image_pairs(spec, Embedding::linear);
  Matrix stacked(600, 10);
  stacked << data.x_i, data.x_next;
  const Vector s = Eigen::JacobiSVD<Matrix>(stacked).singularValues();
  EXPECT_GT(s(1) / s(2), 10.0);
}

TEST(SubspaceAngle, Examples) {
  SequenceSpec spec;
  const GeneratorBasis rot = true_generator(spec);
  EXPECT_LT(subspace_angle(rot, rot), 1e-12);
  const GeneratorBasis diag({Matrix::Identity(2, 2)});
  EXPECT_NEAR(subspace_angle(rot, diag), std::numbers::pi / 2, 1e-12);
}

TEST(SubspaceAngle, InvariantToBasisChangeAndSymmetric) {
  CounterRng rng(2, 0);
  const GeneratorBasis a({rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)});
  const GeneratorBasis b({rng.normal_matrix(3, 3), rng.normal_matrix(3, 3)});
  const Matrix mix = rng.normal_matrix(2, 2);
  std::vector<Matrix> mixed;
  for (Index k = 0; k < 2; ++k) mixed.push_back(mix(k, 0) * a[0] + mix(k, 1) * a[1]);
  const GeneratorBasis a2(mixed);
  EXPECT_LT(subspace_angle(a, a2), 1e-10);
  EXPECT_NEAR(subspace_angle(a, b), subspace_angle(b, a), 1e-10);
  EXPECT_NEAR(subspace_angle(a2, b), subspace_angle(a, b), 1e-10);
}

TEST(SubspaceAngle, RejectsZeroBasis) {
  SequenceSpec spec;
  EXPECT_THROW(subspace_angle(GeneratorBasis({Matrix::Zero(2, 2)}), true_generator(spec)), NumericError);
}

TEST(PrincipalAngle, SmallAnglesAreAccurate) {
  Matrix a(3, 1), b(3, 1);
  a << 1, 0, 0;
  b << 1, 1e-9, 0;
  EXPECT_NEAR(principal_angle(a, b), 1e-9, 1e-20);
}

}  // namespace
}  // namespace lieflow
