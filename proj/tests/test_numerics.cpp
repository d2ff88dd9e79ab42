#include <gtest/gtest.h>

#include <cmath>

#include "adavit/numerics.hpp"
#include "support.hpp"

namespace adavit {
namespace {

TEST(Numerics, GradientSuitePassesFiniteDifferences) {
  for (const auto& c : testing::gradient_suite(17)) {
    SCOPED_TRACE(c.name);
    EXPECT_LT(c.error, 1e-4);
  }
}

TEST(Numerics, MatmulValuesAndMacCount) {
  const Mat a(2, 3, {1, 2, 3, 4, 5, 6});
  const Mat b(3, 2, {7, 8, 9, 10, 11, 12});
  MacCounter m;
  const Mat c = matmul(a, b, &m);
  EXPECT_EQ(c, Mat(2, 2, {58, 64, 139, 154}));
  EXPECT_EQ(m.macs, 12u);
  EXPECT_EQ(matmul_nt(a, transpose(b)), c);
  EXPECT_EQ(matmul_tn(transpose(a), b), c);
}

TEST(Numerics, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Mat(2, 3), Mat(2, 3)), DimensionError);
}

TEST(Numerics, SoftmaxRowsSumToOne) {
  Rng rng(3);
  const Mat p = softmax_rows(testing::random_mat(4, 7, rng, 30.0));
  for (std::size_t i = 0; i < p.rows; ++i) {
    double s = 0.0;
    for (double v : p.row(i)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Numerics, CrossEntropyAtUniformLogitsIsLogClasses) {
  const Mat z(3, 4, 0.0);
  const std::vector<int> y{0, 1, 3};
  EXPECT_NEAR(softmax_cross_entropy(z, y).loss, std::log(4.0), 1e-12);
}

TEST(Numerics, LayerNormNormalizesRows) {
  Rng rng(5);
  const Mat x = testing::random_mat(3, 9, rng, 4.0);
  const std::vector<double> g(9, 1.0), b(9, 0.0);
  const Mat y = layer_norm(x, g, b);
  for (std::size_t i = 0; i < y.rows; ++i) {
    double mean = 0.0, var = 0.0;
    for (double v : y.row(i)) mean += v;
    mean /= 9.0;
    for (double v : y.row(i)) var += (v - mean) * (v - mean);
    EXPECT_NEAR(mean, 0.0, 1e-12);
    EXPECT_NEAR(var / 9.0, 1.0, 1e-5);
  }
}

TEST(Numerics, OrthogonalInitIsSemiOrthogonal) {
  Rng rng(9);
  const Mat q = orthogonal_init(4, 10, 2.0, rng);
  const Mat g = matmul_nt(q, q);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(g(i, j), i == j ? 4.0 : 0.0, 1e-10);
}

TEST(Numerics, AdamWFirstStepMovesByLearningRate) {
  std::vector<double> p{1.0, -2.0};
  const std::vector<double> g{0.5, -3.0};
  AdamW opt({2});
  const std::span<double> ps[] = {p};
  const std::span<const double> gs[] = {g};
  opt.step(ps, gs, 0.1);
  EXPECT_NEAR(p[0], 0.9, 1e-6);
  EXPECT_NEAR(p[1], -1.9, 1e-6);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(Numerics, AdamWDecoupledDecayWithZeroGradient) {
  std::vector<double> p{2.0};
  const std::vector<double> g{0.0};
  AdamW opt({1}, AdamW::Options{0.9, 0.999, 1e-8, 0.5});
  const std::span<double> ps[] = {p};
  const std::span<const double> gs[] = {g};
  opt.step(ps, gs, 0.1);
  EXPECT_NEAR(p[0], 2.0 - 0.1 * 0.5 * 2.0, 1e-12);
}

TEST(Numerics, ClipGradNorm) {
  std::vector<double> a{3.0}, b{4.0};
  const std::span<double> gs[] = {a, b};
  EXPECT_DOUBLE_EQ(clip_grad_norm(gs, 1.0), 5.0);
  EXPECT_NEAR(a[0], 0.6, 1e-12);
  EXPECT_NEAR(b[0], 0.8, 1e-12);
  EXPECT_NEAR(clip_grad_norm(gs, 10.0), 1.0, 1e-12);
}

TEST(Numerics, CosineScheduleEndpoints) {
  const CosineSchedule s{1e-3, 1e-5, 1e-6, 10, 110};
  EXPECT_DOUBLE_EQ(s.at(0), 1e-6);
  EXPECT_NEAR(s.at(10), 1e-3, 1e-15);
  EXPECT_NEAR(s.at(60), 0.5 * (1e-3 + 1e-5), 1e-12);
  EXPECT_NEAR(s.at(110), 1e-5, 1e-15);
  for (std::size_t t = 10; t < 110; ++t) EXPECT_GE(s.at(t), s.at(t + 1));
}

TEST(Numerics, MixSeedSeparatesStreams) {
  EXPECT_NE(mix_seed(1, 2), mix_seed(1, 3));
  EXPECT_NE(mix_seed(1, 2, 3), mix_seed(1, 3, 2));
  EXPECT_EQ(mix_seed(4, 5, 6, 7), mix_seed(4, 5, 6, 7));
}

}  // namespace
}  // namespace adavit
