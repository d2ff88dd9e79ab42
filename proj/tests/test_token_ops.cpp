#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "adavit/token_ops.hpp"
#include "support.hpp"

namespace adavit {
namespace {

TEST(TokenOps, MergeMatchesBruteForce) {
  const auto r = testing::measure_merge_oracle(300, 21);
  EXPECT_EQ(r.index_mismatches, 0u);
  EXPECT_LT(r.value_error, 1e-12);
}

TEST(TokenOps, MaskedPathsMatchPerSample) {
  const auto r = testing::measure_masked_equivalence(9, 8, 22);
  EXPECT_LT(r.forward_error, 1e-8);
  EXPECT_LT(r.layer_norm_error, 1e-8);
  EXPECT_LT(r.reduce_error, 1e-8);
  EXPECT_GT(r.low_ratio_merges, 0u);
}

TEST(TokenOps, RoundingAndKeptCount) {
  EXPECT_EQ(round_half_up(2.5), 3u);
  EXPECT_EQ(round_half_up(2.4999), 2u);
  EXPECT_EQ(kept_count(16, 0.5), 8u);
  EXPECT_EQ(kept_count(16, 0.0), 1u);
  EXPECT_EQ(kept_count(16, 1.7), 16u);
  EXPECT_EQ(kept_count(3, 0.5), 2u);
}

TEST(TokenOps, SortIsStableDescendingAndKeepsCls) {
  const Mat x(5, 1, {9, 1, 2, 3, 4});
  const SortedTokens s = sort_by_importance(x, {{0.1, 0.5, 0.5, 0.2}});
  EXPECT_EQ(s.permutation, (std::vector<std::size_t>{0, 2, 3, 4, 1}));
  EXPECT_EQ(s.x, Mat(5, 1, {9, 2, 3, 4, 1}));
  EXPECT_THROW(sort_by_importance(x, {{0.1}}), DimensionError);
}

TEST(TokenOps, PruneKeepsClsAndLeadingTokens) {
  const Mat x(5, 1, {9, 1, 2, 3, 4});
  EXPECT_EQ(prune_tokens(x, 0.5), Mat(3, 1, {9, 1, 2}));
  EXPECT_EQ(prune_tokens(x, 0.0), Mat(2, 1, {9, 1}));
}

TEST(TokenOps, MergeSumPreservesColumnTotals) {
  Rng rng(3);
  const Mat im = testing::random_mat(3, 4, rng), un = testing::random_mat(5, 4, rng);
  const MergeResult r = merge_tokens(im, un);
  for (std::size_t k = 0; k < 4; ++k) {
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < 3; ++i) before += im(i, k), after += r.merged(i, k);
    for (std::size_t i = 0; i < 5; ++i) before += un(i, k);
    EXPECT_NEAR(before, after, 1e-12);
  }
}

TEST(TokenOps, ZeroNormRowsHaveZeroSimilarity) {
  const std::vector<double> z{0, 0}, a{1, 0};
  EXPECT_EQ(cosine_similarity(z, a), 0.0);
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-15);
}

TEST(TokenOps, PruneThenMergeCounts) {
  Rng rng(4);
  const Mat x = testing::random_mat(17, 3, rng);
  const Mat y = prune_then_merge(x, 0.5, 0.5);
  EXPECT_EQ(y.rows, 1 + 4u);
  EXPECT_EQ(reduced_count(16, {TokenStrategy::prune_then_merge, 0.25, 0.5, 0.5}), 4u);
  EXPECT_EQ(reduced_count(16, {TokenStrategy::merge, 0.25, 1, 1}), 4u);
}

TEST(TokenOps, TokenMapBackwardIsAdjoint) {
  Rng rng(5);
  const Mat x = testing::random_mat(9, 4, rng);
  ImportanceScores s;
  for (int i = 0; i < 8; ++i) s.values.push_back(std::uniform_real_distribution<>(0, 1)(rng));
  for (TokenStrategy st : {TokenStrategy::prune, TokenStrategy::merge,
                           TokenStrategy::prune_then_merge}) {
    const Reduction r = reduce_tokens(x, s, {st, 0.4, 0.7, 0.6}, {MergeMode::mean});
    EXPECT_LT(max_abs_diff(r.map.apply(x), r.x), 1e-12);
    const Mat g = testing::random_mat(r.x.rows, 4, rng);
    const Mat back = r.map.backward(g);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) lhs += r.x.data[i] * g.data[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.data[i] * back.data[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
    double total = 0.0;
    for (double v : r.sizes) total += v;
    EXPECT_EQ(r.sizes.size(), r.x.rows);
    if (st != TokenStrategy::prune) EXPECT_GE(total, static_cast<double>(r.x.rows));
  }
}

TEST(TokenOps, MaskedMergeIgnoresSentinels) {
  const double inf = std::numeric_limits<double>::infinity();
  Tensor3 im(1, 3, 2, inf), un(1, 2, 2, inf);
  im.row(0, 0)[0] = 1, im.row(0, 0)[1] = 0;
  im.row(0, 1)[0] = 0, im.row(0, 1)[1] = 1;
  un.row(0, 0)[0] = 0.1, un.row(0, 0)[1] = 2;
  const MaskedMergeResult r = masked_merge(im, un);
  EXPECT_EQ(r.target[0], (std::vector<std::size_t>{1}));
  EXPECT_DOUBLE_EQ(r.merged.at(0, 1, 1), 3.0);
  EXPECT_EQ(r.merged.at(0, 2, 0), 0.0);
}

TEST(TokenOps, BuildMasks) {
  const std::vector<std::size_t> de{2, 3}, dt{1, 2};
  const MaskPair m = build_masks(de, dt, 2, 3);
  EXPECT_EQ(m.channel.at(0, 1, 1), 1.0);
  EXPECT_EQ(m.channel.at(0, 1, 2), 0.0);
  EXPECT_EQ(m.token.at(0, 1, 0), 0.0);
  EXPECT_EQ(m.token.at(1, 1, 2), 1.0);
}

TEST(TokenOps, DecodeExamplesAndMonotonicity) {
  EXPECT_EQ(decode_index(0.49, 4), 2u);
  EXPECT_EQ(decode_index(1.0, 4), 3u);
  EXPECT_EQ(decode_index(0.0, 7), 0u);
  for (std::size_t e = 1; e <= 8; ++e) {
    std::size_t prev = 0;
    for (int i = 0; i <= 1000; ++i) {
      const std::size_t idx = decode_index(i / 1000.0, e);
      EXPECT_GE(idx, prev);
      EXPECT_LT(idx, e);
      prev = idx;
    }
    // Constant within each rounding cell.
    for (std::size_t k = 0; k + 1 < e; ++k) {
      const double lo = (static_cast<double>(k) + 0.5) / static_cast<double>(e);
      const double hi = (static_cast<double>(k) + 1.5) / static_cast<double>(e);
      EXPECT_EQ(decode_index(lo + 1e-9, e), decode_index(hi - 1e-9, e));
    }
  }
}

TEST(TokenOps, DecodeActionLayout) {
  const ElasticConfig cfg = testing::toy_config(2);
  const std::vector<double> a{0.0, 1.0, 0.3, 0.9, 0.5, 0.4};
  const GroupDecision d = decode_action(a, cfg, TokenStrategy::prune_then_merge);
  EXPECT_EQ(d.mhsa_index, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(d.mlp_index, (std::vector<std::size_t>{1, 1}));
  EXPECT_DOUBLE_EQ(d.token.t, 0.2);
  EXPECT_THROW(decode_action(a, cfg, TokenStrategy::prune), DimensionError);
}

TEST(TokenOps, DecisionAverageAveragesComponents) {
  const ElasticConfig cfg = testing::toy_config();
  const std::vector<double> a{0.0, 0.0, 0.2}, b{1.0, 1.0, 0.6};
  const std::vector<GroupDecision> batch{decode_action(a, cfg, TokenStrategy::prune),
                                         decode_action(b, cfg, TokenStrategy::prune)};
  const GroupDecision avg = decision_average(batch, cfg);
  EXPECT_DOUBLE_EQ(avg.s_mhsa[0], 0.5);
  EXPECT_EQ(avg.mhsa_index[0], 2u);
  EXPECT_NEAR(avg.token.t, 0.4, 1e-15);
}

}  // namespace
}  // namespace adavit
