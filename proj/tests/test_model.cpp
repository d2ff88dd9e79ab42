#include <gtest/gtest.h>

#include <numeric>
#include <set>

#include "adavit/elastic_model.hpp"
#include "support.hpp"

namespace adavit {
namespace {

TEST(Model, MaxWidthMatchesDenseReference) {
  EXPECT_LT(testing::slicing_identity_error(5, 101), 1e-10);
}

TEST(Model, SubWidthUsesPrefixSlices) {
  Rng rng(1);
  const ElasticConfig cfg = testing::toy_config();
  WeightStore w = WeightStore::init(cfg, rng);
  const Mat x = testing::random_mat(5, cfg.c_max(), rng);
  const BlockArch arch{16, 2.0};
  const Mat before = block_forward(w.blocks[0], x, arch, cfg);
  // Weights outside the slice must not matter.
  BlockWeights& b = w.blocks[0];
  for (std::size_t r = 16; r < 48; ++r)
    for (std::size_t c = 0; c < 48; ++c) b.wq(r, c) = b.wk(r, c) = b.wv(r, c) = 7.0;
  for (std::size_t r = 0; r < 48; ++r)
    for (std::size_t c = 16; c < 48; ++c) b.wo(r, c) = -3.0;
  for (std::size_t r = 96; r < 192; ++r) b.w_up(r, 0) = 5.0;
  for (std::size_t r = 0; r < 48; ++r) b.w_down(r, 150) = 5.0;
  EXPECT_EQ(block_forward(w.blocks[0], x, arch, cfg), before);
}

TEST(Model, InvalidWidthThrows) {
  Rng rng(2);
  const ElasticConfig cfg = testing::toy_config();
  const WeightStore w = WeightStore::init(cfg, rng);
  const Mat x(3, cfg.c_max());
  EXPECT_THROW(block_forward(w.blocks[0], x, {18, 2.0}, cfg), ConfigError);
  EXPECT_THROW(block_forward(w.blocks[0], x, {64, 2.0}, cfg), ConfigError);
  EXPECT_THROW(slice_projection(w.blocks[0].wq, 0), std::out_of_range);
}

TEST(Model, FlopsAnchorAndFormulaAgreement) {
  const auto r = testing::measure_flops(20, 3);
  EXPECT_EQ(r.anchor_macs, 1224589824u);
  EXPECT_EQ(r.configs_checked, 20u);
  EXPECT_EQ(r.mismatches, 0u);
}

TEST(Model, ClosedFormMatchesFormulaAtRatioFour) {
  for (std::size_t n : {17u, 65u, 197u})
    for (std::size_t c : {16u, 192u})
      EXPECT_EQ(uniform_closed_form(n, c, 3), 3 * block_macs_formula(n, c, 4 * c, c));
}

TEST(Model, TracedEqualsFormula) {
  for (std::size_t heads : {1u, 2u, 4u})
    EXPECT_EQ(block_macs_traced(9, 8 * heads, heads, 40, 48),
              block_macs_formula(9, 8 * heads, 40, 48));
}

TEST(Model, PlanShapesMatchesExecutedTrace) {
  Rng rng(4);
  const ElasticConfig cfg = testing::toy_config(2);
  const WeightStore w = WeightStore::init(cfg, rng);
  for (TokenStrategy s : {TokenStrategy::prune, TokenStrategy::merge,
                          TokenStrategy::prune_then_merge}) {
    const auto decided = testing::random_decisions(cfg, s, rng);
    ForwardOptions opts;
    opts.strategy = s;
    const ForwardResult r = model_forward(w, testing::random_image(cfg, rng), decided, opts);
    const FlopsReport planned = count_flops(cfg, plan_shapes(cfg, decided));
    EXPECT_EQ(planned.measured_total, r.flops.measured_total);
    EXPECT_EQ(planned.per_block, r.flops.per_block);
  }
}

TEST(Model, FullDecisionsGiveUnitRatios) {
  Rng rng(5);
  const ElasticConfig cfg = testing::toy_config();
  const WeightStore w = WeightStore::init(cfg, rng);
  const std::vector<GroupDecision> full(cfg.decided_groups(),
                                        full_decision(cfg, TokenStrategy::merge));
  ForwardOptions opts;
  opts.strategy = TokenStrategy::merge;
  const ForwardResult r = model_forward(w, testing::random_image(cfg, rng), full, opts);
  EXPECT_DOUBLE_EQ(r.flops.flops_ratio, 1.0);
  EXPECT_DOUBLE_EQ(r.keep_rate, 1.0);
  EXPECT_EQ(r.flops.measured_total, full_model_macs(cfg));
}

TEST(Model, KeepRateIsProductOfGroupFractions) {
  Rng rng(6);
  const ElasticConfig cfg = testing::toy_config();
  const WeightStore w = WeightStore::init(cfg, rng);
  const auto decided = testing::random_decisions(cfg, TokenStrategy::prune, rng);
  const ForwardResult r = model_forward(w, testing::random_image(cfg, rng), decided);
  double expect = 1.0;
  std::size_t n = cfg.num_patches();
  for (const GroupDecision& d : decided) {
    const std::size_t next = reduced_count(n, d.token);
    expect *= static_cast<double>(next) / static_cast<double>(n);
    n = next;
  }
  EXPECT_DOUBLE_EQ(r.keep_rate, expect);
}

TEST(Model, ImportanceIsNonnegativeAndBounded) {
  Rng rng(7);
  const ElasticConfig cfg = testing::toy_config();
  const WeightStore w = WeightStore::init(cfg, rng);
  const Mat x = testing::random_mat(cfg.tokens(), cfg.c_max(), rng);
  BlockCache cache;
  block_forward(w.blocks[0], x, max_arch(cfg), cfg, &cache);
  const ImportanceScores s = cls_importance(cache.attn, cfg.heads);
  ASSERT_EQ(s.values.size(), cfg.num_patches());
  const double total = std::accumulate(s.values.begin(), s.values.end(), 0.0);
  for (double v : s.values) EXPECT_GE(v, 0.0);
  EXPECT_LT(total, 1.0);
}

TEST(Model, PatchifyLayout) {
  ElasticConfig cfg = testing::toy_config();
  cfg.image_side = 4;
  std::vector<double> img(16);
  std::iota(img.begin(), img.end(), 0.0);
  const Mat p = patchify(img, cfg);
  ASSERT_EQ(p.rows, 4u);
  EXPECT_EQ(p, Mat(4, 4, {0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15}));
}

TEST(Model, SampleRunStateIsPaddedToFullTokens) {
  Rng rng(8);
  const ElasticConfig cfg = testing::toy_config();
  const WeightStore w = WeightStore::init(cfg, rng);
  SampleRun run(w, testing::random_image(cfg, rng), {});
  run.run_first_group();
  GroupDecision d = full_decision(cfg, TokenStrategy::prune);
  d.token.t = 0.25;
  run.run_group(d);
  const auto s = run.state();
  ASSERT_EQ(s.size(), cfg.tokens());
  // Keys of the group's only block were taken before its reduction.
  EXPECT_NE(s.back(), 0.0);
  run.run_group(d);
  EXPECT_EQ(run.state().back(), 0.0);
}

TEST(Model, RandomArchCoversChoices) {
  const ElasticConfig cfg = testing::toy_config();
  Rng rng(9);
  std::set<std::size_t> phis;
  for (int i = 0; i < 50; ++i)
    for (const BlockArch& a : sample_random_arch(cfg, rng)) phis.insert(a.phi);
  EXPECT_EQ(phis, (std::set<std::size_t>{16, 32, 48}));
}

}  // namespace
}  // namespace adavit
