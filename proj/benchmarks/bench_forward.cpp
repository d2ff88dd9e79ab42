#include <benchmark/benchmark.h>

#include <vector>

#include "adavit/elastic_model.hpp"

namespace {

using namespace adavit;

ElasticConfig bench_config() {
  ElasticConfig c;
  c.depth = 6;
  c.heads = 4;
  c.embed_choices = {16, 32, 48};
  c.mlp_ratio_choices = {2.0, 4.0};
  c.group_size = 1;
  c.image_side = 8;
  c.patch_side = 2;
  c.channels = 1;
  c.num_classes = 4;
  return c;
}

Mat random_mat(std::size_t rows, std::size_t cols, Rng& rng) {
  Mat m(rows, cols);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& v : m.data) v = n(rng);
  return m;
}

std::vector<double> random_image(const ElasticConfig& c, Rng& rng) {
  return random_mat(1, c.channels * c.image_side * c.image_side, rng).data;
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Mat a = random_mat(n, n, rng), b = random_mat(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_BlockForward(benchmark::State& state) {
  const ElasticConfig c = bench_config();
  Rng rng(2);
  const WeightStore w = WeightStore::init(c, rng);
  const Mat x = random_mat(c.tokens(), c.c_max(), rng);
  const BlockArch arch = state.range(0) ? max_arch(c) : min_arch(c);
  for (auto _ : state) benchmark::DoNotOptimize(block_forward(w.blocks[0], x, arch, c));
}
BENCHMARK(BM_BlockForward)->Arg(0)->Arg(1);

void BM_ModelForward(benchmark::State& state) {
  const ElasticConfig c = bench_config();
  Rng rng(3);
  const WeightStore w = WeightStore::init(c, rng);
  const auto img = random_image(c, rng);
  GroupDecision d = full_decision(c, TokenStrategy::prune);
  d.token.t = 0.5;
  const std::vector<GroupDecision> decided(c.decided_groups(), d);
  for (auto _ : state) benchmark::DoNotOptimize(model_forward(w, img, decided));
}
BENCHMARK(BM_ModelForward);

void BM_MaskedForward(benchmark::State& state) {
  const ElasticConfig c = bench_config();
  Rng rng(4);
  const WeightStore w = WeightStore::init(c, rng);
  const auto batch = static_cast<std::size_t>(state.range(0));
  std::vector<std::vector<double>> images;
  std::vector<std::vector<GroupDecision>> decided;
  for (std::size_t i = 0; i < batch; ++i) {
    images.push_back(random_image(c, rng));
    GroupDecision d = full_decision(c, TokenStrategy::prune);
    d.token.t = 0.25 + 0.75 * static_cast<double>(i) / static_cast<double>(batch);
    decided.emplace_back(c.decided_groups(), d);
  }
  for (auto _ : state) benchmark::DoNotOptimize(masked_model_forward(w, images, decided));
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * batch));
}
BENCHMARK(BM_MaskedForward)->Arg(8)->Arg(32);

}  // namespace

BENCHMARK_MAIN();
