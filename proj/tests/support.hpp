#pragma once

// Oracles and measurement helpers shared by the unit tests and the acceptance
// binary. Everything here is coded independently of the library paths it checks.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "adavit/checkpoint.hpp"
#include "adavit/elastic_model.hpp"
#include "adavit/harness.hpp"
#include "adavit/selector.hpp"
#include "adavit/token_ops.hpp"

namespace adavit::testing {

/// Toy family used across tests: depth 4, heads 4, {16, 32, 48}, {2, 4}, 8x8 images.
ElasticConfig toy_config(std::size_t group_size = 1);

std::vector<double> random_image(const ElasticConfig& cfg, Rng& rng);

/// Random per-group decision with token ratios drawn from [t_lo, 1].
GroupDecision random_decision(const ElasticConfig& cfg, TokenStrategy s, Rng& rng,
                              double t_lo = 0.1);
std::vector<GroupDecision> random_decisions(const ElasticConfig& cfg, TokenStrategy s,
                                            Rng& rng, double t_lo = 0.1);

Mat random_mat(std::size_t rows, std::size_t cols, Rng& rng, double sd = 1.0);

/// Dense max-width forward written with plain loops: patch embedding, pre-norm
/// blocks, final LayerNorm on CLS and the linear head. No slicing, no tokens dropped.
std::vector<double> reference_logits(const WeightStore& w, std::span<const double> image);

struct BruteMerge {
  std::vector<std::size_t> target;
  Mat merged;
};

/// Exhaustive argmax-cosine assignment (first maximum wins) and the merged rows.
BruteMerge brute_merge(const Mat& important, const Mat& unimportant, MergeMode mode);

/// A_l = sum_i (discount * lambda)^i delta_{l+i}, summed up to the episode end.
std::vector<double> brute_gae(const Trajectory& t, double discount, double gae_lambda);

Trajectory random_trajectory(std::size_t length, Rng& rng);

// ---------------------------------------------------------------------------
// Criterion measurements. Each returns the quantity its threshold applies to.

struct FlopsAnchor {
  std::uint64_t anchor_macs = 0;
  std::size_t configs_checked = 0;
  std::size_t mismatches = 0;
};

/// Anchor at 197 tokens, width 192, depth 12, ratio 4; then formula vs the MACs
/// counted during real forwards on `configs` random small configurations.
FlopsAnchor measure_flops(std::size_t configs, std::uint64_t seed);

/// Max |elastic - reference| over `seeds` random weight sets at max width.
double slicing_identity_error(std::size_t seeds, std::uint64_t seed);

struct MaskedEquivalence {
  double forward_error = 0.0;     // masked batched forward vs per-sample forward
  double layer_norm_error = 0.0;  // masked LayerNorm vs LayerNorm on live channels
  double reduce_error = 0.0;      // masked reduce vs per-sample reduce_tokens
  std::size_t low_ratio_merges = 0;
};

/// Batches of `batch` samples with heterogeneous widths and token counts.
MaskedEquivalence measure_masked_equivalence(std::size_t trials, std::size_t batch,
                                             std::uint64_t seed);

struct MergeOracle {
  std::size_t index_mismatches = 0;
  double value_error = 0.0;
};

MergeOracle measure_merge_oracle(std::size_t trials, std::uint64_t seed);

struct GaeOracle {
  double double_sum_error = 0.0;
  double gamma_zero_error = 0.0;      // against r - V, expected exactly 0
  double return_minus_baseline = 0.0; // lambda = gamma = 1
};

GaeOracle measure_gae_oracle(std::size_t trials, std::uint64_t seed);

struct GradientCheck {
  std::string name;
  double error = 0.0;
};

/// Finite-difference checks of every trainable layer and the PPO loss.
std::vector<GradientCheck> gradient_suite(std::uint64_t seed);

/// Repository root, for configs shipped with the source.
std::filesystem::path source_dir();

}  // namespace adavit::testing
