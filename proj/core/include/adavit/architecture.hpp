#pragma once

// Model-family description and per-group decisions shared by the model, the
// token reducers and the selector.

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace adavit {

/// The elastic model family. The residual stream is always `c_max()` wide;
/// attention width and MLP hidden width are chosen per block.
struct ElasticConfig {
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::vector<std::size_t> embed_choices{16, 32, 48};
  std::vector<double> mlp_ratio_choices{2.0, 4.0};
  std::size_t group_size = 2;
  std::size_t image_side = 8;
  std::size_t patch_side = 2;
  std::size_t channels = 1;
  std::size_t num_classes = 4;

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;

  std::size_t c_max() const;
  std::size_t num_patches() const;
  /// Patch tokens plus CLS.
  std::size_t tokens() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return patch_side * patch_side * channels; }
  std::size_t groups() const { return depth / group_size; }
  /// Groups the selector decides (all but the first).
  std::size_t decided_groups() const { return groups() - 1; }
  std::size_t hidden_width(double ratio) const;
  std::size_t max_hidden() const;

  bool operator==(const ElasticConfig&) const = default;
};

/// Width choices for one block.
struct BlockArch {
  std::size_t phi = 0;     // attention width
  double mlp_ratio = 0.0;  // MLP expansion factor

  bool operator==(const BlockArch&) const = default;
};

BlockArch max_arch(const ElasticConfig& cfg);
BlockArch min_arch(const ElasticConfig& cfg);

enum class TokenStrategy { prune, merge, prune_then_merge };

std::string_view to_string(TokenStrategy s);
/// Accepts "prune", "merge", "prune-merge" / "prune_then_merge".
TokenStrategy parse_strategy(std::string_view s);

enum class MergeMode { sum, mean };

struct TokenDecision {
  TokenStrategy strategy = TokenStrategy::prune;
  double t = 1.0;
  double t_prune = 1.0;
  double t_merge = 1.0;

  static TokenDecision keep_all(TokenStrategy s) { return {s, 1.0, 1.0, 1.0}; }
};

/// Continuous selector output for one group plus its decoded discrete form.
struct GroupDecision {
  std::vector<double> s_mhsa;  // one per block in the group, in [0,1]
  std::vector<double> s_mlp;
  TokenDecision token;
  std::vector<std::size_t> mhsa_index;  // decoded indices into the choice lists
  std::vector<std::size_t> mlp_index;

  std::vector<BlockArch> archs(const ElasticConfig& cfg) const;
};

/// Number of continuous action components per decided group.
std::size_t action_dim(const ElasticConfig& cfg, TokenStrategy s);

/// index = min(round_half_up(s * E), E - 1).
std::size_t decode_index(double s, std::size_t choices);

/// Maps an action vector in [0,1]^action_dim to a decision. Layout:
/// [s_mhsa x K, s_mlp x K, t] or [..., t_prune, t_merge].
GroupDecision decode_action(std::span<const double> action, const ElasticConfig& cfg,
                            TokenStrategy strategy);

/// Max-width, keep-all decision (the Result-to-Go starting point).
GroupDecision full_decision(const ElasticConfig& cfg, TokenStrategy strategy);
/// Smallest width in every block, all tokens kept.
GroupDecision min_width_decision(const ElasticConfig& cfg, TokenStrategy strategy);

}  // namespace adavit
