#include "adavit/architecture.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "adavit/numerics.hpp"
#include "adavit/token_ops.hpp"

namespace adavit {

void ElasticConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model: " + msg); };
  if (depth == 0) fail("depth must be positive");
  if (heads == 0) fail("heads must be positive");
  if (group_size == 0 || depth % group_size != 0) fail("depth must be divisible by group_size");
  if (depth / group_size < 2) fail("need at least two groups");
  if (embed_choices.empty()) fail("embed_choices is empty");
  if (mlp_ratio_choices.empty()) fail("mlp_ratio_choices is empty");
  if (!std::is_sorted(embed_choices.begin(), embed_choices.end()) ||
      std::adjacent_find(embed_choices.begin(), embed_choices.end()) != embed_choices.end())
    fail("embed_choices must be strictly ascending");
  if (!std::is_sorted(mlp_ratio_choices.begin(), mlp_ratio_choices.end()) ||
      std::adjacent_find(mlp_ratio_choices.begin(), mlp_ratio_choices.end()) !=
          mlp_ratio_choices.end())
    fail("mlp_ratio_choices must be strictly ascending");
  for (std::size_t e : embed_choices) {
    if (e == 0 || e % heads != 0)
      fail("embed choice " + std::to_string(e) + " is not divisible by heads " +
           std::to_string(heads));
  }
  const double c = static_cast<double>(c_max());
  for (double r : mlp_ratio_choices) {
    const double h = r * c;
    if (!(r > 0.0) || std::abs(h - std::round(h)) > 1e-9)
      fail("mlp ratio " + std::to_string(r) + " does not give an integral hidden width");
  }
  if (patch_side == 0 || image_side == 0 || image_side % patch_side != 0)
    fail("image_side must be a positive multiple of patch_side");
  if (channels == 0) fail("channels must be positive");
  if (num_classes < 2) fail("num_classes must be at least 2");
}

std::size_t ElasticConfig::c_max() const {
  return embed_choices.empty() ? 0 : embed_choices.back();
}

std::size_t ElasticConfig::num_patches() const {
  const std::size_t g = patch_side ? image_side / patch_side : 0;
  return g * g;
}

std::size_t ElasticConfig::hidden_width(double ratio) const {
  return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(c_max())));
}

std::size_t ElasticConfig::max_hidden() const {
  return hidden_width(mlp_ratio_choices.back());
}

BlockArch max_arch(const ElasticConfig& cfg) {
  return {cfg.embed_choices.back(), cfg.mlp_ratio_choices.back()};
}

BlockArch min_arch(const ElasticConfig& cfg) {
  return {cfg.embed_choices.front(), cfg.mlp_ratio_choices.front()};
}

std::string_view to_string(TokenStrategy s) {
  switch (s) {
    case TokenStrategy::prune: return "prune";
    case TokenStrategy::merge: return "merge";
    case TokenStrategy::prune_then_merge: return "prune-merge";
  }
  return "?";
}

TokenStrategy parse_strategy(std::string_view s) {
  if (s == "prune") return TokenStrategy::prune;
  if (s == "merge") return TokenStrategy::merge;
  if (s == "prune-merge" || s == "prune_then_merge") return TokenStrategy::prune_then_merge;
  throw ConfigError("unknown token strategy '" + std::string(s) + "'");
}

std::vector<BlockArch> GroupDecision::archs(const ElasticConfig& cfg) const {
  std::vector<BlockArch> out;
  out.reserve(mhsa_index.size());
  for (std::size_t k = 0; k < mhsa_index.size(); ++k)
    out.push_back({cfg.embed_choices.at(mhsa_index[k]), cfg.mlp_ratio_choices.at(mlp_index.at(k))});
  return out;
}

std::size_t action_dim(const ElasticConfig& cfg, TokenStrategy s) {
  return 2 * cfg.group_size + (s == TokenStrategy::prune_then_merge ? 2 : 1);
}

std::size_t decode_index(double s, std::size_t choices) {
  const double clamped = std::clamp(s, 0.0, 1.0);
  return std::min(round_half_up(clamped * static_cast<double>(choices)), choices - 1);
}

GroupDecision decode_action(std::span<const double> action, const ElasticConfig& cfg,
                            TokenStrategy strategy) {
  const std::size_t k = cfg.group_size;
  if (action.size() != action_dim(cfg, strategy))
    throw DimensionError("decode_action: expected " + std::to_string(action_dim(cfg, strategy)) +
                         " components, got " + std::to_string(action.size()));
  GroupDecision d;
  d.s_mhsa.assign(action.begin(), action.begin() + static_cast<std::ptrdiff_t>(k));
  d.s_mlp.assign(action.begin() + static_cast<std::ptrdiff_t>(k),
                 action.begin() + static_cast<std::ptrdiff_t>(2 * k));
  for (std::size_t i = 0; i < k; ++i) {
    d.mhsa_index.push_back(decode_index(d.s_mhsa[i], cfg.embed_choices.size()));
    d.mlp_index.push_back(decode_index(d.s_mlp[i], cfg.mlp_ratio_choices.size()));
  }
  d.token.strategy = strategy;
  if (strategy == TokenStrategy::prune_then_merge) {
    d.token.t_prune = std::clamp(action[2 * k], 0.0, 1.0);
    d.token.t_merge = std::clamp(action[2 * k + 1], 0.0, 1.0);
    d.token.t = d.token.t_prune * d.token.t_merge;
  } else {
    d.token.t = std::clamp(action[2 * k], 0.0, 1.0);
  }
  return d;
}

GroupDecision full_decision(const ElasticConfig& cfg, TokenStrategy strategy) {
  std::vector<double> a(action_dim(cfg, strategy), 1.0);
  return decode_action(a, cfg, strategy);
}

GroupDecision min_width_decision(const ElasticConfig& cfg, TokenStrategy strategy) {
  std::vector<double> a(action_dim(cfg, strategy), 0.0);
  std::fill(a.begin() + static_cast<std::ptrdiff_t>(2 * cfg.group_size), a.end(), 1.0);
  return decode_action(a, cfg, strategy);
}

}  // namespace adavit
