#pragma once

// Token reordering, pruning and merging, plus the masked batched forms that
// let samples with different token counts and widths share one dense batch.
//
// Token matrices always carry the CLS token in row 0. CLS is never scored,
// reordered, pruned or merged.

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "adavit/architecture.hpp"
#include "adavit/numerics.hpp"

namespace adavit {

/// Half-up rounding of a nonnegative value.
std::size_t round_half_up(double v);

/// round_half_up(n * t) with t clamped to [0,1] and a floor of one token.
std::size_t kept_count(std::size_t n, double t);

/// One nonnegative score per non-CLS token.
struct ImportanceScores {
  std::vector<double> values;
};

struct SortedTokens {
  Mat x;
  /// permutation[i] is the input row now at row i; permutation[0] == 0.
  std::vector<std::size_t> permutation;
};

/// Descending by score; ties keep the lower original index first.
SortedTokens sort_by_importance(const Mat& x, const ImportanceScores& scores);

/// Keeps CLS and the first kept_count(N, t) sorted tokens.
Mat prune_tokens(const Mat& x_sorted, double t);

struct TokenSplit {
  Mat cls;          // 1 x C
  Mat important;    // kept_count(N, t) x C
  Mat unimportant;  // remainder
};

TokenSplit split_tokens(const Mat& x_sorted, double t);

struct MergeResult {
  Mat merged;
  /// For each unimportant row, the important row it was added into.
  std::vector<std::size_t> target;
};

/// Cosine of two rows; zero when either has zero norm.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Each unimportant row goes to its argmax-cosine important row (lowest index
/// on ties). `sum` adds rows; `mean` averages each target with everything
/// merged into it, weighted by token sizes when given.
MergeResult merge_tokens(const Mat& important, const Mat& unimportant,
                         MergeMode mode = MergeMode::sum);

/// Same assignment, but similarity measured on separate feature rows (e.g. keys)
/// aligned with `important` / `unimportant`.
MergeResult merge_tokens_by(const Mat& important, const Mat& unimportant,
                            const Mat& important_features, const Mat& unimportant_features,
                            MergeMode mode = MergeMode::sum,
                            std::span<const double> important_sizes = {},
                            std::span<const double> unimportant_sizes = {});

/// Prune to kept_count(N, t_prune), then merge within the survivors at t_merge.
Mat prune_then_merge(const Mat& x_sorted, double t_prune, double t_merge,
                     MergeMode mode = MergeMode::sum);

/// Output token count of a decision applied to N non-CLS tokens (CLS excluded).
std::size_t reduced_count(std::size_t n, const TokenDecision& d);

/// Linear map from input rows to output rows: out[m] = sum_w w * in[src].
/// Records a token reduction so gradients can be routed back through it.
struct TokenMap {
  std::size_t input_rows = 0;
  std::vector<std::vector<std::pair<std::size_t, double>>> sources;

  static TokenMap identity(std::size_t n);
  std::size_t output_rows() const { return sources.size(); }
  Mat apply(const Mat& x) const;
  Mat backward(const Mat& grad_out) const;
};

struct ReductionOptions {
  MergeMode merge_mode = MergeMode::sum;
};

struct Reduction {
  Mat x;                      // reduced tokens, CLS first
  TokenMap map;               // from the unsorted input rows
  std::vector<double> sizes;  // tokens represented by each output row
};

/// Sort by importance then apply the decision's strategy. `features`, when
/// given, supplies the rows used for merge similarity (aligned with `x`);
/// `sizes` (aligned with `x`) are the token sizes carried from earlier merges.
Reduction reduce_tokens(const Mat& x, const ImportanceScores& scores, const TokenDecision& d,
                        const ReductionOptions& opts = {}, const Mat* features = nullptr,
                        std::span<const double> sizes = {});

// ---------------------------------------------------------------------------
// Masked batched execution.

/// Dense batch x tokens x channels tensor.
struct Tensor3 {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::size_t channels = 0;
  std::vector<double> data;

  Tensor3() = default;
  Tensor3(std::size_t b, std::size_t n, std::size_t c, double fill = 0.0)
      : batch(b), tokens(n), channels(c), data(b * n * c, fill) {}

  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data[(i * tokens + j) * channels + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data[(i * tokens + j) * channels + k];
  }
  std::span<double> row(std::size_t i, std::size_t j) {
    return {data.data() + (i * tokens + j) * channels, channels};
  }
  std::span<const double> row(std::size_t i, std::size_t j) const {
    return {data.data() + (i * tokens + j) * channels, channels};
  }

  /// Top-left rows x cols block of sample i.
  Mat slice(std::size_t i, std::size_t rows, std::size_t cols) const;
  void set_slice(std::size_t i, const Mat& m);
};

Tensor3 hadamard(const Tensor3& a, const Tensor3& b);

/// Channel mask M^L[i,j,k] = [k < d_e[i]] and token mask M^T[i,j,k] = [j < d_t[i]].
struct MaskPair {
  Tensor3 channel;
  Tensor3 token;
  std::vector<std::size_t> d_e;
  std::vector<std::size_t> d_t;
};

MaskPair build_masks(std::span<const std::size_t> d_e, std::span<const std::size_t> d_t,
                     std::size_t n_max, std::size_t c_max);

/// True when every entry of the row is +inf (the dead-token sentinel).
bool is_sentinel_row(std::span<const double> row);

struct MaskedMergeResult {
  Tensor3 merged;  // dead rows zeroed
  std::vector<std::vector<std::size_t>> target;  // per sample, per live unimportant row
};

/// Batched merge. Dead token rows in both inputs carry +inf; their similarity
/// entries are forced to -inf before the argmax. Live counts may differ per
/// sample and any merge ratio is legal.
MaskedMergeResult masked_merge(const Tensor3& x_im, const Tensor3& x_un,
                               MergeMode mode = MergeMode::sum);

/// LayerNorm over only the live channels of each row, computed on the full
/// width by mean-filling the masked channels. Masked output channels are zero.
Tensor3 masked_layer_norm(const Tensor3& x, const Tensor3& channel_mask,
                          std::span<const double> scale, std::span<const double> shift,
                          double eps = kLayerNormEps);

/// Padded batch with per-sample live widths and live token counts (CLS included).
struct MaskedBatch {
  Tensor3 x;
  std::vector<std::size_t> d_e;
  std::vector<std::size_t> d_t;
};

/// Per-sample sort + strategy on a padded batch, expressed as token-mask
/// updates (prune) and a sentinel-masked batched merge.
MaskedBatch masked_reduce(const MaskedBatch& in, std::span<const ImportanceScores> scores,
                          std::span<const TokenDecision> decisions,
                          MergeMode mode = MergeMode::sum);

/// Arithmetic mean of every continuous component, decoded once.
GroupDecision decision_average(std::span<const GroupDecision> batch, const ElasticConfig& cfg);

}  // namespace adavit
