#pragma once

// Weight-shared elastic ViT. Every sub-network is a prefix slice of the full
// weights: attention width phi takes the first phi rows of Wq/Wk/Wv and the
// first phi input columns of the output projection; an MLP ratio r takes the
// first r*C rows of W_up and the first r*C columns of W_down.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adavit/architecture.hpp"
#include "adavit/numerics.hpp"
#include "adavit/token_ops.hpp"

namespace adavit {

struct BlockWeights {
  Mat ln1_scale, ln1_shift;  // 1 x C
  Mat wq, wk, wv;            // C x C, rows sliced
  Mat wo;                    // C x C, input columns sliced
  Mat bo;                    // 1 x C
  Mat ln2_scale, ln2_shift;  // 1 x C
  Mat w_up;                  // H_max x C
  Mat b_up;                  // 1 x H_max
  Mat w_down;                // C x H_max
  Mat b_down;                // 1 x C

  bool operator==(const BlockWeights&) const = default;
};

struct WeightStore {
  ElasticConfig config;
  Mat patch_w;  // C x patch_dim
  Mat patch_b;  // 1 x C
  Mat cls;      // 1 x C
  Mat pos;      // (N+1) x C
  std::vector<BlockWeights> blocks;
  Mat norm_scale, norm_shift;  // 1 x C
  Mat head_w;                  // classes x C
  Mat head_b;                  // 1 x classes

  /// Truncated-normal-free ViT init: N(0, 0.02) projections, unit LayerNorm scales.
  static WeightStore init(const ElasticConfig& cfg, Rng& rng);
  /// Same shapes, all zeros (gradient accumulator).
  static WeightStore zeros_like(const WeightStore& w);

  /// Visits every tensor in declared order with a stable name.
  void for_each_tensor(const std::function<void(const std::string&, Mat&)>& f);
  void for_each_tensor(const std::function<void(const std::string&, const Mat&)>& f) const;

  std::vector<std::span<double>> spans();
  std::size_t parameter_count() const;

  bool operator==(const WeightStore&) const = default;
};

/// First `phi` rows of a projection.
Mat slice_projection(const Mat& w, std::size_t phi);

enum class ImportanceMode { attention, value_weighted };
enum class SimilarityFeature { tokens, keys };

struct AttentionCache {
  Mat input;  // LayerNorm output feeding the projections
  Mat q, k, v;
  std::vector<Mat> probs;  // per head, N x N
  Mat concat;
  std::size_t phi = 0;
};

struct MlpCache {
  Mat input;
  Mat pre;
  Mat act;
  std::size_t hidden = 0;
};

struct BlockCache {
  BlockArch arch;
  LayerNormCache ln1, ln2;
  AttentionCache attn;
  MlpCache mlp;
};

Mat mhsa_forward(const BlockWeights& w, const Mat& x, std::size_t phi, std::size_t heads,
                 AttentionCache* cache = nullptr, MacCounter* macs = nullptr);
Mat mlp_forward(const BlockWeights& w, const Mat& x, std::size_t hidden,
                MlpCache* cache = nullptr, MacCounter* macs = nullptr);
/// Pre-norm residual block: y = x + MHSA(LN1(x)); y = y + MLP(LN2(y)).
Mat block_forward(const BlockWeights& w, const Mat& x, const BlockArch& arch,
                  const ElasticConfig& cfg, BlockCache* cache = nullptr,
                  MacCounter* macs = nullptr);

/// Gradients of a block given its cache; accumulates weight grads into `grad`.
Mat block_backward(const BlockWeights& w, const BlockCache& cache, const Mat& grad_out,
                   std::size_t heads, BlockWeights& grad);

/// Head-averaged CLS attention over the non-CLS tokens (or the same weighted by
/// each token's value norm).
ImportanceScores cls_importance(const AttentionCache& cache, std::size_t heads,
                                ImportanceMode mode = ImportanceMode::attention);

// ---------------------------------------------------------------------------
// FLOPs accounting. One MAC per multiply-accumulate; an (a x b)(b x c) product
// costs a*b*c. Only transformer blocks are counted.

/// 4*N*phi*C + 2*N^2*phi + 2*N*hidden*C, N counting CLS.
std::uint64_t block_macs_formula(std::size_t n, std::size_t phi, std::size_t hidden,
                                 std::size_t c);
/// Sum over the matmul shapes a block forward issues.
std::uint64_t block_macs_traced(std::size_t n, std::size_t phi, std::size_t heads,
                                std::size_t hidden, std::size_t c);
/// 12*N*C^2 + 2*N^2*C per block, times depth.
std::uint64_t uniform_closed_form(std::size_t n, std::size_t c, std::size_t depth);

struct BlockShape {
  std::size_t tokens = 0;  // including CLS
  BlockArch arch;
};

struct FlopsReport {
  std::vector<std::uint64_t> per_block;
  std::uint64_t formula_total = 0;
  std::uint64_t measured_total = 0;
  std::uint64_t full_total = 0;  // max width, all tokens
  double flops_ratio = 1.0;      // measured_total / full_total

  double gmacs() const { return static_cast<double>(measured_total) / 1e9; }
};

std::uint64_t full_model_macs(const ElasticConfig& cfg);
FlopsReport count_flops(const ElasticConfig& cfg, std::span<const BlockShape> blocks);

/// Per-block shapes of the full model under per-group decisions for the decided
/// groups (the first group runs at max width with all tokens).
std::vector<BlockShape> plan_shapes(const ElasticConfig& cfg,
                                    std::span<const GroupDecision> decided);

/// Independent uniform draw per block from embed_choices x mlp_ratio_choices.
std::vector<BlockArch> sample_random_arch(const ElasticConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Group-wise forward.

struct ForwardOptions {
  TokenStrategy strategy = TokenStrategy::prune;
  ImportanceMode importance = ImportanceMode::attention;
  SimilarityFeature similarity = SimilarityFeature::tokens;
  MergeMode merge_mode = MergeMode::sum;
};

struct GroupTrace {
  std::size_t tokens_before = 0;  // non-CLS tokens entering the group
  std::size_t tokens_after = 0;   // non-CLS tokens after its reduction
  std::vector<BlockArch> archs;
  TokenDecision token;
  std::uint64_t macs = 0;
};

/// Splits an image (channels x side x side) into row-major patch vectors.
Mat patchify(std::span<const double> image, const ElasticConfig& cfg);

/// Resumable single-sample forward, executed one group at a time so the
/// selector can observe each group's output before deciding the next.
class SampleRun {
public:
  SampleRun(const WeightStore& w, std::span<const double> image, ForwardOptions opts,
            bool keep_tape = false);

  std::size_t next_group() const { return traces_.size(); }
  bool finished() const;

  /// Runs the next group. The first block uses archs[0] and its attention ranks
  /// the tokens; the reduction then applies before the remaining blocks. The
  /// first group never reduces.
  void run_group(std::span<const BlockArch> archs, const TokenDecision& token);
  void run_group(const GroupDecision& d);
  /// Runs the first group at max width with all tokens.
  void run_first_group();

  /// Per-token channel mean of the last block's keys, CLS first, zero-padded to
  /// the full token count.
  std::vector<double> state() const;

  /// Final LayerNorm on CLS and the classifier. Requires finished().
  const Mat& logits();
  int prediction();

  const std::vector<GroupTrace>& traces() const { return traces_; }
  const Mat& tokens() const { return x_; }
  /// Product of per-group non-CLS keep fractions.
  double keep_rate() const;
  FlopsReport flops() const;

  /// Backpropagates d(loss)/d(logits) into `grad` (requires keep_tape).
  void backward(const Mat& dlogits, WeightStore& grad) const;

private:
  struct Step {
    enum class Kind { block, reduce } kind;
    std::size_t block = 0;
    BlockCache cache;
    TokenMap map;
  };

  const WeightStore* w_;
  ForwardOptions opts_;
  bool keep_tape_;
  Mat patches_;
  Mat x_;
  std::vector<double> sizes_;
  std::vector<GroupTrace> traces_;
  std::vector<Step> tape_;
  Mat last_keys_;
  std::size_t next_block_ = 0;
  std::vector<BlockShape> shapes_;
  std::uint64_t measured_ = 0;
  LayerNormCache final_ln_;
  Mat cls_normed_;
  std::optional<Mat> logits_;
};

struct ForwardResult {
  Mat logits;
  int prediction = 0;
  FlopsReport flops;
  std::vector<GroupTrace> groups;
  double keep_rate = 1.0;
};

/// Fixed-decision forward. `decided` holds one decision per decided group.
ForwardResult model_forward(const WeightStore& w, std::span<const double> image,
                            std::span<const GroupDecision> decided,
                            const ForwardOptions& opts = {});

std::vector<ForwardResult> model_forward_batch(const WeightStore& w,
                                               std::span<const std::vector<double>> images,
                                               std::span<const GroupDecision> decided,
                                               const ForwardOptions& opts = {});

/// The same forward for a batch with per-sample decisions, executed on one
/// padded batch x tokens x C tensor with token and channel masks. Returns one
/// logits row per sample.
Mat masked_model_forward(const WeightStore& w, std::span<const std::vector<double>> images,
                         std::span<const std::vector<GroupDecision>> decided,
                         const ForwardOptions& opts = {});

}  // namespace adavit
