#pragma once

// End-to-end pipelines: synthetic data, meta-network pretraining, selector
// training with Result-to-Go rollouts, backbone fine-tuning and evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "adavit/checkpoint.hpp"
#include "adavit/elastic_model.hpp"
#include "adavit/selector.hpp"

namespace adavit {

// ---------------------------------------------------------------------------
// Configuration. JSON schema documented in README; every key is optional and
// unknown keys are rejected.

struct DatasetSpec {
  std::string source = "synthetic";  // or "file"
  std::string train_path;            // file source only
  std::string test_path;
  std::size_t train_samples = 1024;
  std::size_t test_samples = 512;
  double hard_fraction = 0.5;
  /// Fraction of the remaining patches that carry the class pattern.
  double easy_complexity = 1.0;
  double hard_complexity = 0.0;
  double signal = 1.0;       // pattern amplitude in easy samples
  double hard_signal = 1.0;  // pattern amplitude in hard samples
  double noise = 0.2;        // pixel noise std
  /// When positive, a hard sample shows one of this many random prototypes of
  /// its class instead of the class pattern, which makes hard labels nonlinear
  /// in the pixels.
  std::size_t hard_prototypes = 0;
  std::uint64_t pattern_seed = 7;

  void validate() const;
};

struct OptimConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double lr = 2e-3;
  double min_lr = 1e-5;
  double warmup_lr = 1e-5;
  std::size_t warmup_steps = 20;
  double weight_decay = 0.01;
  double grad_clip = 1.0;

  void validate(const char* section) const;
};

struct SelectorConfig {
  std::size_t iterations = 100;
  std::size_t batch_size = 64;  // samples per rollout batch
  SelectorInit init;
  PPOParams ppo;
  RewardParams reward;
};

enum class DecisionMode { per_sample, batch_average };

std::string_view to_string(DecisionMode m);
DecisionMode parse_decision_mode(std::string_view s);

struct EvalConfig {
  DecisionMode mode = DecisionMode::per_sample;
  std::size_t batch_size = 64;
  std::size_t workers = 1;
};

struct TrainConfig {
  std::uint64_t seed = 1;
  ElasticConfig model;
  DatasetSpec data;
  ForwardOptions forward;
  OptimConfig pretrain;
  SelectorConfig selector;
  OptimConfig finetune{2, 32, 2e-4, 1e-6, 1e-6, 0, 0.01, 1.0};
  EvalConfig eval;

  void validate() const;
};

/// Parses and validates; throws ConfigError naming the offending key.
TrainConfig parse_config(std::string_view json_text);
TrainConfig load_config(const std::filesystem::path& path);
/// Canonical JSON text (sorted keys, two-space indent, trailing newline).
std::string serialize_config(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Synthetic data.

struct DataSplits {
  Dataset train;
  Dataset test;
};

/// Class patterns live on patches. A sample of complexity c shows its class
/// pattern on 1 + round(c * (P - 1)) random patches and noise elsewhere.
DataSplits generate_synthetic(const DatasetSpec& spec, const ElasticConfig& cfg,
                              std::uint64_t seed);

/// Softmax regression on raw pixels fitted on `train`; returns accuracy on `eval`.
double linear_probe_accuracy(const Dataset& train, const Dataset& eval, std::size_t num_classes,
                             std::uint64_t seed);

/// Loads file datasets or generates synthetic ones.
DataSplits load_data(const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Meta-network pretraining.

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double lr = 0.0;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Random sub-architecture per step, all tokens, cross-entropy, AdamW with
/// warm-up + cosine schedule. Throws NumericError if the loss diverges.
WeightStore pretrain_meta(const TrainConfig& cfg, const Dataset& train,
                          const EpochCallback& on_epoch = {});

/// Accuracy of fixed per-block archs with all tokens.
double uniform_arch_accuracy(const WeightStore& w, const Dataset& d,
                             std::span<const BlockArch> archs, const ForwardOptions& opts);

// ---------------------------------------------------------------------------
// Selector training.

/// Replaces the sampled action of step `step` when set.
using ActionOverride = std::function<std::vector<double>(std::size_t step)>;

struct RolloutResult {
  Trajectory trajectory;
  int reference_prediction = 0;
  std::vector<GroupDecision> decisions;
};

/// Result-to-Go: all groups start at max width with every token; for each
/// decided group in order, observe the state after the preceding group, pick
/// that group's decision, run the rest of the network at the current settings
/// and score the outcome. Decisions persist for later steps.
RolloutResult rollout_result_to_go(const WeightStore& w, const SelectorNets& nets,
                                   std::span<const double> image, int label,
                                   const ForwardOptions& fwd, const RewardParams& reward,
                                   Rng& rng, std::size_t max_steps = SIZE_MAX,
                                   const ActionOverride& forced = {});

struct SelectorLogRow {
  std::size_t step = 0;  // decisions collected so far
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  double mean_reward = 0.0;
  double mean_flops_ratio = 0.0;
  double mean_keep_rate = 0.0;
};

using SelectorCallback = std::function<void(const SelectorLogRow&)>;

/// Alternates rollouts and PPO updates over `train`. The weights are not touched.
SelectorNets train_selector(const TrainConfig& cfg, const WeightStore& w, const Dataset& train,
                            std::vector<SelectorLogRow>* log = nullptr,
                            const SelectorCallback& on_iteration = {});

void write_selector_log(const std::filesystem::path& path,
                        std::span<const SelectorLogRow> rows);

/// Mean-action decisions for one sample, group by group.
std::vector<GroupDecision> greedy_decisions(const WeightStore& w, const SelectorNets& nets,
                                            std::span<const double> image,
                                            const ForwardOptions& fwd);

// ---------------------------------------------------------------------------
// Fine-tuning.

/// Cross-entropy fine-tuning under the frozen selector's mean-action decisions.
/// The batch loss comes from the masked batched forward.
WeightStore finetune_backbone(const TrainConfig& cfg, const WeightStore& w,
                              const SelectorNets& nets, const Dataset& train,
                              const EpochCallback& on_epoch = {});

/// Mean cross-entropy of the masked batched forward and its gradient, computed
/// per sample under the same decisions.
double finetune_loss(const WeightStore& w, std::span<const std::vector<double>> images,
                     std::span<const int> labels,
                     std::span<const std::vector<GroupDecision>> decisions,
                     const ForwardOptions& fwd, WeightStore* grad = nullptr);

// ---------------------------------------------------------------------------
// Evaluation.

struct SampleRecord {
  std::size_t id = 0;
  int label = 0;
  int prediction = 0;
  bool hard = false;
  std::uint64_t macs = 0;
  double flops_ratio = 1.0;
  double keep_rate = 1.0;
  /// Mean over decided blocks of (phi / C + hidden / H_max) / 2.
  double width_fraction = 1.0;
  std::vector<GroupTrace> groups;
};

struct EvalReport {
  std::string label;  // free-form tag, e.g. strategy or sweep value
  std::size_t samples = 0;
  double accuracy = 0.0;
  double mean_gmacs = 0.0;
  double mean_flops_ratio = 0.0;
  double keep_rate = 0.0;
  double width_fraction = 0.0;
  // Split by the dataset's hard flag (zero when the split is empty).
  double accuracy_easy = 0.0, accuracy_hard = 0.0;
  double width_easy = 0.0, width_hard = 0.0;
  double keep_easy = 0.0, keep_hard = 0.0;
  /// [decided block][choice index] counts.
  std::vector<std::vector<std::size_t>> embed_histogram;
  std::vector<std::vector<std::size_t>> mlp_histogram;
  std::vector<SampleRecord> records;
};

struct EvalOptions {
  DecisionMode mode = DecisionMode::per_sample;
  std::size_t batch_size = 64;
  std::size_t workers = 1;
};

/// `nets == nullptr` evaluates the full-width, keep-all model.
EvalReport evaluate(const WeightStore& w, const SelectorNets* nets, const Dataset& data,
                    const ForwardOptions& fwd, const EvalOptions& opts);

/// Fixed decisions for every sample.
EvalReport evaluate_fixed(const WeightStore& w, std::span<const GroupDecision> decided,
                          const Dataset& data, const ForwardOptions& fwd);

std::string report_json(const EvalReport& r);

/// One JSON object per sample per group.
void write_decision_trace(const std::filesystem::path& path, const EvalReport& r);

struct CurvePoint {
  std::string label;
  double gmacs = 0.0;
  double accuracy = 0.0;
  double keep_rate = 0.0;
};

/// Accuracy-vs-GMACs points sorted ascending by GMACs, written as
/// `<stem>.csv` and `<stem>.json`.
std::vector<CurvePoint> emit_curves(std::span<const EvalReport> reports,
                                    const std::filesystem::path& stem);
std::vector<CurvePoint> read_curves_csv(const std::filesystem::path& path);

}  // namespace adavit
