#pragma once

// PPO actor-critic that picks per-group widths and token keep ratios.
//
// The policy is a diagonal Gaussian around a sigmoid-squashed mean with a
// learnable, state-independent log-std. Samples are clamped to [0,1]; the
// log-probability is taken on the unclamped sample.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "adavit/architecture.hpp"
#include "adavit/numerics.hpp"

namespace adavit {

struct DenseLayer {
  Mat w;  // out x in
  Mat b;  // 1 x out

  bool operator==(const DenseLayer&) const = default;
};

/// Three fully connected layers with tanh between them.
struct ThreeLayerNet {
  DenseLayer l1, l2, l3;

  static ThreeLayerNet init(std::size_t in, std::size_t hidden, std::size_t out,
                            double out_gain, Rng& rng);
  std::size_t in_dim() const { return l1.w.cols; }
  std::size_t out_dim() const { return l3.w.rows; }
  std::vector<std::span<double>> spans();

  bool operator==(const ThreeLayerNet&) const = default;
};

struct ThreeLayerCache {
  Mat x, a1, a2;  // input and post-tanh activations
};

/// Rows of `x` are independent inputs.
Mat net_forward(const ThreeLayerNet& net, const Mat& x, ThreeLayerCache* cache = nullptr);
/// Accumulates parameter gradients into `grad`; returns d(loss)/d(x).
Mat net_backward(const ThreeLayerNet& net, const ThreeLayerCache& cache, const Mat& dout,
                 ThreeLayerNet& grad);

struct SelectorInit {
  std::size_t hidden = 256;
  double initial_log_std = -1.0;
  /// Initial policy mean for every action component (set through the output
  /// bias), e.g. close to 1 to start near max width and keep-all.
  double initial_mean = 0.5;
  double actor_out_gain = 0.01;
  double critic_out_gain = 1.0;
};

constexpr double kMinLogStd = -5.0;
constexpr double kMaxLogStd = 1.0;

inline constexpr double kStateClip = 5.0;

struct SelectorNets {
  TokenStrategy strategy = TokenStrategy::prune;
  ThreeLayerNet actor;
  Mat log_std;  // 1 x action_dim
  ThreeLayerNet critic;
  /// Fixed input normalization, (state - shift) * scale. Identity until calibrated.
  Mat state_shift;  // 1 x state_dim
  Mat state_scale;  // 1 x state_dim

  static SelectorNets init(std::size_t state_dim, std::size_t action_dim,
                           TokenStrategy strategy, const SelectorInit& opts, Rng& rng);
  /// state_dim = token count incl. CLS, action_dim from the config and strategy.
  static SelectorNets init(const ElasticConfig& cfg, TokenStrategy strategy,
                           const SelectorInit& opts, Rng& rng);

  std::size_t state_dim() const { return actor.in_dim(); }
  std::size_t action_dim() const { return actor.out_dim(); }

  /// Actor parameters then log-std.
  std::vector<std::span<double>> actor_spans();
  std::vector<std::span<double>> critic_spans();
  void clamp_log_std();
  /// Per-dimension mean and inverse std over `states`; dimensions with std
  /// below 1e-6 keep scale 1.
  void calibrate(std::span<const std::vector<double>> states);
  /// Applies the input normalization to one state, clipped to +-kStateClip.
  std::vector<double> normalize(std::span<const double> state) const;

  bool operator==(const SelectorNets&) const = default;
};

struct PolicyOutput {
  std::vector<double> mean;
  std::vector<double> log_std;
};

PolicyOutput actor_forward(const SelectorNets& nets, std::span<const double> state);
double critic_value(const SelectorNets& nets, std::span<const double> state);

struct SampledAction {
  std::vector<double> raw;     // before clamping
  std::vector<double> action;  // clamped to [0,1]
  double log_prob = 0.0;       // of `raw`
};

double gaussian_log_prob(std::span<const double> x, std::span<const double> mean,
                         std::span<const double> log_std);
/// Differential entropy of the diagonal Gaussian.
double gaussian_entropy(std::span<const double> log_std);

/// Deterministic mode returns the mean.
SampledAction sample_action(const PolicyOutput& policy, Rng& rng, bool deterministic = false);

struct RewardParams {
  double a_f = 0.03;
  double a_t = 0.2;
  bool smooth = true;

  void validate() const;
};

/// r = r_acc - a_f * flops_ratio - a_t * keep_rate.
double compute_reward(int prediction, int reference_prediction, int label, double flops_ratio,
                      double keep_rate, const RewardParams& p);

struct Transition {
  std::vector<double> state;
  std::vector<double> raw_action;
  std::vector<double> action;
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool terminal = false;
  // Diagnostics carried for logging.
  double flops_ratio = 1.0;
  double keep_rate = 1.0;
  bool correct = false;
};

struct Trajectory {
  std::vector<Transition> steps;
};

struct PPOParams {
  double discount = 0.99;
  double gae_lambda = 0.95;
  double clip_eps = 0.2;
  double entropy_coef = 0.0;
  double actor_lr = 1e-4;
  double critic_lr = 5e-3;
  double grad_clip_norm = 0.5;
  std::size_t epochs = 4;
  std::size_t minibatch = 64;

  void validate() const;
};

struct AdvantageEstimate {
  std::vector<double> advantages;
  std::vector<double> returns;     // advantage + value
  std::vector<double> td_targets;  // r + discount * V(next) * (1 - terminal)
};

AdvantageEstimate compute_gae(const Trajectory& t, double discount, double gae_lambda);

/// In place: zero mean, unit (population) std. Single entries become zero.
void normalize_advantages(std::span<double> adv);

/// One flattened decision step ready for the update.
struct PpoSample {
  std::vector<double> state;
  std::vector<double> raw_action;
  double old_log_prob = 0.0;
  double advantage = 0.0;
  double target = 0.0;
};

struct PpoLoss {
  double actor = 0.0;  // clipped surrogate minus entropy bonus
  double critic = 0.0;
  double entropy = 0.0;
  double clip_fraction = 0.0;
  double approx_kl = 0.0;
};

/// Loss over a minibatch. With `grad` set, accumulates analytic gradients of
/// actor + critic into it (same shape as `nets`).
PpoLoss ppo_loss(const SelectorNets& nets, std::span<const PpoSample> batch,
                 const PPOParams& p, SelectorNets* grad = nullptr);

std::vector<PpoSample> flatten_trajectories(std::span<const Trajectory> trajectories,
                                            const PPOParams& p);

/// Holds the optimiser state across updates.
class PpoTrainer {
public:
  PpoTrainer(SelectorNets& nets, PPOParams params);

  /// Several epochs of shuffled minibatches over the batch; advantages are
  /// normalised once per call. Throws NumericError on a non-finite loss.
  PpoLoss update(std::span<const Trajectory> trajectories, Rng& rng);

  const PPOParams& params() const { return params_; }

private:
  SelectorNets* nets_;
  PPOParams params_;
  AdamW actor_opt_;
  AdamW critic_opt_;
};

}  // namespace adavit
