#include "adavit/selector.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace adavit {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)

std::span<double> vec(Mat& m) { return {m.data.data(), m.data.size()}; }

Mat dense(const DenseLayer& l, const Mat& x) {
  Mat y = matmul_nt(x, l.w);
  add_row_bias(y, l.b.data);
  return y;
}

void tanh_inplace(Mat& m) {
  for (double& v : m.data) v = std::tanh(v);
}

void zero_grad(SelectorNets& g) {
  for (auto s : g.actor_spans()) std::ranges::fill(s, 0.0);
  for (auto s : g.critic_spans()) std::ranges::fill(s, 0.0);
}

std::vector<std::span<const double>> const_views(const std::vector<std::span<double>>& v) {
  return {v.begin(), v.end()};
}

std::vector<std::size_t> sizes_of(const std::vector<std::span<double>>& v) {
  std::vector<std::size_t> out;
  for (auto s : v) out.push_back(s.size());
  return out;
}

}  // namespace

ThreeLayerNet ThreeLayerNet::init(std::size_t in, std::size_t hidden, std::size_t out,
                                  double out_gain, Rng& rng) {
  const double g = std::numbers::sqrt2;
  ThreeLayerNet n;
  n.l1 = {orthogonal_init(hidden, in, g, rng), Mat(1, hidden)};
  n.l2 = {orthogonal_init(hidden, hidden, g, rng), Mat(1, hidden)};
  n.l3 = {orthogonal_init(out, hidden, out_gain, rng), Mat(1, out)};
  return n;
}

std::vector<std::span<double>> ThreeLayerNet::spans() {
  return {vec(l1.w), vec(l1.b), vec(l2.w), vec(l2.b), vec(l3.w), vec(l3.b)};
}

Mat net_forward(const ThreeLayerNet& net, const Mat& x, ThreeLayerCache* cache) {
  if (x.cols != net.in_dim())
    throw DimensionError("net_forward: input width " + std::to_string(x.cols) + ", expected " +
                         std::to_string(net.in_dim()));
  Mat a1 = dense(net.l1, x);
  tanh_inplace(a1);
  Mat a2 = dense(net.l2, a1);
  tanh_inplace(a2);
  Mat out = dense(net.l3, a2);
  if (cache) *cache = {x, std::move(a1), std::move(a2)};
  return out;
}

Mat net_backward(const ThreeLayerNet& net, const ThreeLayerCache& cache, const Mat& dout,
                 ThreeLayerNet& grad) {
  add_inplace(grad.l3.w, matmul_tn(dout, cache.a2));
  accumulate_col_sums(vec(grad.l3.b), dout);
  Mat d2 = matmul(dout, net.l3.w);
  for (std::size_t i = 0; i < d2.size(); ++i) d2.data[i] *= 1.0 - cache.a2.data[i] * cache.a2.data[i];
  add_inplace(grad.l2.w, matmul_tn(d2, cache.a1));
  accumulate_col_sums(vec(grad.l2.b), d2);
  Mat d1 = matmul(d2, net.l2.w);
  for (std::size_t i = 0; i < d1.size(); ++i) d1.data[i] *= 1.0 - cache.a1.data[i] * cache.a1.data[i];
  add_inplace(grad.l1.w, matmul_tn(d1, cache.x));
  accumulate_col_sums(vec(grad.l1.b), d1);
  return matmul(d1, net.l1.w);
}

SelectorNets SelectorNets::init(std::size_t state_dim, std::size_t action_dim,
                                TokenStrategy strategy, const SelectorInit& opts, Rng& rng) {
  if (!(opts.initial_mean > 0.0 && opts.initial_mean < 1.0))
    throw ConfigError("selector initial_mean must lie in (0,1)");
  SelectorNets n;
  n.strategy = strategy;
  n.actor = ThreeLayerNet::init(state_dim, opts.hidden, action_dim, opts.actor_out_gain, rng);
  n.actor.l3.b.fill(std::log(opts.initial_mean / (1.0 - opts.initial_mean)));
  n.log_std = Mat(1, action_dim, std::clamp(opts.initial_log_std, kMinLogStd, kMaxLogStd));
  n.critic = ThreeLayerNet::init(state_dim, opts.hidden, 1, opts.critic_out_gain, rng);
  n.state_shift = Mat(1, state_dim, 0.0);
  n.state_scale = Mat(1, state_dim, 1.0);
  return n;
}

SelectorNets SelectorNets::init(const ElasticConfig& cfg, TokenStrategy strategy,
                                const SelectorInit& opts, Rng& rng) {
  return init(cfg.tokens(), ::adavit::action_dim(cfg, strategy), strategy, opts, rng);
}

std::vector<std::span<double>> SelectorNets::actor_spans() {
  auto s = actor.spans();
  s.push_back(vec(log_std));
  return s;
}

std::vector<std::span<double>> SelectorNets::critic_spans() { return critic.spans(); }

void SelectorNets::clamp_log_std() {
  for (double& v : log_std.data) v = std::clamp(v, kMinLogStd, kMaxLogStd);
}

void SelectorNets::calibrate(std::span<const std::vector<double>> states) {
  const std::size_t sd = state_dim();
  state_shift = Mat(1, sd, 0.0);
  state_scale = Mat(1, sd, 1.0);
  if (states.empty()) return;
  const double n = static_cast<double>(states.size());
  for (const auto& st : states) {
    if (st.size() != sd) throw DimensionError("calibrate: state size");
    for (std::size_t d = 0; d < sd; ++d) state_shift(0, d) += st[d] / n;
  }
  for (std::size_t d = 0; d < sd; ++d) {
    double var = 0.0;
    for (const auto& st : states) var += (st[d] - state_shift(0, d)) * (st[d] - state_shift(0, d));
    const double sdev = std::sqrt(var / n);
    state_scale(0, d) = sdev > 1e-6 ? 1.0 / sdev : 1.0;
  }
}

std::vector<double> SelectorNets::normalize(std::span<const double> state) const {
  if (state.size() != state_dim()) throw DimensionError("selector: state size");
  std::vector<double> out(state.size());
  for (std::size_t d = 0; d < state.size(); ++d)
    out[d] = std::clamp((state[d] - state_shift(0, d)) * state_scale(0, d), -kStateClip, kStateClip);
  return out;
}

PolicyOutput actor_forward(const SelectorNets& nets, std::span<const double> state) {
  Mat x(1, state.size());
  std::ranges::copy(nets.normalize(state), x.data.begin());
  const Mat z = net_forward(nets.actor, x);
  PolicyOutput p;
  p.mean.resize(z.cols);
  for (std::size_t d = 0; d < z.cols; ++d) p.mean[d] = sigmoid(z(0, d));
  p.log_std = nets.log_std.data;
  return p;
}

double critic_value(const SelectorNets& nets, std::span<const double> state) {
  Mat x(1, state.size());
  std::ranges::copy(nets.normalize(state), x.data.begin());
  return net_forward(nets.critic, x)(0, 0);
}

double gaussian_log_prob(std::span<const double> x, std::span<const double> mean,
                         std::span<const double> log_std) {
  double lp = 0.0;
  for (std::size_t d = 0; d < x.size(); ++d) {
    const double z = (x[d] - mean[d]) * std::exp(-log_std[d]);
    lp += -0.5 * z * z - log_std[d] - kHalfLog2Pi;
  }
  return lp;
}

double gaussian_entropy(std::span<const double> log_std) {
  double h = 0.0;
  for (double s : log_std) h += s + 0.5 + kHalfLog2Pi;
  return h;
}

SampledAction sample_action(const PolicyOutput& policy, Rng& rng, bool deterministic) {
  SampledAction a;
  a.raw = policy.mean;
  if (!deterministic) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (std::size_t d = 0; d < a.raw.size(); ++d) a.raw[d] += std::exp(policy.log_std[d]) * n(rng);
  }
  a.action = a.raw;
  for (double& v : a.action) v = std::clamp(v, 0.0, 1.0);
  a.log_prob = gaussian_log_prob(a.raw, policy.mean, policy.log_std);
  return a;
}

void RewardParams::validate() const {
  if (!(a_f >= 0.0)) throw ConfigError("reward.a_f must be nonnegative");
  if (!(a_t >= 0.0)) throw ConfigError("reward.a_t must be nonnegative");
}

double compute_reward(int prediction, int reference_prediction, int label, double flops_ratio,
                      double keep_rate, const RewardParams& p) {
  const double truth = prediction == label ? 1.0 : 0.0;
  const double acc = p.smooth && prediction == reference_prediction ? 1.0 : truth;
  return acc - p.a_f * flops_ratio - p.a_t * keep_rate;
}

void PPOParams::validate() const {
  if (!(discount >= 0.0 && discount <= 1.0)) throw ConfigError("ppo.discount must lie in [0,1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0))
    throw ConfigError("ppo.gae_lambda must lie in [0,1]");
  if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw ConfigError("ppo.clip_eps must lie in (0,1)");
  if (!(entropy_coef >= 0.0)) throw ConfigError("ppo.entropy_coef must be nonnegative");
  if (!(actor_lr > 0.0) || !(critic_lr > 0.0)) throw ConfigError("ppo learning rates must be positive");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("ppo.grad_clip_norm must be positive");
  if (epochs == 0 || minibatch == 0) throw ConfigError("ppo.epochs and ppo.minibatch must be positive");
}

AdvantageEstimate compute_gae(const Trajectory& t, double discount, double gae_lambda) {
  const std::size_t n = t.steps.size();
  AdvantageEstimate e;
  e.advantages.assign(n, 0.0);
  e.returns.assign(n, 0.0);
  e.td_targets.assign(n, 0.0);
  double running = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const Transition& s = t.steps[i];
    const bool last = s.terminal || i + 1 == n;
    const double next_v = last ? 0.0 : t.steps[i + 1].value;
    e.td_targets[i] = s.reward + discount * next_v;
    const double delta = e.td_targets[i] - s.value;
    running = delta + (last ? 0.0 : discount * gae_lambda * running);
    e.advantages[i] = running;
    e.returns[i] = running + s.value;
  }
  return e;
}

void normalize_advantages(std::span<double> adv) {
  if (adv.empty()) return;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : adv) a = sd > 1e-12 ? (a - mean) / sd : 0.0;
}

PpoLoss ppo_loss(const SelectorNets& nets, std::span<const PpoSample> batch,
                 const PPOParams& p, SelectorNets* grad) {
  const std::size_t b = batch.size();
  const std::size_t sd = nets.state_dim();
  const std::size_t ad = nets.action_dim();
  if (b == 0) throw std::invalid_argument("ppo_loss: empty batch");
  Mat x(b, sd);
  for (std::size_t i = 0; i < b; ++i) {
    if (batch[i].state.size() != sd || batch[i].raw_action.size() != ad)
      throw DimensionError("ppo_loss: sample shape");
    std::ranges::copy(nets.normalize(batch[i].state), x.row(i).begin());
  }
  ThreeLayerCache ac, cc;
  const Mat z = net_forward(nets.actor, x, grad ? &ac : nullptr);
  const Mat v = net_forward(nets.critic, x, grad ? &cc : nullptr);
  const std::span<const double> log_std = nets.log_std.data;
  const double inv_b = 1.0 / static_cast<double>(b);

  PpoLoss loss;
  loss.entropy = gaussian_entropy(log_std);
  Mat dz(b, ad);
  std::vector<double> dlog_std(ad, -p.entropy_coef);
  Mat dv(b, 1);
  std::vector<double> mean(ad);
  for (std::size_t i = 0; i < b; ++i) {
    const PpoSample& s = batch[i];
    for (std::size_t d = 0; d < ad; ++d) mean[d] = sigmoid(z(i, d));
    const double lp = gaussian_log_prob(s.raw_action, mean, log_std);
    const double ratio = std::exp(lp - s.old_log_prob);
    const double clipped = std::clamp(ratio, 1.0 - p.clip_eps, 1.0 + p.clip_eps);
    const double surr1 = ratio * s.advantage;
    const double surr2 = clipped * s.advantage;
    loss.actor -= std::min(surr1, surr2) * inv_b;
    loss.approx_kl += (s.old_log_prob - lp) * inv_b;
    if (std::abs(ratio - 1.0) > p.clip_eps) loss.clip_fraction += inv_b;
    const double diff = v(i, 0) - s.target;
    loss.critic += diff * diff * inv_b;
    if (!grad) continue;
    dv(i, 0) = 2.0 * diff * inv_b;
    if (surr1 <= surr2) {
      const double dlp = -ratio * s.advantage * inv_b;
      for (std::size_t d = 0; d < ad; ++d) {
        const double var_inv = std::exp(-2.0 * log_std[d]);
        const double r = s.raw_action[d] - mean[d];
        dz(i, d) = dlp * r * var_inv * mean[d] * (1.0 - mean[d]);
        dlog_std[d] += dlp * (r * r * var_inv - 1.0);
      }
    }
  }
  loss.actor -= p.entropy_coef * loss.entropy;
  if (!std::isfinite(loss.actor) || !std::isfinite(loss.critic))
    throw NumericError("ppo_loss: non-finite loss (actor " + std::to_string(loss.actor) +
                       ", critic " + std::to_string(loss.critic) + ")");
  if (grad) {
    net_backward(nets.actor, ac, dz, grad->actor);
    for (std::size_t d = 0; d < ad; ++d) grad->log_std(0, d) += dlog_std[d];
    net_backward(nets.critic, cc, dv, grad->critic);
  }
  return loss;
}

std::vector<PpoSample> flatten_trajectories(std::span<const Trajectory> trajectories,
                                            const PPOParams& p) {
  std::vector<PpoSample> out;
  for (const Trajectory& t : trajectories) {
    const AdvantageEstimate e = compute_gae(t, p.discount, p.gae_lambda);
    for (std::size_t i = 0; i < t.steps.size(); ++i)
      out.push_back({t.steps[i].state, t.steps[i].raw_action, t.steps[i].log_prob,
                     e.advantages[i], e.td_targets[i]});
  }
  std::vector<double> adv(out.size());
  for (std::size_t i = 0; i < out.size(); ++i) adv[i] = out[i].advantage;
  normalize_advantages(adv);
  for (std::size_t i = 0; i < out.size(); ++i) out[i].advantage = adv[i];
  return out;
}

PpoTrainer::PpoTrainer(SelectorNets& nets, PPOParams params)
    : nets_(&nets),
      params_(params),
      actor_opt_(sizes_of(nets.actor_spans())),
      critic_opt_(sizes_of(nets.critic_spans())) {
  params_.validate();
}

PpoLoss PpoTrainer::update(std::span<const Trajectory> trajectories, Rng& rng) {
  const std::vector<PpoSample> samples = flatten_trajectories(trajectories, params_);
  if (samples.empty()) throw std::invalid_argument("PpoTrainer::update: no transitions");
  SelectorNets grad = *nets_;
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  PpoLoss mean;
  std::size_t batches = 0;
  std::vector<PpoSample> mb;
  for (std::size_t epoch = 0; epoch < params_.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += params_.minibatch) {
      const std::size_t end = std::min(order.size(), start + params_.minibatch);
      mb.clear();
      for (std::size_t i = start; i < end; ++i) mb.push_back(samples[order[i]]);
      zero_grad(grad);
      const PpoLoss l = ppo_loss(*nets_, mb, params_, &grad);
      auto ag = grad.actor_spans();
      auto cg = grad.critic_spans();
      clip_grad_norm(ag, params_.grad_clip_norm);
      clip_grad_norm(cg, params_.grad_clip_norm);
      auto ap = nets_->actor_spans();
      auto cp = nets_->critic_spans();
      const auto agc = const_views(ag);
      const auto cgc = const_views(cg);
      actor_opt_.step(ap, agc, params_.actor_lr);
      critic_opt_.step(cp, cgc, params_.critic_lr);
      nets_->clamp_log_std();
      mean.actor += l.actor;
      mean.critic += l.critic;
      mean.entropy += l.entropy;
      mean.clip_fraction += l.clip_fraction;
      mean.approx_kl += l.approx_kl;
      ++batches;
    }
  }
  const double inv = 1.0 / static_cast<double>(batches);
  mean.actor *= inv;
  mean.critic *= inv;
  mean.entropy *= inv;
  mean.clip_fraction *= inv;
  mean.approx_kl *= inv;
  return mean;
}

}  // namespace adavit
