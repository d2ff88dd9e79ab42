#include "adavit/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace adavit {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration.

std::string_view to_string(DecisionMode m) {
  return m == DecisionMode::per_sample ? "per-sample" : "batch-avg";
}

DecisionMode parse_decision_mode(std::string_view s) {
  if (s == "per-sample") return DecisionMode::per_sample;
  if (s == "batch-avg") return DecisionMode::batch_average;
  throw ConfigError("unknown decision mode '" + std::string(s) + "'");
}

void DatasetSpec::validate() const {
  if (source != "synthetic" && source != "file")
    throw ConfigError("data.source must be \"synthetic\" or \"file\"");
  if (source == "file" && (train_path.empty() || test_path.empty()))
    throw ConfigError("data.train_path and data.test_path are required for file datasets");
  if (source == "synthetic" && (train_samples == 0 || test_samples == 0))
    throw ConfigError("data.train_samples and data.test_samples must be positive");
  auto unit = [](double v, const char* key) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string("data.") + key + " must lie in [0,1]");
  };
  unit(hard_fraction, "hard_fraction");
  unit(easy_complexity, "easy_complexity");
  unit(hard_complexity, "hard_complexity");
  if (!(signal > 0.0) || !(hard_signal > 0.0)) throw ConfigError("data signal amplitudes must be positive");
  if (!(noise >= 0.0)) throw ConfigError("data.noise must be nonnegative");
}

void OptimConfig::validate(const char* section) const {
  const std::string s(section);
  if (batch_size == 0) throw ConfigError(s + ".batch_size must be at least 1");
  if (!(lr > 0.0) || !(min_lr > 0.0) || !(warmup_lr > 0.0))
    throw ConfigError(s + " learning rates must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError(s + ".weight_decay must be nonnegative");
  if (!(grad_clip > 0.0)) throw ConfigError(s + ".grad_clip must be positive");
}

void TrainConfig::validate() const {
  model.validate();
  data.validate();
  pretrain.validate("pretrain");
  finetune.validate("finetune");
  selector.ppo.validate();
  selector.reward.validate();
  if (selector.batch_size == 0) throw ConfigError("selector.batch_size must be at least 1");
  if (selector.init.hidden == 0) throw ConfigError("selector.hidden must be positive");
  if (!(selector.init.initial_mean > 0.0 && selector.init.initial_mean < 1.0))
    throw ConfigError("selector.initial_mean must lie in (0,1)");
  if (eval.batch_size == 0) throw ConfigError("eval.batch_size must be at least 1");
  if (eval.workers == 0) throw ConfigError("eval.workers must be at least 1");
}

namespace {

// Reads keys from one JSON object and rejects anything it did not consume.
class ObjectReader {
public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  void count(const char* key, std::size_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
      out = v->get<std::size_t>();
    }
  }
  void u64(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void real(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void boolean(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void text(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void counts(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_number_unsigned()) throw ConfigError(where(key) + " entries must be integers");
        out.push_back(e.get<std::size_t>());
      }
    }
  }
  void reals(const char* key, std::vector<double>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      out.clear();
      for (const json& e : *v) {
        if (!e.is_number()) throw ConfigError(where(key) + " entries must be numbers");
        out.push_back(e.get<double>());
      }
    }
  }
  template <class F>
  void object(const char* key, F&& f) {
    if (const json* v = take(key)) {
      ObjectReader sub(*v, path_.empty() ? key : path_ + "." + key);
      f(sub);
      sub.finish();
    }
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key " + where(it.key().c_str()));
  }

private:
  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where(const char* key = nullptr) const {
    std::string p = path_;
    if (key) p = p.empty() ? key : p + "." + key;
    return "'" + (p.empty() ? std::string("<root>") : p) + "'";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_optim(ObjectReader& r, OptimConfig& o) {
  r.count("epochs", o.epochs);
  r.count("batch_size", o.batch_size);
  r.real("lr", o.lr);
  r.real("min_lr", o.min_lr);
  r.real("warmup_lr", o.warmup_lr);
  r.count("warmup_steps", o.warmup_steps);
  r.real("weight_decay", o.weight_decay);
  r.real("grad_clip", o.grad_clip);
}

json optim_json(const OptimConfig& o) {
  return {{"epochs", o.epochs},     {"batch_size", o.batch_size},
          {"lr", o.lr},             {"min_lr", o.min_lr},
          {"warmup_lr", o.warmup_lr}, {"warmup_steps", o.warmup_steps},
          {"weight_decay", o.weight_decay}, {"grad_clip", o.grad_clip}};
}

std::string_view importance_name(ImportanceMode m) {
  return m == ImportanceMode::attention ? "attention" : "value-weighted";
}
std::string_view similarity_name(SimilarityFeature f) {
  return f == SimilarityFeature::tokens ? "tokens" : "keys";
}
std::string_view merge_name(MergeMode m) { return m == MergeMode::sum ? "sum" : "mean"; }

}  // namespace

TrainConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  TrainConfig c;
  ObjectReader root(j, "");
  root.u64("seed", c.seed);
  root.object("model", [&](ObjectReader& r) {
    r.count("depth", c.model.depth);
    r.count("heads", c.model.heads);
    r.counts("embed_choices", c.model.embed_choices);
    r.reals("mlp_ratio_choices", c.model.mlp_ratio_choices);
    r.count("group_size", c.model.group_size);
    r.count("image_side", c.model.image_side);
    r.count("patch_side", c.model.patch_side);
    r.count("channels", c.model.channels);
    r.count("num_classes", c.model.num_classes);
  });
  root.object("data", [&](ObjectReader& r) {
    r.text("source", c.data.source);
    r.text("train_path", c.data.train_path);
    r.text("test_path", c.data.test_path);
    r.count("train_samples", c.data.train_samples);
    r.count("test_samples", c.data.test_samples);
    r.real("hard_fraction", c.data.hard_fraction);
    r.real("easy_complexity", c.data.easy_complexity);
    r.real("hard_complexity", c.data.hard_complexity);
    r.real("signal", c.data.signal);
    r.real("hard_signal", c.data.hard_signal);
    r.real("noise", c.data.noise);
    r.u64("pattern_seed", c.data.pattern_seed);
    r.count("hard_prototypes", c.data.hard_prototypes);
  });
  root.object("forward", [&](ObjectReader& r) {
    std::string s = std::string(to_string(c.forward.strategy));
    r.text("strategy", s);
    c.forward.strategy = parse_strategy(s);
    std::string imp = std::string(importance_name(c.forward.importance));
    r.text("importance", imp);
    if (imp == "attention") c.forward.importance = ImportanceMode::attention;
    else if (imp == "value-weighted") c.forward.importance = ImportanceMode::value_weighted;
    else throw ConfigError("'forward.importance' must be \"attention\" or \"value-weighted\"");
    std::string sim = std::string(similarity_name(c.forward.similarity));
    r.text("similarity", sim);
    if (sim == "tokens") c.forward.similarity = SimilarityFeature::tokens;
    else if (sim == "keys") c.forward.similarity = SimilarityFeature::keys;
    else throw ConfigError("'forward.similarity' must be \"tokens\" or \"keys\"");
    std::string mm = std::string(merge_name(c.forward.merge_mode));
    r.text("merge_mode", mm);
    if (mm == "sum") c.forward.merge_mode = MergeMode::sum;
    else if (mm == "mean") c.forward.merge_mode = MergeMode::mean;
    else throw ConfigError("'forward.merge_mode' must be \"sum\" or \"mean\"");
  });
  root.object("pretrain", [&](ObjectReader& r) { read_optim(r, c.pretrain); });
  root.object("finetune", [&](ObjectReader& r) { read_optim(r, c.finetune); });
  root.object("selector", [&](ObjectReader& r) {
    r.count("iterations", c.selector.iterations);
    r.count("batch_size", c.selector.batch_size);
    r.count("hidden", c.selector.init.hidden);
    r.real("initial_log_std", c.selector.init.initial_log_std);
    r.real("initial_mean", c.selector.init.initial_mean);
    r.real("actor_out_gain", c.selector.init.actor_out_gain);
    r.real("critic_out_gain", c.selector.init.critic_out_gain);
    r.object("ppo", [&](ObjectReader& p) {
      PPOParams& q = c.selector.ppo;
      p.real("discount", q.discount);
      p.real("gae_lambda", q.gae_lambda);
      p.real("clip_eps", q.clip_eps);
      p.real("entropy_coef", q.entropy_coef);
      p.real("actor_lr", q.actor_lr);
      p.real("critic_lr", q.critic_lr);
      p.real("grad_clip_norm", q.grad_clip_norm);
      p.count("epochs", q.epochs);
      p.count("minibatch", q.minibatch);
    });
    r.object("reward", [&](ObjectReader& p) {
      p.real("a_f", c.selector.reward.a_f);
      p.real("a_t", c.selector.reward.a_t);
      p.boolean("smooth", c.selector.reward.smooth);
    });
  });
  root.object("eval", [&](ObjectReader& r) {
    std::string m = std::string(to_string(c.eval.mode));
    r.text("mode", m);
    c.eval.mode = parse_decision_mode(m);
    r.count("batch_size", c.eval.batch_size);
    r.count("workers", c.eval.workers);
  });
  root.finish();
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const TrainConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["model"] = {{"depth", c.model.depth},
                {"heads", c.model.heads},
                {"embed_choices", c.model.embed_choices},
                {"mlp_ratio_choices", c.model.mlp_ratio_choices},
                {"group_size", c.model.group_size},
                {"image_side", c.model.image_side},
                {"patch_side", c.model.patch_side},
                {"channels", c.model.channels},
                {"num_classes", c.model.num_classes}};
  j["data"] = {{"source", c.data.source},
               {"train_path", c.data.train_path},
               {"test_path", c.data.test_path},
               {"train_samples", c.data.train_samples},
               {"test_samples", c.data.test_samples},
               {"hard_fraction", c.data.hard_fraction},
               {"easy_complexity", c.data.easy_complexity},
               {"hard_complexity", c.data.hard_complexity},
               {"signal", c.data.signal},
               {"hard_signal", c.data.hard_signal},
               {"noise", c.data.noise},
               {"pattern_seed", c.data.pattern_seed},
               {"hard_prototypes", c.data.hard_prototypes}};
  j["forward"] = {{"strategy", to_string(c.forward.strategy)},
                  {"importance", importance_name(c.forward.importance)},
                  {"similarity", similarity_name(c.forward.similarity)},
                  {"merge_mode", merge_name(c.forward.merge_mode)}};
  j["pretrain"] = optim_json(c.pretrain);
  j["finetune"] = optim_json(c.finetune);
  const PPOParams& p = c.selector.ppo;
  j["selector"] = {{"iterations", c.selector.iterations},
                   {"batch_size", c.selector.batch_size},
                   {"hidden", c.selector.init.hidden},
                   {"initial_log_std", c.selector.init.initial_log_std},
                   {"initial_mean", c.selector.init.initial_mean},
                   {"actor_out_gain", c.selector.init.actor_out_gain},
                   {"critic_out_gain", c.selector.init.critic_out_gain},
                   {"ppo",
                    {{"discount", p.discount},
                     {"gae_lambda", p.gae_lambda},
                     {"clip_eps", p.clip_eps},
                     {"entropy_coef", p.entropy_coef},
                     {"actor_lr", p.actor_lr},
                     {"critic_lr", p.critic_lr},
                     {"grad_clip_norm", p.grad_clip_norm},
                     {"epochs", p.epochs},
                     {"minibatch", p.minibatch}}},
                   {"reward",
                    {{"a_f", c.selector.reward.a_f},
                     {"a_t", c.selector.reward.a_t},
                     {"smooth", c.selector.reward.smooth}}}};
  j["eval"] = {{"mode", to_string(c.eval.mode)},
               {"batch_size", c.eval.batch_size},
               {"workers", c.eval.workers}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Synthetic data.

namespace {

Mat class_patterns(const DatasetSpec& spec, const ElasticConfig& cfg) {
  Rng rng(spec.pattern_seed);
  const std::size_t pd = cfg.patch_dim();
  const double gain = std::sqrt(static_cast<double>(pd));
  if (cfg.num_classes <= pd) return orthogonal_init(cfg.num_classes, pd, gain, rng);
  return random_normal(cfg.num_classes, pd, 1.0, rng);
}

Mat hard_prototypes(const DatasetSpec& spec, const ElasticConfig& cfg) {
  Rng rng(mix_seed(spec.pattern_seed, 1));
  Mat p = random_normal(cfg.num_classes * spec.hard_prototypes, cfg.patch_dim(), 1.0, rng);
  for (std::size_t r = 0; r < p.rows; ++r) {
    double norm = 0.0;
    for (double v : p.row(r)) norm += v * v;
    const double s = std::sqrt(static_cast<double>(p.cols) / norm);
    for (double& v : p.row(r)) v *= s;
  }
  return p;
}

Dataset make_split(const DatasetSpec& spec, const ElasticConfig& cfg, const Mat& patterns,
                   const Mat& prototypes, std::size_t count, Rng& rng) {
  const std::size_t side = cfg.image_side;
  const std::size_t ps = cfg.patch_side;
  const std::size_t grid = side / ps;
  const std::size_t p = cfg.num_patches();
  Dataset d;
  d.channels = cfg.channels;
  d.side = side;
  std::uniform_int_distribution<int> pick_label(0, static_cast<int>(cfg.num_classes) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::size_t> positions(p);
  for (std::size_t s = 0; s < count; ++s) {
    const int label = pick_label(rng);
    const bool hard = unit(rng) < spec.hard_fraction;
    const double complexity = hard ? spec.hard_complexity : spec.easy_complexity;
    const double amp = hard ? spec.hard_signal : spec.signal;
    const std::size_t informative =
        1 + round_half_up(complexity * static_cast<double>(p - 1));
    std::iota(positions.begin(), positions.end(), std::size_t{0});
    for (std::size_t i = 0; i < informative; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, p - 1);
      std::swap(positions[i], positions[pick(rng)]);
    }
    std::vector<bool> carries(p, false);
    for (std::size_t i = 0; i < informative; ++i) carries[positions[i]] = true;
    const bool use_prototypes = hard && spec.hard_prototypes > 0;
    const Mat& source = use_prototypes ? prototypes : patterns;
    std::size_t row = static_cast<std::size_t>(label);
    if (use_prototypes) {
      std::uniform_int_distribution<std::size_t> pick(0, spec.hard_prototypes - 1);
      row = row * spec.hard_prototypes + pick(rng);
    }
    std::vector<double> img(cfg.channels * side * side);
    for (std::size_t patch = 0; patch < p; ++patch) {
      const std::size_t py = patch / grid;
      const std::size_t px = patch % grid;
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < cfg.channels; ++ch)
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx, ++k) {
            double v = spec.noise * noise(rng);
            if (carries[patch]) v += amp * source(row, k);
            img[(ch * side + py * ps + dy) * side + px * ps + dx] =
                static_cast<double>(static_cast<float>(v));
          }
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
    d.hard.push_back(hard ? 1 : 0);
  }
  return d;
}

}  // namespace

DataSplits generate_synthetic(const DatasetSpec& spec, const ElasticConfig& cfg,
                              std::uint64_t seed) {
  spec.validate();
  cfg.validate();
  const Mat patterns = class_patterns(spec, cfg);
  const Mat prototypes = spec.hard_prototypes ? hard_prototypes(spec, cfg) : Mat();
  Rng train_rng(mix_seed(seed, 1));
  Rng test_rng(mix_seed(seed, 2));
  return {make_split(spec, cfg, patterns, prototypes, spec.train_samples, train_rng),
          make_split(spec, cfg, patterns, prototypes, spec.test_samples, test_rng)};
}

double linear_probe_accuracy(const Dataset& train, const Dataset& eval, std::size_t num_classes,
                             std::uint64_t seed) {
  if (train.size() == 0) throw std::invalid_argument("linear probe: empty training set");
  const std::size_t dim = train.images.front().size();
  auto design = [&](const Dataset& d) {
    Mat x(d.size(), dim + 1);
    for (std::size_t i = 0; i < d.size(); ++i) {
      std::ranges::copy(d.images[i], x.row(i).begin());
      x(i, dim) = 1.0;
    }
    return x;
  };
  const Mat xt = design(train);
  Rng rng(seed);
  Mat w = random_normal(num_classes, dim + 1, 0.01, rng);
  AdamW opt({w.size()});
  for (int step = 0; step < 300; ++step) {
    const CrossEntropy ce = softmax_cross_entropy(matmul_nt(xt, w), train.labels);
    Mat g = matmul_tn(ce.dlogits, xt);
    std::vector<std::span<double>> p{std::span<double>(w.data)};
    std::vector<std::span<const double>> gs{std::span<const double>(g.data)};
    opt.step(p, gs, 0.05);
  }
  const Mat logits = matmul_nt(design(eval), w);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    auto r = logits.row(i);
    if (std::max_element(r.begin(), r.end()) - r.begin() == eval.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

DataSplits load_data(const TrainConfig& cfg) {
  if (cfg.data.source == "synthetic") return generate_synthetic(cfg.data, cfg.model, cfg.seed);
  DataSplits s{load_dataset(cfg.data.train_path), load_dataset(cfg.data.test_path)};
  for (const Dataset* d : {&s.train, &s.test})
    if (d->side != cfg.model.image_side || d->channels != cfg.model.channels)
      throw ConfigError("dataset image shape does not match the model config");
  return s;
}

// ---------------------------------------------------------------------------
// Pretraining.

namespace {

void zero(WeightStore& g) {
  g.for_each_tensor([](const std::string&, Mat& m) { m.fill(0.0); });
}

std::vector<std::size_t> tensor_sizes(WeightStore& w) {
  std::vector<std::size_t> s;
  for (auto sp : w.spans()) s.push_back(sp.size());
  return s;
}

void apply_step(WeightStore& w, WeightStore& grad, AdamW& opt, double lr, double clip) {
  auto gs = grad.spans();
  clip_grad_norm(gs, clip);
  const std::vector<std::span<const double>> gc(gs.begin(), gs.end());
  auto ps = w.spans();
  opt.step(ps, gc, lr);
}

int argmax_row(const Mat& m, std::size_t r) {
  auto row = m.row(r);
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

CosineSchedule schedule_for(const OptimConfig& o, std::size_t total_steps) {
  return {o.lr, o.min_lr, o.warmup_lr, o.warmup_steps, std::max<std::size_t>(total_steps, 1)};
}

}  // namespace

WeightStore pretrain_meta(const TrainConfig& cfg, const Dataset& train,
                          const EpochCallback& on_epoch) {
  cfg.model.validate();
  const OptimConfig& o = cfg.pretrain;
  Rng rng(mix_seed(cfg.seed, 101));
  WeightStore w = WeightStore::init(cfg.model, rng);
  WeightStore grad = WeightStore::zeros_like(w);
  AdamW opt(tensor_sizes(w), AdamW::Options{0.9, 0.999, 1e-8, o.weight_decay});
  const std::size_t n = train.size();
  const std::size_t per_epoch = (n + o.batch_size - 1) / o.batch_size;
  const CosineSchedule sched = schedule_for(o, per_epoch * o.epochs);
  const std::size_t k = cfg.model.group_size;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    double lr = 0.0;
    for (std::size_t start = 0; start < n; start += o.batch_size) {
      const std::size_t end = std::min(n, start + o.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      const std::vector<BlockArch> archs = sample_random_arch(cfg.model, rng);
      zero(grad);
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t i = order[s];
        SampleRun run(w, train.images[i], cfg.forward, true);
        for (std::size_t g = 0; g < cfg.model.groups(); ++g)
          run.run_group(std::span(archs).subspan(g * k, k),
                        TokenDecision::keep_all(cfg.forward.strategy));
        const std::vector<int> label{train.labels[i]};
        CrossEntropy ce = softmax_cross_entropy(run.logits(), label);
        if (!std::isfinite(ce.loss))
          throw NumericError("pretraining diverged at step " + std::to_string(step));
        loss_sum += ce.loss;
        if (argmax_row(run.logits(), 0) == train.labels[i]) ++correct;
        scale_inplace(ce.dlogits, inv_b);
        run.backward(ce.dlogits, grad);
      }
      lr = sched.at(step++);
      apply_step(w, grad, opt, lr, o.grad_clip);
    }
    if (on_epoch)
      on_epoch({epoch, loss_sum / static_cast<double>(n),
                static_cast<double>(correct) / static_cast<double>(n), lr});
  }
  return w;
}

double uniform_arch_accuracy(const WeightStore& w, const Dataset& d,
                             std::span<const BlockArch> archs, const ForwardOptions& opts) {
  const std::size_t k = w.config.group_size;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    SampleRun run(w, d.images[i], opts);
    for (std::size_t g = 0; g < w.config.groups(); ++g)
      run.run_group(archs.subspan(g * k, k), TokenDecision::keep_all(opts.strategy));
    if (run.prediction() == d.labels[i]) ++correct;
  }
  return d.size() ? static_cast<double>(correct) / static_cast<double>(d.size()) : 0.0;
}

// ---------------------------------------------------------------------------
// Selector training.

RolloutResult rollout_result_to_go(const WeightStore& w, const SelectorNets& nets,
                                   std::span<const double> image, int label,
                                   const ForwardOptions& fwd, const RewardParams& reward,
                                   Rng& rng, std::size_t max_steps, const ActionOverride& forced) {
  const ElasticConfig& cfg = w.config;
  const std::size_t decided = cfg.decided_groups();
  if (nets.state_dim() != cfg.tokens() || nets.action_dim() != action_dim(cfg, fwd.strategy))
    throw DimensionError("rollout: selector shape does not match the model and strategy");
  RolloutResult out;
  out.decisions.assign(decided, full_decision(cfg, fwd.strategy));

  SampleRun prefix(w, image, fwd);
  prefix.run_first_group();
  {
    SampleRun ref = prefix;
    for (const GroupDecision& d : out.decisions) ref.run_group(d);
    out.reference_prediction = ref.prediction();
  }
  // One stream per step so a step's sample never depends on how many draws
  // earlier steps consumed.
  const std::uint64_t base = rng();
  const std::size_t steps = std::min(decided, max_steps);
  for (std::size_t j = 0; j < steps; ++j) {
    Transition t;
    t.state = prefix.state();
    const PolicyOutput policy = actor_forward(nets, t.state);
    t.value = critic_value(nets, t.state);
    SampledAction a;
    if (forced) {
      a.raw = forced(j);
      a.action = a.raw;
      for (double& v : a.action) v = std::clamp(v, 0.0, 1.0);
      a.log_prob = gaussian_log_prob(a.raw, policy.mean, policy.log_std);
    } else {
      Rng step_rng(mix_seed(base, j));
      a = sample_action(policy, step_rng);
    }
    out.decisions[j] = decode_action(a.action, cfg, fwd.strategy);
    SampleRun branch = prefix;
    branch.run_group(out.decisions[j]);
    SampleRun next = branch;
    for (std::size_t k = j + 1; k < decided; ++k) branch.run_group(out.decisions[k]);
    const int y = branch.prediction();
    t.flops_ratio = branch.flops().flops_ratio;
    t.keep_rate = branch.keep_rate();
    t.correct = y == label;
    t.reward = compute_reward(y, out.reference_prediction, label, t.flops_ratio, t.keep_rate,
                              reward);
    t.raw_action = std::move(a.raw);
    t.action = std::move(a.action);
    t.log_prob = a.log_prob;
    t.terminal = j + 1 == decided;
    out.trajectory.steps.push_back(std::move(t));
    prefix = std::move(next);
  }
  return out;
}

SelectorNets train_selector(const TrainConfig& cfg, const WeightStore& w, const Dataset& train,
                            std::vector<SelectorLogRow>* log,
                            const SelectorCallback& on_iteration) {
  const SelectorConfig& sc = cfg.selector;
  Rng init_rng(mix_seed(cfg.seed, 202));
  SelectorNets nets = SelectorNets::init(w.config, cfg.forward.strategy, sc.init, init_rng);
  const std::size_t n = train.size();
  if (n == 0) throw std::invalid_argument("train_selector: empty dataset");
  {
    // States of every decision step under the full decision.
    const GroupDecision full = full_decision(w.config, cfg.forward.strategy);
    std::vector<std::vector<double>> states;
    for (std::size_t i = 0; i < std::min<std::size_t>(n, 256); ++i) {
      SampleRun run(w, train.images[i], cfg.forward);
      run.run_first_group();
      while (!run.finished()) {
        states.push_back(run.state());
        run.run_group(full);
      }
    }
    nets.calibrate(states);
  }
  PpoTrainer trainer(nets, sc.ppo);
  Rng rng(mix_seed(cfg.seed, 303));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;
  std::size_t collected = 0;
  std::vector<Trajectory> batch;
  for (std::size_t it = 0; it < sc.iterations; ++it) {
    batch.clear();
    SelectorLogRow row;
    std::size_t transitions = 0;
    for (std::size_t b = 0; b < sc.batch_size; ++b) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const std::size_t i = order[cursor++];
      Rng srng(mix_seed(cfg.seed, 404, it, b));
      RolloutResult r = rollout_result_to_go(w, nets, train.images[i], train.labels[i],
                                             cfg.forward, sc.reward, srng);
      for (const Transition& t : r.trajectory.steps) {
        row.mean_reward += t.reward;
        row.mean_flops_ratio += t.flops_ratio;
        row.mean_keep_rate += t.keep_rate;
        ++transitions;
      }
      batch.push_back(std::move(r.trajectory));
    }
    const PpoLoss l = trainer.update(batch, rng);
    collected += transitions;
    const double inv = 1.0 / static_cast<double>(transitions);
    row.step = collected;
    row.actor_loss = l.actor;
    row.critic_loss = l.critic;
    row.entropy = l.entropy;
    row.mean_reward *= inv;
    row.mean_flops_ratio *= inv;
    row.mean_keep_rate *= inv;
    if (log) log->push_back(row);
    if (on_iteration) on_iteration(row);
  }
  return nets;
}

void write_selector_log(const std::filesystem::path& path, std::span<const SelectorLogRow> rows) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,actor_loss,critic_loss,entropy,mean_reward,mean_f,mean_t_r\n";
  char buf[512];
  for (const SelectorLogRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.step,
                  r.actor_loss, r.critic_loss, r.entropy, r.mean_reward, r.mean_flops_ratio,
                  r.mean_keep_rate);
    os << buf;
  }
}

namespace {

GroupDecision mean_decision(const WeightStore& w, const SelectorNets& nets, const SampleRun& run,
                            TokenStrategy strategy) {
  PolicyOutput p = actor_forward(nets, run.state());
  for (double& v : p.mean) v = std::clamp(v, 0.0, 1.0);
  return decode_action(p.mean, w.config, strategy);
}

}  // namespace

std::vector<GroupDecision> greedy_decisions(const WeightStore& w, const SelectorNets& nets,
                                            std::span<const double> image,
                                            const ForwardOptions& fwd) {
  SampleRun run(w, image, fwd);
  run.run_first_group();
  std::vector<GroupDecision> out;
  while (!run.finished()) {
    out.push_back(mean_decision(w, nets, run, fwd.strategy));
    run.run_group(out.back());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fine-tuning.

double finetune_loss(const WeightStore& w, std::span<const std::vector<double>> images,
                     std::span<const int> labels,
                     std::span<const std::vector<GroupDecision>> decisions,
                     const ForwardOptions& fwd, WeightStore* grad) {
  const bool masked_ok =
      fwd.similarity == SimilarityFeature::tokens && fwd.merge_mode == MergeMode::sum;
  Mat logits;
  if (masked_ok) {
    logits = masked_model_forward(w, images, decisions, fwd);
  } else {
    logits = Mat(images.size(), w.config.num_classes);
    for (std::size_t i = 0; i < images.size(); ++i) {
      const ForwardResult r = model_forward(w, images[i], decisions[i], fwd);
      std::ranges::copy(r.logits.data, logits.row(i).begin());
    }
  }
  const CrossEntropy ce = softmax_cross_entropy(logits, labels);
  if (!std::isfinite(ce.loss)) throw NumericError("fine-tuning loss is not finite");
  if (grad) {
    for (std::size_t i = 0; i < images.size(); ++i) {
      SampleRun run(w, images[i], fwd, true);
      run.run_first_group();
      for (const GroupDecision& d : decisions[i]) run.run_group(d);
      run.logits();
      Mat d(1, ce.dlogits.cols);
      std::ranges::copy(ce.dlogits.row(i), d.row(0).begin());
      run.backward(d, *grad);
    }
  }
  return ce.loss;
}

WeightStore finetune_backbone(const TrainConfig& cfg, const WeightStore& w0,
                              const SelectorNets& nets, const Dataset& train,
                              const EpochCallback& on_epoch) {
  WeightStore w = w0;
  const OptimConfig& o = cfg.finetune;
  if (o.epochs == 0) return w;
  WeightStore grad = WeightStore::zeros_like(w);
  AdamW opt(tensor_sizes(w), AdamW::Options{0.9, 0.999, 1e-8, o.weight_decay});
  const std::size_t n = train.size();
  const std::size_t per_epoch = (n + o.batch_size - 1) / o.batch_size;
  const CosineSchedule sched = schedule_for(o, per_epoch * o.epochs);
  Rng rng(mix_seed(cfg.seed, 505));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < n; start += o.batch_size) {
      const std::size_t end = std::min(n, start + o.batch_size);
      std::vector<std::vector<double>> imgs;
      std::vector<int> labels;
      std::vector<std::vector<GroupDecision>> decisions;
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t i = order[s];
        imgs.push_back(train.images[i]);
        labels.push_back(train.labels[i]);
        decisions.push_back(greedy_decisions(w, nets, train.images[i], cfg.forward));
      }
      zero(grad);
      loss_sum += finetune_loss(w, imgs, labels, decisions, cfg.forward, &grad) *
                  static_cast<double>(end - start);
      lr = sched.at(step++);
      apply_step(w, grad, opt, lr, o.grad_clip);
    }
    if (on_epoch) on_epoch({epoch, loss_sum / static_cast<double>(n), 0.0, lr});
  }
  return w;
}

// ---------------------------------------------------------------------------
// Evaluation.

namespace {

SampleRecord record_from(const ElasticConfig& cfg, std::size_t id, int label, bool hard,
                         SampleRun& run) {
  SampleRecord r;
  r.id = id;
  r.label = label;
  r.hard = hard;
  r.prediction = run.prediction();
  const FlopsReport f = run.flops();
  r.macs = f.measured_total;
  r.flops_ratio = f.flops_ratio;
  r.keep_rate = run.keep_rate();
  r.groups = run.traces();
  double width = 0.0;
  std::size_t blocks = 0;
  for (std::size_t g = 1; g < r.groups.size(); ++g)
    for (const BlockArch& a : r.groups[g].archs) {
      width += 0.5 * (static_cast<double>(a.phi) / static_cast<double>(cfg.c_max()) +
                      static_cast<double>(cfg.hidden_width(a.mlp_ratio)) /
                          static_cast<double>(cfg.max_hidden()));
      ++blocks;
    }
  r.width_fraction = blocks ? width / static_cast<double>(blocks) : 1.0;
  return r;
}

EvalReport summarize(const ElasticConfig& cfg, std::vector<SampleRecord> records) {
  EvalReport rep;
  rep.samples = records.size();
  const std::size_t decided_blocks = cfg.decided_groups() * cfg.group_size;
  rep.embed_histogram.assign(decided_blocks, std::vector<std::size_t>(cfg.embed_choices.size()));
  rep.mlp_histogram.assign(decided_blocks, std::vector<std::size_t>(cfg.mlp_ratio_choices.size()));
  std::size_t n_easy = 0, n_hard = 0;
  for (const SampleRecord& r : records) {
    const double ok = r.prediction == r.label ? 1.0 : 0.0;
    rep.accuracy += ok;
    rep.mean_gmacs += static_cast<double>(r.macs) / 1e9;
    rep.mean_flops_ratio += r.flops_ratio;
    rep.keep_rate += r.keep_rate;
    rep.width_fraction += r.width_fraction;
    if (r.hard) {
      ++n_hard;
      rep.accuracy_hard += ok;
      rep.width_hard += r.width_fraction;
      rep.keep_hard += r.keep_rate;
    } else {
      ++n_easy;
      rep.accuracy_easy += ok;
      rep.width_easy += r.width_fraction;
      rep.keep_easy += r.keep_rate;
    }
    std::size_t b = 0;
    for (std::size_t g = 1; g < r.groups.size(); ++g)
      for (const BlockArch& a : r.groups[g].archs) {
        const auto e = std::ranges::find(cfg.embed_choices, a.phi) - cfg.embed_choices.begin();
        const auto m =
            std::ranges::find(cfg.mlp_ratio_choices, a.mlp_ratio) - cfg.mlp_ratio_choices.begin();
        ++rep.embed_histogram[b][static_cast<std::size_t>(e)];
        ++rep.mlp_histogram[b][static_cast<std::size_t>(m)];
        ++b;
      }
  }
  auto div = [](double& v, std::size_t n) { v = n ? v / static_cast<double>(n) : 0.0; };
  for (double* v : {&rep.accuracy, &rep.mean_gmacs, &rep.mean_flops_ratio, &rep.keep_rate,
                    &rep.width_fraction})
    div(*v, rep.samples);
  div(rep.accuracy_easy, n_easy);
  div(rep.width_easy, n_easy);
  div(rep.keep_easy, n_easy);
  div(rep.accuracy_hard, n_hard);
  div(rep.width_hard, n_hard);
  div(rep.keep_hard, n_hard);
  rep.records = std::move(records);
  return rep;
}

bool is_hard(const Dataset& d, std::size_t i) { return !d.hard.empty() && d.hard[i] != 0; }

}  // namespace

EvalReport evaluate(const WeightStore& w, const SelectorNets* nets, const Dataset& data,
                    const ForwardOptions& fwd, const EvalOptions& opts) {
  const ElasticConfig& cfg = w.config;
  if (nets && (nets->state_dim() != cfg.tokens() ||
               nets->action_dim() != action_dim(cfg, fwd.strategy)))
    throw DimensionError("evaluate: selector shape does not match the model and strategy");
  const std::size_t n = data.size();
  std::vector<SampleRecord> records(n);
  const GroupDecision full = full_decision(cfg, fwd.strategy);

  if (!nets || opts.mode == DecisionMode::per_sample) {
    auto work = [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) {
        SampleRun run(w, data.images[i], fwd);
        run.run_first_group();
        while (!run.finished())
          run.run_group(nets ? mean_decision(w, *nets, run, fwd.strategy) : full);
        records[i] = record_from(cfg, i, data.labels[i], is_hard(data, i), run);
      }
    };
    const std::size_t workers = std::clamp<std::size_t>(opts.workers, 1, std::max<std::size_t>(n, 1));
    if (workers == 1) {
      work(0, n);
    } else {
      std::vector<std::thread> pool;
      const std::size_t chunk = (n + workers - 1) / workers;
      for (std::size_t t = 0; t < workers; ++t) {
        const std::size_t b = std::min(n, t * chunk);
        const std::size_t e = std::min(n, b + chunk);
        pool.emplace_back(work, b, e);
      }
      for (auto& th : pool) th.join();
    }
  } else {
    const std::size_t bs = std::max<std::size_t>(opts.batch_size, 1);
    for (std::size_t start = 0; start < n; start += bs) {
      const std::size_t end = std::min(n, start + bs);
      std::vector<SampleRun> runs;
      runs.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        runs.emplace_back(w, data.images[i], fwd);
        runs.back().run_first_group();
      }
      while (!runs.front().finished()) {
        std::vector<GroupDecision> each;
        each.reserve(runs.size());
        for (const SampleRun& r : runs) each.push_back(mean_decision(w, *nets, r, fwd.strategy));
        const GroupDecision avg = decision_average(each, cfg);
        for (SampleRun& r : runs) r.run_group(avg);
      }
      for (std::size_t i = start; i < end; ++i)
        records[i] = record_from(cfg, i, data.labels[i], is_hard(data, i), runs[i - start]);
    }
  }
  return summarize(cfg, std::move(records));
}

EvalReport evaluate_fixed(const WeightStore& w, std::span<const GroupDecision> decided,
                          const Dataset& data, const ForwardOptions& fwd) {
  const ElasticConfig& cfg = w.config;
  std::vector<SampleRecord> records;
  records.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    SampleRun run(w, data.images[i], fwd);
    run.run_first_group();
    for (const GroupDecision& d : decided) run.run_group(d);
    records.push_back(record_from(cfg, i, data.labels[i], is_hard(data, i), run));
  }
  return summarize(cfg, std::move(records));
}

std::string report_json(const EvalReport& r) {
  json j = {{"label", r.label},
            {"samples", r.samples},
            {"accuracy", r.accuracy},
            {"mean_gmacs", r.mean_gmacs},
            {"mean_flops_ratio", r.mean_flops_ratio},
            {"token_keep_rate", r.keep_rate},
            {"width_fraction", r.width_fraction},
            {"accuracy_easy", r.accuracy_easy},
            {"accuracy_hard", r.accuracy_hard},
            {"width_easy", r.width_easy},
            {"width_hard", r.width_hard},
            {"keep_easy", r.keep_easy},
            {"keep_hard", r.keep_hard},
            {"embed_histogram", r.embed_histogram},
            {"mlp_histogram", r.mlp_histogram}};
  return j.dump(2) + "\n";
}

void write_decision_trace(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const SampleRecord& s : r.records) {
    for (std::size_t g = 0; g < s.groups.size(); ++g) {
      const GroupTrace& t = s.groups[g];
      json j;
      j["sample_id"] = s.id;
      j["group"] = g;
      std::vector<std::size_t> phi;
      std::vector<double> ratio;
      for (const BlockArch& a : t.archs) {
        phi.push_back(a.phi);
        ratio.push_back(a.mlp_ratio);
      }
      j["phi"] = phi;
      j["mlp_ratio"] = ratio;
      j["t"] = t.token.t;
      if (t.token.strategy == TokenStrategy::prune_then_merge) {
        j["t_prune"] = t.token.t_prune;
        j["t_merge"] = t.token.t_merge;
      }
      j["tokens_before"] = t.tokens_before;
      j["tokens_after"] = t.tokens_after;
      j["mac_count"] = t.macs;
      os << j.dump() << "\n";
    }
  }
}

std::vector<CurvePoint> emit_curves(std::span<const EvalReport> reports,
                                    const std::filesystem::path& stem) {
  std::vector<CurvePoint> pts;
  for (const EvalReport& r : reports) pts.push_back({r.label, r.mean_gmacs, r.accuracy, r.keep_rate});
  std::ranges::stable_sort(pts, {}, &CurvePoint::gmacs);
  std::filesystem::path csv = stem;
  csv += ".csv";
  std::filesystem::path js = stem;
  js += ".json";
  std::ofstream os(csv);
  if (!os) throw std::runtime_error("cannot write " + csv.string());
  os << "label,gmacs,accuracy,keep_rate\n";
  char buf[256];
  json arr = json::array();
  for (const CurvePoint& p : pts) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g\n", p.gmacs, p.accuracy, p.keep_rate);
    os << p.label << buf;
    arr.push_back({{"label", p.label},
                   {"gmacs", p.gmacs},
                   {"accuracy", p.accuracy},
                   {"keep_rate", p.keep_rate}});
  }
  std::ofstream oj(js);
  if (!oj) throw std::runtime_error("cannot write " + js.string());
  oj << arr.dump(2) << "\n";
  return pts;
}

std::vector<CurvePoint> read_curves_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<CurvePoint> pts;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    CurvePoint p;
    std::string field;
    std::getline(ls, p.label, ',');
    std::getline(ls, field, ',');
    p.gmacs = std::stod(field);
    std::getline(ls, field, ',');
    p.accuracy = std::stod(field);
    std::getline(ls, field, ',');
    p.keep_rate = std::stod(field);
    pts.push_back(p);
  }
  return pts;
}

}  // namespace adavit
