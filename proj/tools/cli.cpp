#include "cli.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "adavit/harness.hpp"
#include "json.hpp"

namespace adavit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string strategy;
  std::string out = ".";
  std::string mode;
  std::optional<std::size_t> workers;
};

struct Context {
  std::string command;
  TrainConfig cfg;
  fs::path out;
  std::ostream& log;
  std::string started;
  std::vector<std::string> artifacts;

  fs::path path(const std::string& name) const { return out / name; }
  fs::path artifact(const std::string& name) {
    artifacts.push_back(name);
    return out / name;
  }
};

TrainConfig effective_config(const Globals& g) {
  TrainConfig cfg = g.config.empty() ? TrainConfig{} : load_config(g.config);
  if (g.seed) cfg.seed = *g.seed;
  if (!g.strategy.empty()) cfg.forward.strategy = parse_strategy(g.strategy);
  if (!g.mode.empty()) cfg.eval.mode = parse_decision_mode(g.mode);
  if (g.workers) cfg.eval.workers = *g.workers;
  cfg.validate();
  return cfg;
}

void write_manifest(Context& ctx) {
  const std::string cfg_text = serialize_config(ctx.cfg);
  const std::string cfg_name = ctx.command + ".config.json";
  {
    std::ofstream os(ctx.path(cfg_name), std::ios::binary);
    os << cfg_text;
  }
  json m = {{"command", ctx.command},
            {"config_file", cfg_name},
            {"config_sha256", sha256_hex(cfg_text)},
            {"seed", ctx.cfg.seed},
            {"started_at", ctx.started},
            {"finished_at", utc_now()},
            {"artifacts", ctx.artifacts}};
  std::ofstream os(ctx.path(ctx.command + ".manifest.json"));
  os << m.dump(2) << "\n";
}

DataSplits load_splits(Context& ctx) {
  if (ctx.cfg.data.source == "file") return load_data(ctx.cfg);
  const fs::path train = ctx.path("train.prds");
  const fs::path test = ctx.path("test.prds");
  if (!fs::exists(train) || !fs::exists(test))
    throw UsageError("missing dataset in " + ctx.out.string() + " (run gen-data first)");
  DataSplits s{load_dataset(train), load_dataset(test)};
  for (const Dataset* d : {&s.train, &s.test})
    if (d->side != ctx.cfg.model.image_side || d->channels != ctx.cfg.model.channels)
      throw ConfigError("dataset image shape does not match the model config");
  return s;
}

fs::path resolve(const Context& ctx, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : ctx.out / path;
}

Checkpoint load_model(const Context& ctx, const std::string& name) {
  const fs::path p = resolve(ctx, name);
  if (!fs::exists(p)) throw UsageError("missing checkpoint " + p.string());
  Checkpoint ck = load_checkpoint(p);
  if (!(ck.weights.config == ctx.cfg.model))
    throw ConfigError("checkpoint model config differs from --config");
  return ck;
}

Checkpoint load_with_selector(const Context& ctx, const std::string& name) {
  std::string chosen = name;
  if (chosen.empty())
    chosen = fs::exists(ctx.path("finetuned.ckpt")) ? "finetuned.ckpt" : "selector.ckpt";
  const fs::path p = resolve(ctx, chosen);
  if (!fs::exists(p)) throw UsageError("missing selector checkpoint");
  Checkpoint ck = load_model(ctx, chosen);
  if (!ck.selector) throw UsageError("missing selector checkpoint");
  if (ck.selector->strategy != ctx.cfg.forward.strategy)
    throw ConfigError("selector was trained for strategy '" +
                      std::string(to_string(ck.selector->strategy)) + "'");
  return ck;
}

EvalOptions eval_options(const TrainConfig& cfg) {
  return {cfg.eval.mode, cfg.eval.batch_size, cfg.eval.workers};
}

void write_epoch_log(const fs::path& p, const std::vector<EpochStats>& rows) {
  std::ofstream os(p);
  os << "epoch,loss,accuracy,lr\n";
  char buf[256];
  for (const EpochStats& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.loss, r.accuracy, r.lr);
    os << buf;
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << text;
}

void print_report(std::ostream& os, const EvalReport& r) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "%s: accuracy %.4f  GMACs %.6f  flops ratio %.4f  keep rate %.4f  width %.4f\n",
                r.label.c_str(), r.accuracy, r.mean_gmacs, r.mean_flops_ratio, r.keep_rate,
                r.width_fraction);
  os << buf;
}

// ---------------------------------------------------------------------------
// Subcommands.

void cmd_gen_data(Context& ctx) {
  if (ctx.cfg.data.source != "synthetic")
    throw UsageError("gen-data requires data.source = \"synthetic\"");
  const DataSplits s = generate_synthetic(ctx.cfg.data, ctx.cfg.model, ctx.cfg.seed);
  save_dataset(ctx.artifact("train.prds"), s.train);
  save_dataset(ctx.artifact("test.prds"), s.test);
  const double probe =
      linear_probe_accuracy(s.train, s.test, ctx.cfg.model.num_classes, mix_seed(ctx.cfg.seed, 9));
  std::size_t hard = 0;
  for (int h : s.train.hard) hard += h != 0;
  ctx.log << "train " << s.train.size() << " samples (" << hard << " hard), test "
          << s.test.size() << " samples; linear probe accuracy " << probe << "\n";
}

void cmd_pretrain(Context& ctx) {
  const DataSplits s = load_splits(ctx);
  std::vector<EpochStats> rows;
  const WeightStore w = pretrain_meta(ctx.cfg, s.train, [&](const EpochStats& e) {
    rows.push_back(e);
    ctx.log << "epoch " << e.epoch << " loss " << e.loss << " accuracy " << e.accuracy << "\n";
  });
  save_checkpoint(ctx.artifact("meta.ckpt"), w);
  write_epoch_log(ctx.artifact("pretrain_log.csv"), rows);
  EvalReport full = evaluate(w, nullptr, s.test, ctx.cfg.forward, eval_options(ctx.cfg));
  full.label = "full";
  const std::vector<GroupDecision> smallest(
      ctx.cfg.model.decided_groups(), min_width_decision(ctx.cfg.model, ctx.cfg.forward.strategy));
  EvalReport narrow = evaluate_fixed(w, smallest, s.test, ctx.cfg.forward);
  narrow.label = "min-width";
  print_report(ctx.log, full);
  print_report(ctx.log, narrow);
  json summary = {{"train_accuracy", rows.empty() ? 0.0 : rows.back().accuracy},
                  {"test_accuracy_full", full.accuracy},
                  {"test_accuracy_min_width", narrow.accuracy}};
  write_text(ctx.artifact("pretrain_summary.json"), summary.dump(2) + "\n");
}

void cmd_train_selector(Context& ctx, const std::string& checkpoint) {
  const DataSplits s = load_splits(ctx);
  const Checkpoint ck = load_model(ctx, checkpoint.empty() ? "meta.ckpt" : checkpoint);
  std::vector<SelectorLogRow> rows;
  const SelectorNets nets =
      train_selector(ctx.cfg, ck.weights, s.train, &rows, [&](const SelectorLogRow& r) {
        ctx.log << "step " << r.step << " reward " << r.mean_reward << " f " << r.mean_flops_ratio
                << " t_r " << r.mean_keep_rate << "\n";
      });
  save_checkpoint(ctx.artifact("selector.ckpt"), ck.weights, &nets);
  write_selector_log(ctx.artifact("selector_log.csv"), rows);
}

void cmd_finetune(Context& ctx, const std::string& checkpoint) {
  const DataSplits s = load_splits(ctx);
  const Checkpoint ck = load_with_selector(ctx, checkpoint.empty() ? "selector.ckpt" : checkpoint);
  std::vector<EpochStats> rows;
  const WeightStore w =
      finetune_backbone(ctx.cfg, ck.weights, *ck.selector, s.train, [&](const EpochStats& e) {
        rows.push_back(e);
        ctx.log << "epoch " << e.epoch << " loss " << e.loss << "\n";
      });
  save_checkpoint(ctx.artifact("finetuned.ckpt"), w, &*ck.selector);
  write_epoch_log(ctx.artifact("finetune_log.csv"), rows);
}

void cmd_eval(Context& ctx, const std::string& checkpoint, bool trace) {
  const Checkpoint ck = load_with_selector(ctx, checkpoint);
  const DataSplits s = load_splits(ctx);
  const std::string mode(to_string(ctx.cfg.eval.mode));
  EvalReport full = evaluate(ck.weights, nullptr, s.test, ctx.cfg.forward, eval_options(ctx.cfg));
  full.label = "full";
  EvalReport adaptive =
      evaluate(ck.weights, &*ck.selector, s.test, ctx.cfg.forward, eval_options(ctx.cfg));
  adaptive.label = std::string(to_string(ctx.cfg.forward.strategy)) + "/" + mode;
  write_text(ctx.artifact("eval_full.json"), report_json(full));
  write_text(ctx.artifact("eval_" + mode + ".json"), report_json(adaptive));
  const std::vector<EvalReport> both{full, adaptive};
  emit_curves(both, ctx.path("curves_" + mode));
  ctx.artifacts.push_back("curves_" + mode + ".csv");
  ctx.artifacts.push_back("curves_" + mode + ".json");
  if (trace) write_decision_trace(ctx.artifact("decisions_" + mode + ".jsonl"), adaptive);
  print_report(ctx.log, full);
  print_report(ctx.log, adaptive);
  ctx.log << "MAC reduction " << 1.0 - adaptive.mean_gmacs / full.mean_gmacs << "\n";
}

void cmd_flops(Context& ctx) {
  const ElasticConfig& m = ctx.cfg.model;
  const std::size_t n = m.tokens();
  ctx.log << "block  tokens  phi  hidden  formula  traced\n";
  std::uint64_t formula = 0;
  for (std::size_t b = 0; b < m.depth; ++b) {
    const std::size_t hidden = m.max_hidden();
    const std::uint64_t f = block_macs_formula(n, m.c_max(), hidden, m.c_max());
    const std::uint64_t t = block_macs_traced(n, m.c_max(), m.heads, hidden, m.c_max());
    formula += f;
    ctx.log << b << "  " << n << "  " << m.c_max() << "  " << hidden << "  " << f << "  " << t
            << "\n";
  }
  const std::vector<double> zeros(m.channels * m.image_side * m.image_side, 0.0);
  Rng rng(mix_seed(ctx.cfg.seed, 11));
  const WeightStore w = WeightStore::init(m, rng);
  const std::vector<GroupDecision> full(m.decided_groups(),
                                        full_decision(m, ctx.cfg.forward.strategy));
  const ForwardResult r = model_forward(w, zeros, full, ctx.cfg.forward);
  ctx.log << "closed form 12NC^2+2N^2C per block: " << uniform_closed_form(n, m.c_max(), m.depth)
          << "\n";
  ctx.log << "formula total: " << formula << "\n";
  ctx.log << "measured total: " << r.flops.measured_total << "\n";
  if (formula != r.flops.measured_total)
    throw NumericError("measured MACs differ from the per-block formula");
}

void cmd_sweep(Context& ctx, const std::string& param, const std::vector<double>& values,
               const std::string& checkpoint) {
  if (param != "a_f" && param != "a_t") throw UsageError("--param must be a_f or a_t");
  if (values.empty()) throw UsageError("--values needs at least one value");
  const DataSplits s = load_splits(ctx);
  const Checkpoint ck = load_model(ctx, checkpoint.empty() ? "meta.ckpt" : checkpoint);
  std::vector<EvalReport> reports;
  std::ostringstream rows;
  rows << "param,value,accuracy,gmacs,flops_ratio,keep_rate,width_fraction\n";
  for (double v : values) {
    TrainConfig c = ctx.cfg;
    (param == "a_f" ? c.selector.reward.a_f : c.selector.reward.a_t) = v;
    c.selector.reward.validate();
    const SelectorNets nets = train_selector(c, ck.weights, s.train);
    EvalReport r = evaluate(ck.weights, &nets, s.test, c.forward, eval_options(c));
    char label[64];
    std::snprintf(label, sizeof label, "%s=%g", param.c_str(), v);
    r.label = label;
    print_report(ctx.log, r);
    char buf[320];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", param.c_str(), v,
                  r.accuracy, r.mean_gmacs, r.mean_flops_ratio, r.keep_rate, r.width_fraction);
    rows << buf;
    reports.push_back(std::move(r));
  }
  write_text(ctx.artifact("sweep_" + param + ".csv"), rows.str());
  emit_curves(reports, ctx.path("sweep_" + param + "_curves"));
  ctx.artifacts.push_back("sweep_" + param + "_curves.csv");
  ctx.artifacts.push_back("sweep_" + param + "_curves.json");
}

void cmd_trace(Context& ctx, const std::string& checkpoint) {
  const Checkpoint ck = load_with_selector(ctx, checkpoint);
  const DataSplits s = load_splits(ctx);
  const EvalReport r =
      evaluate(ck.weights, &*ck.selector, s.test, ctx.cfg.forward, eval_options(ctx.cfg));
  write_decision_trace(ctx.artifact("decisions.jsonl"), r);
  ctx.log << "wrote " << r.records.size() << " samples x " << ctx.cfg.model.groups()
          << " groups\n";
}

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sample-adaptive elastic ViT: pretraining, selector training and evaluation",
               "adavit"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "JSON config file");
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--strategy", g.strategy, "Token reduction strategy")
      ->check(CLI::IsMember({"prune", "merge", "prune-merge"}));
  app.add_option("--out", g.out, "Output directory; artifact paths are relative to it");
  app.add_option("--mode", g.mode, "Decision mode at evaluation")
      ->check(CLI::IsMember({"per-sample", "batch-avg"}));
  app.add_option("--workers", g.workers, "Evaluation worker threads")
      ->check(CLI::PositiveNumber);

  std::string checkpoint;
  bool trace = false;
  std::string param;
  std::vector<double> values;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic train/test splits");
  auto* pre = app.add_subcommand("pretrain", "Pretrain the elastic meta-network");
  auto* sel = app.add_subcommand("train-selector", "Train the PPO selector on a frozen backbone");
  sel->add_option("--checkpoint", checkpoint, "Backbone checkpoint (default meta.ckpt)");
  auto* fin = app.add_subcommand("finetune", "Fine-tune the backbone under the frozen selector");
  fin->add_option("--checkpoint", checkpoint, "Selector checkpoint (default selector.ckpt)");
  auto* ev = app.add_subcommand("eval", "Evaluate the adaptive model against the full model");
  ev->add_option("--checkpoint", checkpoint,
                 "Checkpoint with a selector (default finetuned.ckpt, else selector.ckpt)");
  ev->add_flag("--trace", trace, "Also write the per-sample decision trace");
  auto* fl = app.add_subcommand("flops", "Print the per-block MAC table");
  auto* sw = app.add_subcommand("sweep", "Retrain the selector per reward value and evaluate");
  sw->add_option("--param", param, "a_f or a_t")->required();
  sw->add_option("--values", values, "Comma-separated values")->required()->delimiter(',');
  sw->add_option("--checkpoint", checkpoint, "Backbone checkpoint (default meta.ckpt)");
  auto* tr = app.add_subcommand("trace", "Write the per-sample decision trace");
  tr->add_option("--checkpoint", checkpoint, "Checkpoint with a selector");

  std::vector<const char*> argv{"adavit"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << one_line(e.what()) << "\n";
    return kExitUsage;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    Context ctx{sub->get_name(), effective_config(g), fs::path(g.out), out, utc_now(), {}};
    fs::create_directories(ctx.out);
    if (sub == gen) cmd_gen_data(ctx);
    else if (sub == pre) cmd_pretrain(ctx);
    else if (sub == sel) cmd_train_selector(ctx, checkpoint);
    else if (sub == fin) cmd_finetune(ctx, checkpoint);
    else if (sub == ev) cmd_eval(ctx, checkpoint, trace);
    else if (sub == fl) cmd_flops(ctx);
    else if (sub == sw) cmd_sweep(ctx, param, values, checkpoint);
    else if (sub == tr) cmd_trace(ctx, checkpoint);
    write_manifest(ctx);
  } catch (const UsageError& e) {
    err << "error[usage]: " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error[config]: " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error[format]: " << one_line(e.what()) << "\n";
    return kExitFailure;
  } catch (const NumericError& e) {
    err << "error[numeric]: " << one_line(e.what()) << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    err << "error[runtime]: " << one_line(e.what()) << "\n";
    return kExitFailure;
  }
  return kExitOk;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace adavit::cli
