#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#ifndef ADAVIT_SOURCE_DIR
#define ADAVIT_SOURCE_DIR "."
#endif

namespace adavit::testing {

namespace {

std::span<double> vec(Mat& m) { return {m.data.data(), m.data.size()}; }

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

std::vector<double> ref_layer_norm(std::span<const double> x, std::span<const double> g,
                                   std::span<const double> b) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k)
    out[k] = (x[k] - mean) / std::sqrt(var + 1e-6) * g[k] + b[k];
  return out;
}

using Rows = std::vector<std::vector<double>>;

// y = x W^T + b for row vectors.
std::vector<double> ref_linear(std::span<const double> x, const Mat& w, const Mat* b) {
  std::vector<double> y(w.rows, 0.0);
  for (std::size_t o = 0; o < w.rows; ++o) {
    double acc = b ? b->data[o] : 0.0;
    for (std::size_t i = 0; i < w.cols; ++i) acc += w(o, i) * x[i];
    y[o] = acc;
  }
  return y;
}

Rows ref_block(const BlockWeights& w, const Rows& x, std::size_t heads) {
  const std::size_t n = x.size();
  const std::size_t c = x[0].size();
  Rows h(n), q(n), k(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    h[i] = ref_layer_norm(x[i], w.ln1_scale.data, w.ln1_shift.data);
    q[i] = ref_linear(h[i], w.wq, nullptr);
    k[i] = ref_linear(h[i], w.wk, nullptr);
    v[i] = ref_linear(h[i], w.wv, nullptr);
  }
  const std::size_t dh = c / heads;
  Rows att(n, std::vector<double>(c, 0.0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < dh; ++e) acc += q[i][hd * dh + e] * k[j][hd * dh + e];
        s[j] = acc / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& sj : s) z += (sj = std::exp(sj - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t e = 0; e < dh; ++e) att[i][hd * dh + e] += s[j] / z * v[j][hd * dh + e];
    }
  }
  Rows y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = ref_linear(att[i], w.wo, &w.bo);
    for (std::size_t e = 0; e < c; ++e) y[i][e] += x[i][e];
    const auto h2 = ref_layer_norm(y[i], w.ln2_scale.data, w.ln2_shift.data);
    auto up = ref_linear(h2, w.w_up, &w.b_up);
    for (double& u : up) u = 0.5 * u * (1.0 + std::erf(u / std::numbers::sqrt2));
    const auto down = ref_linear(up, w.w_down, &w.b_down);
    for (std::size_t e = 0; e < c; ++e) y[i][e] += down[e];
  }
  return y;
}

// Central differences on selected coordinates, error as in finite_diff_check.
double fd_coords(const std::function<double()>& f, std::span<double> params,
                 std::span<const double> analytic, std::span<const std::size_t> coords,
                 double h = 1e-5) {
  double worst = 0.0;
  for (std::size_t i : coords) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = f();
    params[i] = saved - h;
    const double down = f();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

std::vector<std::size_t> sample_coords(std::size_t size, std::size_t count, Rng& rng) {
  std::vector<std::size_t> out;
  if (size <= count) {
    for (std::size_t i = 0; i < size; ++i) out.push_back(i);
    return out;
  }
  for (std::size_t i = 0; i < count; ++i) out.push_back(pick(rng, 0, size - 1));
  return out;
}

double dot_all(const Mat& a, const Mat& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

}  // namespace

ElasticConfig toy_config(std::size_t group_size) {
  ElasticConfig c;
  c.depth = 4;
  c.heads = 4;
  c.embed_choices = {16, 32, 48};
  c.mlp_ratio_choices = {2.0, 4.0};
  c.group_size = group_size;
  c.image_side = 8;
  c.patch_side = 2;
  c.channels = 1;
  c.num_classes = 4;
  return c;
}

std::vector<double> random_image(const ElasticConfig& cfg, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> img(cfg.channels * cfg.image_side * cfg.image_side);
  for (double& v : img) v = n(rng);
  return img;
}

GroupDecision random_decision(const ElasticConfig& cfg, TokenStrategy s, Rng& rng,
                              double t_lo) {
  std::vector<double> a(action_dim(cfg, s));
  for (std::size_t i = 0; i < 2 * cfg.group_size; ++i) a[i] = uniform(rng, 0.0, 1.0);
  for (std::size_t i = 2 * cfg.group_size; i < a.size(); ++i) a[i] = uniform(rng, t_lo, 1.0);
  return decode_action(a, cfg, s);
}

std::vector<GroupDecision> random_decisions(const ElasticConfig& cfg, TokenStrategy s,
                                            Rng& rng, double t_lo) {
  std::vector<GroupDecision> out;
  for (std::size_t g = 0; g < cfg.decided_groups(); ++g)
    out.push_back(random_decision(cfg, s, rng, t_lo));
  return out;
}

Mat random_mat(std::size_t rows, std::size_t cols, Rng& rng, double sd) {
  return random_normal(rows, cols, sd, rng);
}

std::vector<double> reference_logits(const WeightStore& w, std::span<const double> image) {
  const ElasticConfig& cfg = w.config;
  const std::size_t c = cfg.c_max();
  const std::size_t side = cfg.image_side;
  const std::size_t ps = cfg.patch_side;
  const std::size_t grid = side / ps;
  Rows x;
  std::vector<double> cls(c);
  for (std::size_t e = 0; e < c; ++e) cls[e] = w.cls(0, e) + w.pos(0, e);
  x.push_back(cls);
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px) {
      std::vector<double> patch;
      for (std::size_t ch = 0; ch < cfg.channels; ++ch)
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx)
            patch.push_back(image[(ch * side + py * ps + dy) * side + px * ps + dx]);
      auto tok = ref_linear(patch, w.patch_w, &w.patch_b);
      const std::size_t row = 1 + py * grid + px;
      for (std::size_t e = 0; e < c; ++e) tok[e] += w.pos(row, e);
      x.push_back(tok);
    }
  for (const BlockWeights& b : w.blocks) x = ref_block(b, x, cfg.heads);
  const auto z = ref_layer_norm(x[0], w.norm_scale.data, w.norm_shift.data);
  return ref_linear(z, w.head_w, &w.head_b);
}

BruteMerge brute_merge(const Mat& important, const Mat& unimportant, MergeMode mode) {
  BruteMerge r;
  r.merged = important;
  std::vector<double> count(important.rows, 1.0);
  for (std::size_t u = 0; u < unimportant.rows; ++u) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t m = 0; m < important.rows; ++m) {
      double dotp = 0.0, nu = 0.0, nm = 0.0;
      for (std::size_t k = 0; k < important.cols; ++k) {
        dotp += unimportant(u, k) * important(m, k);
        nu += unimportant(u, k) * unimportant(u, k);
        nm += important(m, k) * important(m, k);
      }
      const double cs = (nu == 0.0 || nm == 0.0) ? 0.0 : dotp / (std::sqrt(nu) * std::sqrt(nm));
      if (cs > best) {
        best = cs;
        arg = m;
      }
    }
    r.target.push_back(arg);
    for (std::size_t k = 0; k < important.cols; ++k) r.merged(arg, k) += unimportant(u, k);
    count[arg] += 1.0;
  }
  if (mode == MergeMode::mean)
    for (std::size_t m = 0; m < important.rows; ++m)
      for (std::size_t k = 0; k < important.cols; ++k) r.merged(m, k) /= count[m];
  return r;
}

std::vector<double> brute_gae(const Trajectory& t, double discount, double gae_lambda) {
  const std::size_t n = t.steps.size();
  std::vector<double> delta(n);
  for (std::size_t l = 0; l < n; ++l) {
    const bool last = t.steps[l].terminal || l + 1 == n;
    const double next = last ? 0.0 : t.steps[l + 1].value;
    delta[l] = t.steps[l].reward + discount * next - t.steps[l].value;
  }
  std::vector<double> adv(n, 0.0);
  for (std::size_t l = 0; l < n; ++l) {
    double acc = 0.0;
    for (std::size_t i = 0; l + i < n; ++i) {
      acc += std::pow(discount * gae_lambda, static_cast<double>(i)) * delta[l + i];
      if (t.steps[l + i].terminal) break;
    }
    adv[l] = acc;
  }
  return adv;
}

Trajectory random_trajectory(std::size_t length, Rng& rng) {
  Trajectory t;
  for (std::size_t i = 0; i < length; ++i) {
    Transition s;
    s.reward = uniform(rng, -1.0, 1.0);
    s.value = uniform(rng, -1.0, 1.0);
    s.terminal = i + 1 == length;
    t.steps.push_back(s);
  }
  return t;
}

// ---------------------------------------------------------------------------

FlopsAnchor measure_flops(std::size_t configs, std::uint64_t seed) {
  FlopsAnchor out;
  ElasticConfig big;
  big.depth = 12;
  big.heads = 3;
  big.embed_choices = {192};
  big.mlp_ratio_choices = {4.0};
  big.group_size = 1;
  big.image_side = 224;
  big.patch_side = 16;
  big.channels = 3;
  big.num_classes = 1000;
  const std::vector<BlockShape> shapes(big.depth, {big.tokens(), max_arch(big)});
  out.anchor_macs = count_flops(big, shapes).formula_total;

  Rng rng(seed);
  const TokenStrategy strategies[] = {TokenStrategy::prune, TokenStrategy::merge,
                                      TokenStrategy::prune_then_merge};
  for (std::size_t i = 0; i < configs; ++i) {
    ElasticConfig cfg;
    cfg.heads = pick(rng, 1, 4);
    cfg.embed_choices.clear();
    const std::size_t widths = pick(rng, 1, 3);
    for (std::size_t e = 1; e <= widths; ++e) cfg.embed_choices.push_back(cfg.heads * 4 * e);
    cfg.mlp_ratio_choices = pick(rng, 0, 1) ? std::vector<double>{1.0, 2.0, 4.0}
                                            : std::vector<double>{2.0};
    cfg.group_size = pick(rng, 1, 2);
    cfg.depth = cfg.group_size * pick(rng, 2, 3);
    cfg.patch_side = 2;
    cfg.image_side = 2 * pick(rng, 2, 4);
    cfg.channels = pick(rng, 1, 2);
    cfg.num_classes = 3;
    Rng wr(mix_seed(seed, i));
    const WeightStore w = WeightStore::init(cfg, wr);
    ForwardOptions opts;
    opts.strategy = strategies[i % 3];
    const auto decided = random_decisions(cfg, opts.strategy, wr);
    const ForwardResult r = model_forward(w, random_image(cfg, wr), decided, opts);
    ++out.configs_checked;
    std::uint64_t traced = 0;
    const auto shapes_i = plan_shapes(cfg, decided);
    for (const BlockShape& s : shapes_i)
      traced += block_macs_formula(s.tokens, s.arch.phi, cfg.hidden_width(s.arch.mlp_ratio),
                                   cfg.c_max());
    if (r.flops.measured_total != r.flops.formula_total || traced != r.flops.measured_total)
      ++out.mismatches;
  }
  return out;
}

double slicing_identity_error(std::size_t seeds, std::uint64_t seed) {
  const ElasticConfig cfg = toy_config(1);
  double worst = 0.0;
  for (std::size_t s = 0; s < seeds; ++s) {
    Rng rng(mix_seed(seed, s));
    WeightStore w = WeightStore::init(cfg, rng);
    // Move LayerNorm affines and biases off their trivial init.
    w.for_each_tensor([&](const std::string&, Mat& m) {
      for (double& v : m.data) v += 0.1 * std::normal_distribution<double>(0.0, 1.0)(rng);
    });
    const auto img = random_image(cfg, rng);
    const std::vector<GroupDecision> full(cfg.decided_groups(),
                                          full_decision(cfg, TokenStrategy::prune));
    const ForwardResult r = model_forward(w, img, full);
    const auto ref = reference_logits(w, img);
    for (std::size_t k = 0; k < ref.size(); ++k)
      worst = std::max(worst, std::abs(ref[k] - r.logits.data[k]));
  }
  return worst;
}

MaskedEquivalence measure_masked_equivalence(std::size_t trials, std::size_t batch,
                                             std::uint64_t seed) {
  MaskedEquivalence out;
  const ElasticConfig cfg = toy_config(1);
  const TokenStrategy strategies[] = {TokenStrategy::prune, TokenStrategy::merge,
                                      TokenStrategy::prune_then_merge};
  for (std::size_t trial = 0; trial < trials; ++trial) {
    Rng rng(mix_seed(seed, trial));
    const WeightStore w = WeightStore::init(cfg, rng);
    ForwardOptions opts;
    opts.strategy = strategies[trial % 3];

    // Whole forward with per-sample decisions.
    std::vector<std::vector<double>> images;
    std::vector<std::vector<GroupDecision>> decided;
    for (std::size_t i = 0; i < batch; ++i) {
      images.push_back(random_image(cfg, rng));
      decided.push_back(random_decisions(cfg, opts.strategy, rng, 0.05));
      for (const GroupDecision& d : decided.back())
        if (opts.strategy != TokenStrategy::prune && d.token.t < 0.5) ++out.low_ratio_merges;
    }
    const Mat masked = masked_model_forward(w, images, decided, opts);
    for (std::size_t i = 0; i < batch; ++i) {
      const ForwardResult r = model_forward(w, images[i], decided[i], opts);
      for (std::size_t k = 0; k < r.logits.cols; ++k)
        out.forward_error = std::max(out.forward_error, std::abs(masked(i, k) - r.logits(0, k)));
    }

    // LayerNorm over heterogeneous live widths.
    const std::size_t n = 5, c = 12;
    std::vector<std::size_t> d_e(batch), d_t(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      d_e[i] = pick(rng, 1, c);
      d_t[i] = pick(rng, 1, n);
    }
    const MaskPair masks = build_masks(d_e, d_t, n, c);
    Tensor3 x(batch, n, c);
    for (double& v : x.data) v = uniform(rng, -2.0, 2.0);
    const Mat g = random_mat(1, c, rng), b = random_mat(1, c, rng);
    const Tensor3 y = masked_layer_norm(x, masks.channel, g.data, b.data);
    for (std::size_t i = 0; i < batch; ++i) {
      const Mat live = x.slice(i, n, d_e[i]);
      const Mat ln = layer_norm(live, std::span(g.data).first(d_e[i]),
                                std::span(b.data).first(d_e[i]));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t k = 0; k < c; ++k) {
          const double expect = k < d_e[i] ? ln(j, k) : 0.0;
          out.layer_norm_error = std::max(out.layer_norm_error, std::abs(y.at(i, j, k) - expect));
        }
    }

    // Token reduction on a padded batch.
    const std::size_t nt = 9, ct = 6;
    MaskedBatch in{Tensor3(batch, nt, ct), std::vector<std::size_t>(batch, ct),
                   std::vector<std::size_t>(batch)};
    std::vector<ImportanceScores> scores(batch);
    std::vector<TokenDecision> decisions(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      in.d_t[i] = pick(rng, 2, nt);
      for (std::size_t j = 0; j < in.d_t[i]; ++j)
        for (double& v : in.x.row(i, j)) v = uniform(rng, -1.0, 1.0);
      for (std::size_t j = 1; j < in.d_t[i]; ++j) scores[i].values.push_back(uniform(rng, 0, 1));
      decisions[i] = random_decision(cfg, opts.strategy, rng, 0.05).token;
    }
    const MaskedBatch red = masked_reduce(in, scores, decisions);
    for (std::size_t i = 0; i < batch; ++i) {
      const Reduction ref = reduce_tokens(in.x.slice(i, in.d_t[i], ct), scores[i], decisions[i]);
      if (ref.x.rows != red.d_t[i]) {
        out.reduce_error = std::numeric_limits<double>::infinity();
        continue;
      }
      const Mat got = red.x.slice(i, red.d_t[i], ct);
      out.reduce_error = std::max(out.reduce_error, max_abs_diff(got, ref.x));
    }
  }
  return out;
}

MergeOracle measure_merge_oracle(std::size_t trials, std::uint64_t seed) {
  MergeOracle out;
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t m = pick(rng, 1, 4), u = pick(rng, 0, 4), c = pick(rng, 1, 6);
    Mat im = random_mat(m, c, rng), un = random_mat(u, c, rng);
    // Exact duplicates exercise the lowest-index tie rule.
    if (m >= 2 && t % 5 == 0) std::copy_n(im.row(0).begin(), c, im.row(m - 1).begin());
    const MergeMode mode = t % 2 ? MergeMode::mean : MergeMode::sum;
    const MergeResult got = merge_tokens(im, un, mode);
    const BruteMerge ref = brute_merge(im, un, mode);
    if (got.target != ref.target) ++out.index_mismatches;
    out.value_error = std::max(out.value_error, max_abs_diff(got.merged, ref.merged));
  }
  return out;
}

GaeOracle measure_gae_oracle(std::size_t trials, std::uint64_t seed) {
  GaeOracle out;
  Rng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    const Trajectory tr = random_trajectory(pick(rng, 1, 8), rng);
    const double g = uniform(rng, 0.0, 1.0), l = uniform(rng, 0.0, 1.0);
    const auto got = compute_gae(tr, g, l).advantages;
    const auto ref = brute_gae(tr, g, l);
    for (std::size_t i = 0; i < got.size(); ++i)
      out.double_sum_error = std::max(out.double_sum_error, std::abs(got[i] - ref[i]));

    const auto zero = compute_gae(tr, 0.0, l).advantages;
    for (std::size_t i = 0; i < zero.size(); ++i)
      out.gamma_zero_error =
          std::max(out.gamma_zero_error,
                   std::abs(zero[i] - (tr.steps[i].reward - tr.steps[i].value)));

    const auto one = compute_gae(tr, 1.0, 1.0).advantages;
    for (std::size_t i = 0; i < one.size(); ++i) {
      double ret = 0.0;
      for (std::size_t j = i; j < tr.steps.size(); ++j) ret += tr.steps[j].reward;
      out.return_minus_baseline =
          std::max(out.return_minus_baseline, std::abs(one[i] - (ret - tr.steps[i].value)));
    }
  }
  return out;
}

std::vector<GradientCheck> gradient_suite(std::uint64_t seed) {
  std::vector<GradientCheck> out;
  Rng rng(seed);

  {  // LayerNorm: input, scale, shift.
    Mat x = random_mat(3, 7, rng), g = random_mat(1, 7, rng), b = random_mat(1, 7, rng);
    const Mat up = random_mat(3, 7, rng);
    LayerNormCache cache;
    layer_norm(x, g.data, b.data, kLayerNormEps, &cache);
    const LayerNormGrad lg = layer_norm_backward(cache, g.data, up);
    auto f = [&] { return dot_all(layer_norm(x, g.data, b.data), up); };
    double e = finite_diff_check(f, vec(x), lg.dx.data);
    e = std::max(e, finite_diff_check(f, vec(g), lg.dscale));
    e = std::max(e, finite_diff_check(f, vec(b), lg.dshift));
    out.push_back({"layer_norm", e});
  }
  {  // GELU.
    Mat x = random_mat(4, 5, rng, 2.0);
    const Mat up = random_mat(4, 5, rng);
    const Mat dx = gelu_backward(x, up);
    out.push_back({"gelu", finite_diff_check([&] { return dot_all(gelu(x), up); }, vec(x),
                                             dx.data)});
  }
  {  // Row softmax.
    Mat x = random_mat(3, 6, rng);
    const Mat up = random_mat(3, 6, rng);
    const Mat dx = softmax_rows_backward(softmax_rows(x), up);
    out.push_back({"softmax", finite_diff_check([&] { return dot_all(softmax_rows(x), up); },
                                                vec(x), dx.data)});
  }
  {  // Cross-entropy.
    Mat x = random_mat(5, 4, rng);
    const std::vector<int> labels{0, 3, 1, 2, 2};
    const CrossEntropy ce = softmax_cross_entropy(x, labels);
    out.push_back({"cross_entropy",
                   finite_diff_check([&] { return softmax_cross_entropy(x, labels).loss; },
                                     vec(x), ce.dlogits.data)});
  }
  {  // Matmul in both operand positions.
    Mat a = random_mat(3, 4, rng), b = random_mat(5, 4, rng);
    const Mat up = random_mat(3, 5, rng);
    auto f = [&] { return dot_all(matmul_nt(a, b), up); };
    const Mat da = matmul(up, b), db = matmul_tn(up, a);
    out.push_back({"linear", std::max(finite_diff_check(f, vec(a), da.data),
                                      finite_diff_check(f, vec(b), db.data))});
  }
  {  // Transformer block at a random sub-width, every parameter and the input.
    const ElasticConfig cfg = toy_config(1);
    WeightStore w = WeightStore::init(cfg, rng);
    BlockWeights& bw = w.blocks[0];
    for (Mat* m : {&bw.wq, &bw.wk, &bw.wv, &bw.wo, &bw.w_up, &bw.w_down})
      for (double& v : m->data) v *= 10.0;
    const BlockArch arch{32, 2.0};
    Mat x = random_mat(6, cfg.c_max(), rng);
    const Mat up = random_mat(6, cfg.c_max(), rng);
    BlockCache cache;
    block_forward(bw, x, arch, cfg, &cache);
    BlockWeights grad = WeightStore::zeros_like(w).blocks[0];
    const Mat dx = block_backward(bw, cache, up, cfg.heads, grad);
    auto f = [&] { return dot_all(block_forward(bw, x, arch, cfg), up); };
    double e = fd_coords(f, vec(x), dx.data, sample_coords(x.size(), 60, rng));
    BlockWeights& g = grad;
    const std::pair<Mat*, Mat*> pairs[] = {
        {&bw.ln1_scale, &g.ln1_scale}, {&bw.ln1_shift, &g.ln1_shift}, {&bw.wq, &g.wq},
        {&bw.wk, &g.wk},               {&bw.wv, &g.wv},               {&bw.wo, &g.wo},
        {&bw.bo, &g.bo},               {&bw.ln2_scale, &g.ln2_scale}, {&bw.ln2_shift, &g.ln2_shift},
        {&bw.w_up, &g.w_up},           {&bw.b_up, &g.b_up},           {&bw.w_down, &g.w_down},
        {&bw.b_down, &g.b_down}};
    for (const auto& [p, d] : pairs)
      e = std::max(e, fd_coords(f, vec(*p), d->data, sample_coords(p->size(), 40, rng)));
    out.push_back({"transformer_block", e});
  }
  {  // Whole model through token reductions, cross-entropy loss.
    const ElasticConfig cfg = toy_config(1);
    for (TokenStrategy s : {TokenStrategy::prune, TokenStrategy::merge,
                            TokenStrategy::prune_then_merge}) {
      WeightStore w = WeightStore::init(cfg, rng);
      w.for_each_tensor([&](const std::string&, Mat& m) {
        for (double& v : m.data) v *= 5.0;
      });
      const auto img = random_image(cfg, rng);
      const auto decided = random_decisions(cfg, s, rng, 0.3);
      ForwardOptions opts;
      opts.strategy = s;
      const std::vector<int> label{1};
      auto loss = [&] {
        SampleRun run(w, img, opts);
        run.run_first_group();
        for (const GroupDecision& d : decided) run.run_group(d);
        return softmax_cross_entropy(run.logits(), label).loss;
      };
      SampleRun run(w, img, opts, true);
      run.run_first_group();
      for (const GroupDecision& d : decided) run.run_group(d);
      const CrossEntropy ce = softmax_cross_entropy(run.logits(), label);
      WeightStore grad = WeightStore::zeros_like(w);
      run.backward(ce.dlogits, grad);
      std::vector<Mat*> params, grads;
      w.for_each_tensor([&](const std::string&, Mat& m) { params.push_back(&m); });
      grad.for_each_tensor([&](const std::string&, Mat& m) { grads.push_back(&m); });
      double e = 0.0;
      for (std::size_t i = 0; i < params.size(); ++i)
        e = std::max(e, fd_coords(loss, vec(*params[i]), grads[i]->data,
                                  sample_coords(params[i]->size(), 6, rng)));
      out.push_back({"model_" + std::string(to_string(s)), e});
    }
  }
  {  // Selector MLP.
    ThreeLayerNet net = ThreeLayerNet::init(5, 8, 3, 1.0, rng);
    Mat x = random_mat(4, 5, rng);
    const Mat up = random_mat(4, 3, rng);
    ThreeLayerCache cache;
    net_forward(net, x, &cache);
    ThreeLayerNet grad = net;
    for (auto s : grad.spans()) std::ranges::fill(s, 0.0);
    const Mat dx = net_backward(net, cache, up, grad);
    auto f = [&] { return dot_all(net_forward(net, x), up); };
    double e = finite_diff_check(f, vec(x), dx.data);
    auto ps = net.spans();
    auto gs = grad.spans();
    for (std::size_t i = 0; i < ps.size(); ++i)
      e = std::max(e, finite_diff_check(f, ps[i], gs[i]));
    out.push_back({"selector_mlp", e});
  }
  {  // Full PPO loss: clipped surrogate, entropy bonus and critic.
    SelectorInit init;
    init.hidden = 12;
    init.actor_out_gain = 1.0;
    SelectorNets nets = SelectorNets::init(6, 3, TokenStrategy::prune, init, rng);
    std::vector<PpoSample> batch;
    for (int i = 0; i < 10; ++i) {
      PpoSample s;
      s.state = random_mat(1, 6, rng).data;
      const PolicyOutput pol = actor_forward(nets, s.state);
      s.raw_action = sample_action(pol, rng).raw;
      // Ratios inside and outside the clip band, away from its edges.
      const double shift = (i % 3 == 0) ? 0.5 : (i % 3 == 1 ? -0.5 : 0.05);
      s.old_log_prob = gaussian_log_prob(s.raw_action, pol.mean, pol.log_std) + shift;
      s.advantage = uniform(rng, -1.0, 1.0);
      s.target = uniform(rng, -1.0, 1.0);
      batch.push_back(std::move(s));
    }
    PPOParams p;
    p.entropy_coef = 0.01;
    SelectorNets grad = nets;
    for (auto s : grad.actor_spans()) std::ranges::fill(s, 0.0);
    for (auto s : grad.critic_spans()) std::ranges::fill(s, 0.0);
    ppo_loss(nets, batch, p, &grad);
    auto f = [&] {
      const PpoLoss l = ppo_loss(nets, batch, p);
      return l.actor + l.critic;
    };
    double e = 0.0;
    auto pa = nets.actor_spans();
    auto ga = grad.actor_spans();
    for (std::size_t i = 0; i < pa.size(); ++i) e = std::max(e, finite_diff_check(f, pa[i], ga[i]));
    auto pc = nets.critic_spans();
    auto gc = grad.critic_spans();
    for (std::size_t i = 0; i < pc.size(); ++i) e = std::max(e, finite_diff_check(f, pc[i], gc[i]));
    out.push_back({"ppo_loss", e});
  }
  return out;
}

std::filesystem::path source_dir() { return ADAVIT_SOURCE_DIR; }

}  // namespace adavit::testing
