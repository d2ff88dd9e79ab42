#include "adavit/elastic_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace adavit {

namespace {

Mat col_block(const Mat& m, std::size_t start, std::size_t width) {
  Mat out(m.rows, width);
  for (std::size_t i = 0; i < m.rows; ++i)
    std::copy_n(m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols + start), width,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * width));
  return out;
}

void set_col_block(Mat& m, std::size_t start, const Mat& block) {
  for (std::size_t i = 0; i < block.rows; ++i)
    std::copy_n(block.data.begin() + static_cast<std::ptrdiff_t>(i * block.cols), block.cols,
                m.data.begin() + static_cast<std::ptrdiff_t>(i * m.cols + start));
}

std::span<const double> vec(const Mat& m) { return {m.data.data(), m.data.size()}; }
std::span<double> vec(Mat& m) { return {m.data.data(), m.data.size()}; }

void add_to(std::span<double> dst, std::span<const double> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

void check_arch(const BlockWeights& w, const BlockArch& arch, std::size_t heads,
                std::size_t hidden) {
  if (arch.phi == 0 || arch.phi > w.wq.rows)
    throw ConfigError("attention width " + std::to_string(arch.phi) + " outside [1, " +
                      std::to_string(w.wq.rows) + "]");
  if (arch.phi % heads != 0)
    throw ConfigError("attention width " + std::to_string(arch.phi) +
                      " is not divisible by heads " + std::to_string(heads));
  if (hidden == 0 || hidden > w.w_up.rows)
    throw ConfigError("MLP hidden width " + std::to_string(hidden) + " exceeds stored " +
                      std::to_string(w.w_up.rows));
}

Mat embed(const WeightStore& w, const Mat& patches) {
  const std::size_t c = w.config.c_max();
  Mat x(patches.rows + 1, c);
  for (std::size_t k = 0; k < c; ++k) x(0, k) = w.cls(0, k) + w.pos(0, k);
  const Mat proj = matmul_nt(patches, w.patch_w);
  for (std::size_t i = 0; i < patches.rows; ++i)
    for (std::size_t k = 0; k < c; ++k)
      x(i + 1, k) = proj(i, k) + w.patch_b(0, k) + w.pos(i + 1, k);
  return x;
}

}  // namespace

WeightStore WeightStore::init(const ElasticConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t c = cfg.c_max();
  const std::size_t h = cfg.max_hidden();
  const double sd = 0.02;
  WeightStore w;
  w.config = cfg;
  w.patch_w = random_normal(c, cfg.patch_dim(), sd, rng);
  w.patch_b = Mat(1, c);
  w.cls = random_normal(1, c, sd, rng);
  w.pos = random_normal(cfg.tokens(), c, sd, rng);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    BlockWeights bw;
    bw.ln1_scale = Mat(1, c, 1.0);
    bw.ln1_shift = Mat(1, c);
    bw.wq = random_normal(c, c, sd, rng);
    bw.wk = random_normal(c, c, sd, rng);
    bw.wv = random_normal(c, c, sd, rng);
    bw.wo = random_normal(c, c, sd, rng);
    bw.bo = Mat(1, c);
    bw.ln2_scale = Mat(1, c, 1.0);
    bw.ln2_shift = Mat(1, c);
    bw.w_up = random_normal(h, c, sd, rng);
    bw.b_up = Mat(1, h);
    bw.w_down = random_normal(c, h, sd, rng);
    bw.b_down = Mat(1, c);
    w.blocks.push_back(std::move(bw));
  }
  w.norm_scale = Mat(1, c, 1.0);
  w.norm_shift = Mat(1, c);
  w.head_w = random_normal(cfg.num_classes, c, sd, rng);
  w.head_b = Mat(1, cfg.num_classes);
  return w;
}

WeightStore WeightStore::zeros_like(const WeightStore& w) {
  WeightStore z = w;
  z.for_each_tensor([](const std::string&, Mat& m) { m.fill(0.0); });
  return z;
}

void WeightStore::for_each_tensor(const std::function<void(const std::string&, Mat&)>& f) {
  f("patch_w", patch_w);
  f("patch_b", patch_b);
  f("cls", cls);
  f("pos", pos);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    BlockWeights& b = blocks[i];
    f(p + "ln1_scale", b.ln1_scale);
    f(p + "ln1_shift", b.ln1_shift);
    f(p + "wq", b.wq);
    f(p + "wk", b.wk);
    f(p + "wv", b.wv);
    f(p + "wo", b.wo);
    f(p + "bo", b.bo);
    f(p + "ln2_scale", b.ln2_scale);
    f(p + "ln2_shift", b.ln2_shift);
    f(p + "w_up", b.w_up);
    f(p + "b_up", b.b_up);
    f(p + "w_down", b.w_down);
    f(p + "b_down", b.b_down);
  }
  f("norm_scale", norm_scale);
  f("norm_shift", norm_shift);
  f("head_w", head_w);
  f("head_b", head_b);
}

void WeightStore::for_each_tensor(
    const std::function<void(const std::string&, const Mat&)>& f) const {
  const_cast<WeightStore*>(this)->for_each_tensor(
      [&](const std::string& name, Mat& m) { f(name, m); });
}

std::vector<std::span<double>> WeightStore::spans() {
  std::vector<std::span<double>> out;
  for_each_tensor([&](const std::string&, Mat& m) { out.push_back(vec(m)); });
  return out;
}

std::size_t WeightStore::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, const Mat& m) { n += m.size(); });
  return n;
}

Mat slice_projection(const Mat& w, std::size_t phi) {
  if (phi == 0) throw std::out_of_range("slice_projection: zero width");
  if (phi > w.rows)
    throw std::out_of_range("slice_projection: width " + std::to_string(phi) + " exceeds " +
                            std::to_string(w.rows) + " rows");
  return top_left(w, phi, w.cols);
}

Mat mhsa_forward(const BlockWeights& w, const Mat& x, std::size_t phi, std::size_t heads,
                 AttentionCache* cache, MacCounter* macs) {
  if (phi == 0 || heads == 0 || phi % heads != 0)
    throw ConfigError("attention width " + std::to_string(phi) + " is not divisible by heads " +
                      std::to_string(heads));
  const Mat q = matmul_nt(x, slice_projection(w.wq, phi), macs);
  const Mat k = matmul_nt(x, slice_projection(w.wk, phi), macs);
  const Mat v = matmul_nt(x, slice_projection(w.wv, phi), macs);
  const std::size_t dh = phi / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat concat(x.rows, phi);
  std::vector<Mat> probs;
  probs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Mat qh = col_block(q, h * dh, dh);
    const Mat kh = col_block(k, h * dh, dh);
    const Mat vh = col_block(v, h * dh, dh);
    Mat s = matmul_nt(qh, kh, macs);
    scale_inplace(s, scale);
    Mat p = softmax_rows(s);
    set_col_block(concat, h * dh, matmul(p, vh, macs));
    probs.push_back(std::move(p));
  }
  Mat y = matmul_nt(concat, top_left(w.wo, w.wo.rows, phi), macs);
  add_row_bias(y, vec(w.bo));
  if (cache) {
    cache->input = x;
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->probs = std::move(probs);
    cache->concat = std::move(concat);
    cache->phi = phi;
  }
  return y;
}

Mat mlp_forward(const BlockWeights& w, const Mat& x, std::size_t hidden, MlpCache* cache,
                MacCounter* macs) {
  if (hidden == 0 || hidden > w.w_up.rows)
    throw ConfigError("MLP hidden width " + std::to_string(hidden) + " exceeds stored " +
                      std::to_string(w.w_up.rows));
  Mat pre = matmul_nt(x, top_left(w.w_up, hidden, w.w_up.cols), macs);
  add_row_bias(pre, vec(w.b_up));
  Mat act = gelu(pre);
  Mat y = matmul_nt(act, top_left(w.w_down, w.w_down.rows, hidden), macs);
  add_row_bias(y, vec(w.b_down));
  if (cache) {
    cache->input = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
    cache->hidden = hidden;
  }
  return y;
}

Mat block_forward(const BlockWeights& w, const Mat& x, const BlockArch& arch,
                  const ElasticConfig& cfg, BlockCache* cache, MacCounter* macs) {
  const std::size_t hidden = cfg.hidden_width(arch.mlp_ratio);
  check_arch(w, arch, cfg.heads, hidden);
  LayerNormCache* ln1 = cache ? &cache->ln1 : nullptr;
  LayerNormCache* ln2 = cache ? &cache->ln2 : nullptr;
  const Mat h1 = layer_norm(x, vec(w.ln1_scale), vec(w.ln1_shift), kLayerNormEps, ln1);
  Mat y = mhsa_forward(w, h1, arch.phi, cfg.heads, cache ? &cache->attn : nullptr, macs);
  add_inplace(y, x);
  const Mat h2 = layer_norm(y, vec(w.ln2_scale), vec(w.ln2_shift), kLayerNormEps, ln2);
  add_inplace(y, mlp_forward(w, h2, hidden, cache ? &cache->mlp : nullptr, macs));
  if (cache) cache->arch = arch;
  return y;
}

namespace {

Mat mlp_backward(const BlockWeights& w, const MlpCache& c, const Mat& g, BlockWeights& grad) {
  const std::size_t hidden = c.hidden;
  accumulate_col_sums(vec(grad.b_down), g);
  add_top_left(grad.w_down, matmul_tn(g, c.act));
  const Mat dact = matmul(g, top_left(w.w_down, w.w_down.rows, hidden));
  const Mat dpre = gelu_backward(c.pre, dact);
  accumulate_col_sums(vec(grad.b_up), dpre);
  add_top_left(grad.w_up, matmul_tn(dpre, c.input));
  return matmul(dpre, top_left(w.w_up, hidden, w.w_up.cols));
}

Mat mhsa_backward(const BlockWeights& w, const AttentionCache& c, const Mat& g,
                  std::size_t heads, BlockWeights& grad) {
  const std::size_t phi = c.phi;
  const std::size_t dh = phi / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  accumulate_col_sums(vec(grad.bo), g);
  add_top_left(grad.wo, matmul_tn(g, c.concat));
  const Mat dconcat = matmul(g, top_left(w.wo, w.wo.rows, phi));
  const std::size_t n = g.rows;
  Mat dq(n, phi), dk(n, phi), dv(n, phi);
  for (std::size_t h = 0; h < heads; ++h) {
    const Mat qh = col_block(c.q, h * dh, dh);
    const Mat kh = col_block(c.k, h * dh, dh);
    const Mat vh = col_block(c.v, h * dh, dh);
    const Mat doh = col_block(dconcat, h * dh, dh);
    const Mat& p = c.probs[h];
    const Mat dp = matmul_nt(doh, vh);
    set_col_block(dv, h * dh, matmul_tn(p, doh));
    Mat ds = softmax_rows_backward(p, dp);
    scale_inplace(ds, scale);
    set_col_block(dq, h * dh, matmul(ds, kh));
    set_col_block(dk, h * dh, matmul_tn(ds, qh));
  }
  add_top_left(grad.wq, matmul_tn(dq, c.input));
  add_top_left(grad.wk, matmul_tn(dk, c.input));
  add_top_left(grad.wv, matmul_tn(dv, c.input));
  Mat dx = matmul(dq, slice_projection(w.wq, phi));
  add_inplace(dx, matmul(dk, slice_projection(w.wk, phi)));
  add_inplace(dx, matmul(dv, slice_projection(w.wv, phi)));
  return dx;
}

}  // namespace

Mat block_backward(const BlockWeights& w, const BlockCache& cache, const Mat& grad_out,
                   std::size_t heads, BlockWeights& grad) {
  const Mat dh2 = mlp_backward(w, cache.mlp, grad_out, grad);
  const LayerNormGrad g2 = layer_norm_backward(cache.ln2, vec(w.ln2_scale), dh2);
  add_to(vec(grad.ln2_scale), g2.dscale);
  add_to(vec(grad.ln2_shift), g2.dshift);
  Mat dy1 = grad_out;
  add_inplace(dy1, g2.dx);
  const Mat dh1 = mhsa_backward(w, cache.attn, dy1, heads, grad);
  const LayerNormGrad g1 = layer_norm_backward(cache.ln1, vec(w.ln1_scale), dh1);
  add_to(vec(grad.ln1_scale), g1.dscale);
  add_to(vec(grad.ln1_shift), g1.dshift);
  add_inplace(dy1, g1.dx);
  return dy1;
}

ImportanceScores cls_importance(const AttentionCache& cache, std::size_t heads,
                                ImportanceMode mode) {
  if (cache.probs.size() != heads) throw DimensionError("cls_importance: head count");
  const std::size_t n = cache.probs.front().cols;
  ImportanceScores s{std::vector<double>(n - 1, 0.0)};
  for (const Mat& p : cache.probs)
    for (std::size_t j = 1; j < n; ++j) s.values[j - 1] += p(0, j);
  for (double& v : s.values) v /= static_cast<double>(heads);
  if (mode == ImportanceMode::value_weighted) {
    for (std::size_t j = 1; j < n; ++j) {
      double sq = 0.0;
      for (double v : cache.v.row(j)) sq += v * v;
      s.values[j - 1] *= std::sqrt(sq);
    }
  }
  return s;
}

// ---------------------------------------------------------------------------

std::uint64_t block_macs_formula(std::size_t n, std::size_t phi, std::size_t hidden,
                                 std::size_t c) {
  const std::uint64_t N = n, P = phi, H = hidden, C = c;
  return 4 * N * P * C + 2 * N * N * P + 2 * N * H * C;
}

std::uint64_t block_macs_traced(std::size_t n, std::size_t phi, std::size_t heads,
                                std::size_t hidden, std::size_t c) {
  MacCounter m;
  const std::size_t dh = phi / heads;
  for (int i = 0; i < 3; ++i) m.add(n, c, phi);  // q, k, v
  for (std::size_t h = 0; h < heads; ++h) {
    m.add(n, dh, n);  // scores
    m.add(n, n, dh);  // probs * v
  }
  m.add(n, phi, c);       // output projection
  m.add(n, c, hidden);    // up
  m.add(n, hidden, c);    // down
  return m.macs;
}

std::uint64_t uniform_closed_form(std::size_t n, std::size_t c, std::size_t depth) {
  const std::uint64_t N = n, C = c;
  return (12 * N * C * C + 2 * N * N * C) * depth;
}

std::uint64_t full_model_macs(const ElasticConfig& cfg) {
  return block_macs_formula(cfg.tokens(), cfg.c_max(), cfg.max_hidden(), cfg.c_max()) *
         cfg.depth;
}

FlopsReport count_flops(const ElasticConfig& cfg, std::span<const BlockShape> blocks) {
  FlopsReport r;
  const std::size_t c = cfg.c_max();
  for (const BlockShape& b : blocks) {
    const std::size_t hidden = cfg.hidden_width(b.arch.mlp_ratio);
    const std::uint64_t traced = block_macs_traced(b.tokens, b.arch.phi, cfg.heads, hidden, c);
    r.per_block.push_back(traced);
    r.measured_total += traced;
    r.formula_total += block_macs_formula(b.tokens, b.arch.phi, hidden, c);
  }
  r.full_total = full_model_macs(cfg);
  r.flops_ratio = r.full_total ? static_cast<double>(r.measured_total) /
                                     static_cast<double>(r.full_total)
                               : 1.0;
  return r;
}

std::vector<BlockShape> plan_shapes(const ElasticConfig& cfg,
                                    std::span<const GroupDecision> decided) {
  if (decided.size() != cfg.decided_groups())
    throw DimensionError("plan_shapes: expected " + std::to_string(cfg.decided_groups()) +
                         " group decisions, got " + std::to_string(decided.size()));
  std::vector<BlockShape> out;
  std::size_t n = cfg.num_patches();
  for (std::size_t k = 0; k < cfg.group_size; ++k) out.push_back({n + 1, max_arch(cfg)});
  for (const GroupDecision& d : decided) {
    const auto archs = d.archs(cfg);
    out.push_back({n + 1, archs.at(0)});
    n = reduced_count(n, d.token);
    for (std::size_t k = 1; k < cfg.group_size; ++k) out.push_back({n + 1, archs.at(k)});
  }
  return out;
}

std::vector<BlockArch> sample_random_arch(const ElasticConfig& cfg, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pe(0, cfg.embed_choices.size() - 1);
  std::uniform_int_distribution<std::size_t> pm(0, cfg.mlp_ratio_choices.size() - 1);
  std::vector<BlockArch> out;
  out.reserve(cfg.depth);
  for (std::size_t b = 0; b < cfg.depth; ++b) {
    const std::size_t e = pe(rng);
    const std::size_t m = pm(rng);
    out.push_back({cfg.embed_choices[e], cfg.mlp_ratio_choices[m]});
  }
  return out;
}

// ---------------------------------------------------------------------------

Mat patchify(std::span<const double> image, const ElasticConfig& cfg) {
  const std::size_t side = cfg.image_side;
  const std::size_t ps = cfg.patch_side;
  if (image.size() != cfg.channels * side * side)
    throw DimensionError("patchify: image has " + std::to_string(image.size()) +
                         " values, expected " + std::to_string(cfg.channels * side * side));
  const std::size_t grid = side / ps;
  Mat out(grid * grid, cfg.patch_dim());
  for (std::size_t py = 0; py < grid; ++py)
    for (std::size_t px = 0; px < grid; ++px) {
      auto r = out.row(py * grid + px);
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < cfg.channels; ++ch)
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx)
            r[k++] = image[(ch * side + py * ps + dy) * side + px * ps + dx];
    }
  return out;
}

SampleRun::SampleRun(const WeightStore& w, std::span<const double> image, ForwardOptions opts,
                     bool keep_tape)
    : w_(&w), opts_(opts), keep_tape_(keep_tape), patches_(patchify(image, w.config)) {
  x_ = embed(w, patches_);
  sizes_.assign(x_.rows, 1.0);
}

bool SampleRun::finished() const { return next_block_ >= w_->config.depth; }

void SampleRun::run_group(std::span<const BlockArch> archs, const TokenDecision& token) {
  const ElasticConfig& cfg = w_->config;
  if (finished()) throw std::logic_error("SampleRun: all groups already ran");
  if (archs.size() != cfg.group_size)
    throw DimensionError("SampleRun: expected " + std::to_string(cfg.group_size) +
                         " block archs, got " + std::to_string(archs.size()));
  const std::size_t g = traces_.size();
  GroupTrace trace;
  trace.archs.assign(archs.begin(), archs.end());
  trace.token = token;
  trace.tokens_before = x_.rows - 1;
  for (std::size_t k = 0; k < cfg.group_size; ++k) {
    const std::size_t b = next_block_++;
    MacCounter macs;
    BlockCache cache;
    shapes_.push_back({x_.rows, archs[k]});
    x_ = block_forward(w_->blocks[b], x_, archs[k], cfg, &cache, &macs);
    trace.macs += macs.macs;
    measured_ += macs.macs;
    last_keys_ = cache.attn.k;
    std::optional<Reduction> red;
    if (k == 0 && g > 0) {
      const ImportanceScores scores = cls_importance(cache.attn, cfg.heads, opts_.importance);
      const Mat* features = opts_.similarity == SimilarityFeature::keys ? &cache.attn.k : nullptr;
      red = reduce_tokens(x_, scores, token, ReductionOptions{opts_.merge_mode}, features,
                          sizes_);
    }
    if (keep_tape_) tape_.push_back({Step::Kind::block, b, std::move(cache), {}});
    if (red) {
      x_ = std::move(red->x);
      sizes_ = std::move(red->sizes);
      if (keep_tape_) tape_.push_back({Step::Kind::reduce, b, {}, std::move(red->map)});
    }
  }
  trace.tokens_after = x_.rows - 1;
  traces_.push_back(std::move(trace));
  logits_.reset();
}

void SampleRun::run_group(const GroupDecision& d) {
  const auto archs = d.archs(w_->config);
  run_group(archs, d.token);
}

void SampleRun::run_first_group() {
  const std::vector<BlockArch> archs(w_->config.group_size, max_arch(w_->config));
  run_group(archs, TokenDecision::keep_all(opts_.strategy));
}

std::vector<double> SampleRun::state() const {
  std::vector<double> s(w_->config.tokens(), 0.0);
  if (last_keys_.empty()) return s;
  for (std::size_t i = 0; i < last_keys_.rows; ++i) {
    double sum = 0.0;
    for (double v : last_keys_.row(i)) sum += v;
    s[i] = sum / static_cast<double>(last_keys_.cols);
  }
  return s;
}

const Mat& SampleRun::logits() {
  if (!finished()) throw std::logic_error("SampleRun: logits before the last group");
  if (!logits_) {
    const Mat cls = top_left(x_, 1, x_.cols);
    cls_normed_ = layer_norm(cls, vec(w_->norm_scale), vec(w_->norm_shift), kLayerNormEps,
                             &final_ln_);
    Mat out = matmul_nt(cls_normed_, w_->head_w);
    add_row_bias(out, vec(w_->head_b));
    logits_ = std::move(out);
  }
  return *logits_;
}

int SampleRun::prediction() {
  const Mat& l = logits();
  return static_cast<int>(std::max_element(l.data.begin(), l.data.end()) - l.data.begin());
}

double SampleRun::keep_rate() const {
  double r = 1.0;
  for (const GroupTrace& t : traces_)
    r *= static_cast<double>(t.tokens_after) / static_cast<double>(t.tokens_before);
  return r;
}

FlopsReport SampleRun::flops() const {
  FlopsReport r = count_flops(w_->config, shapes_);
  r.measured_total = measured_;
  r.flops_ratio = static_cast<double>(measured_) / static_cast<double>(r.full_total);
  return r;
}

void SampleRun::backward(const Mat& dlogits, WeightStore& grad) const {
  if (!keep_tape_) throw std::logic_error("SampleRun::backward without a tape");
  if (!logits_) throw std::logic_error("SampleRun::backward before logits()");
  const ElasticConfig& cfg = w_->config;
  add_inplace(grad.head_w, matmul_tn(dlogits, cls_normed_));
  accumulate_col_sums(vec(grad.head_b), dlogits);
  const Mat dnormed = matmul(dlogits, w_->head_w);
  const LayerNormGrad lg = layer_norm_backward(final_ln_, vec(w_->norm_scale), dnormed);
  add_to(vec(grad.norm_scale), lg.dscale);
  add_to(vec(grad.norm_shift), lg.dshift);
  Mat dx(x_.rows, x_.cols);
  std::copy(lg.dx.data.begin(), lg.dx.data.end(), dx.data.begin());
  for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
    if (it->kind == Step::Kind::reduce) {
      dx = it->map.backward(dx);
    } else {
      dx = block_backward(w_->blocks[it->block], it->cache, dx, cfg.heads,
                          grad.blocks[it->block]);
    }
  }
  for (std::size_t k = 0; k < dx.cols; ++k) grad.cls(0, k) += dx(0, k);
  add_inplace(grad.pos, dx);
  Mat dtok(dx.rows - 1, dx.cols);
  std::copy(dx.data.begin() + static_cast<std::ptrdiff_t>(dx.cols), dx.data.end(),
            dtok.data.begin());
  add_inplace(grad.patch_w, matmul_tn(dtok, patches_));
  accumulate_col_sums(vec(grad.patch_b), dtok);
}

ForwardResult model_forward(const WeightStore& w, std::span<const double> image,
                            std::span<const GroupDecision> decided,
                            const ForwardOptions& opts) {
  if (decided.size() != w.config.decided_groups())
    throw DimensionError("model_forward: expected " + std::to_string(w.config.decided_groups()) +
                         " group decisions, got " + std::to_string(decided.size()));
  SampleRun run(w, image, opts);
  run.run_first_group();
  for (const GroupDecision& d : decided) run.run_group(d);
  ForwardResult r;
  r.logits = run.logits();
  r.prediction = run.prediction();
  r.flops = run.flops();
  r.groups = run.traces();
  r.keep_rate = run.keep_rate();
  return r;
}

std::vector<ForwardResult> model_forward_batch(const WeightStore& w,
                                               std::span<const std::vector<double>> images,
                                               std::span<const GroupDecision> decided,
                                               const ForwardOptions& opts) {
  std::vector<ForwardResult> out;
  out.reserve(images.size());
  for (const auto& img : images) out.push_back(model_forward(w, img, decided, opts));
  return out;
}

// ---------------------------------------------------------------------------
// Masked batched forward.

namespace {

Mat flatten(const Tensor3& t) {
  Mat m(t.batch * t.tokens, t.channels);
  m.data = t.data;
  return m;
}

Tensor3 unflatten(Mat m, std::size_t batch, std::size_t tokens) {
  Tensor3 t;
  t.batch = batch;
  t.tokens = tokens;
  t.channels = m.cols;
  t.data = std::move(m.data);
  return t;
}

// Zeroes columns at or beyond width[i] in every row of sample i.
void mask_columns(Mat& m, std::size_t tokens, std::span<const std::size_t> width) {
  for (std::size_t i = 0; i < width.size(); ++i)
    for (std::size_t j = 0; j < tokens; ++j) {
      auto r = m.row(i * tokens + j);
      std::fill(r.begin() + static_cast<std::ptrdiff_t>(width[i]), r.end(), 0.0);
    }
}

void mask_tokens(Tensor3& t, std::span<const std::size_t> d_t) {
  for (std::size_t i = 0; i < t.batch; ++i)
    for (std::size_t j = d_t[i]; j < t.tokens; ++j) std::ranges::fill(t.row(i, j), 0.0);
}

struct MaskedBlockOut {
  Tensor3 x;
  std::vector<ImportanceScores> scores;
};

MaskedBlockOut masked_block(const BlockWeights& w, const Tensor3& x,
                            std::span<const std::size_t> d_t,
                            std::span<const BlockArch> archs, const ElasticConfig& cfg,
                            ImportanceMode importance) {
  const std::size_t b = x.batch;
  const std::size_t n = x.tokens;
  const std::size_t c = x.channels;
  const std::size_t heads = cfg.heads;
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> phi(b), hidden(b);
  for (std::size_t i = 0; i < b; ++i) {
    phi[i] = archs[i].phi;
    hidden[i] = cfg.hidden_width(archs[i].mlp_ratio);
    check_arch(w, archs[i], heads, hidden[i]);
  }
  const Tensor3 full_mask(b, n, c, 1.0);

  const Mat h1 = flatten(masked_layer_norm(x, full_mask, vec(w.ln1_scale), vec(w.ln1_shift)));
  Mat q = matmul_nt(h1, w.wq);
  Mat k = matmul_nt(h1, w.wk);
  Mat v = matmul_nt(h1, w.wv);
  mask_columns(q, n, phi);
  mask_columns(k, n, phi);
  mask_columns(v, n, phi);

  MaskedBlockOut out;
  out.scores.resize(b);
  Mat concat(b * n, c);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t dh = phi[i] / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> cls_row(n, 0.0);
    for (std::size_t h = 0; h < heads; ++h) {
      Mat s(n, n);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t t = 0; t < n; ++t) {
          if (t >= d_t[i]) {
            s(r, t) = neg_inf;
            continue;
          }
          double acc = 0.0;
          for (std::size_t e = 0; e < dh; ++e)
            acc += q(i * n + r, h * dh + e) * k(i * n + t, h * dh + e);
          s(r, t) = acc * scale;
        }
      const Mat p = softmax_rows(s);
      for (std::size_t t = 0; t < n; ++t) cls_row[t] += p(0, t);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t t = 0; t < d_t[i]; ++t) {
          const double pv = p(r, t);
          for (std::size_t e = 0; e < dh; ++e)
            concat(i * n + r, h * dh + e) += pv * v(i * n + t, h * dh + e);
        }
    }
    ImportanceScores& sc = out.scores[i];
    sc.values.resize(d_t[i] - 1);
    for (std::size_t t = 1; t < d_t[i]; ++t) {
      double val = cls_row[t] / static_cast<double>(heads);
      if (importance == ImportanceMode::value_weighted) {
        double sq = 0.0;
        for (std::size_t e = 0; e < phi[i]; ++e) sq += v(i * n + t, e) * v(i * n + t, e);
        val *= std::sqrt(sq);
      }
      sc.values[t - 1] = val;
    }
  }
  Mat a = matmul_nt(concat, w.wo);
  add_row_bias(a, vec(w.bo));
  Tensor3 y1 = unflatten(std::move(a), b, n);
  for (std::size_t idx = 0; idx < y1.data.size(); ++idx) y1.data[idx] += x.data[idx];
  mask_tokens(y1, d_t);

  const Mat h2 = flatten(masked_layer_norm(y1, full_mask, vec(w.ln2_scale), vec(w.ln2_shift)));
  Mat pre = matmul_nt(h2, w.w_up);
  add_row_bias(pre, vec(w.b_up));
  Mat act = gelu(pre);
  mask_columns(act, n, hidden);
  Mat m = matmul_nt(act, w.w_down);
  add_row_bias(m, vec(w.b_down));
  for (std::size_t idx = 0; idx < y1.data.size(); ++idx) y1.data[idx] += m.data[idx];
  mask_tokens(y1, d_t);
  out.x = std::move(y1);
  return out;
}

}  // namespace

Mat masked_model_forward(const WeightStore& w, std::span<const std::vector<double>> images,
                         std::span<const std::vector<GroupDecision>> decided,
                         const ForwardOptions& opts) {
  const ElasticConfig& cfg = w.config;
  if (opts.similarity != SimilarityFeature::tokens || opts.merge_mode != MergeMode::sum)
    throw ConfigError("masked forward supports token similarity with sum merging only");
  if (decided.size() != images.size())
    throw DimensionError("masked_model_forward: one decision list per sample required");
  const std::size_t b = images.size();
  const std::size_t n = cfg.tokens();
  const std::size_t c = cfg.c_max();
  MaskedBatch batch{Tensor3(b, n, c), std::vector<std::size_t>(b, c),
                    std::vector<std::size_t>(b, n)};
  for (std::size_t i = 0; i < b; ++i) {
    if (decided[i].size() != cfg.decided_groups())
      throw DimensionError("masked_model_forward: sample " + std::to_string(i) +
                           " has the wrong number of group decisions");
    batch.x.set_slice(i, embed(w, patchify(images[i], cfg)));
  }
  std::vector<BlockArch> archs(b);
  std::vector<TokenDecision> tokens(b);
  for (std::size_t g = 0; g < cfg.groups(); ++g) {
    for (std::size_t k = 0; k < cfg.group_size; ++k) {
      for (std::size_t i = 0; i < b; ++i) {
        if (g == 0) {
          archs[i] = max_arch(cfg);
        } else {
          const GroupDecision& d = decided[i][g - 1];
          archs[i] = {cfg.embed_choices.at(d.mhsa_index.at(k)),
                      cfg.mlp_ratio_choices.at(d.mlp_index.at(k))};
          tokens[i] = d.token;
        }
      }
      MaskedBlockOut o = masked_block(w.blocks[g * cfg.group_size + k], batch.x, batch.d_t,
                                      archs, cfg, opts.importance);
      batch.x = std::move(o.x);
      if (k == 0 && g > 0) batch = masked_reduce(batch, o.scores, tokens, opts.merge_mode);
    }
  }
  Mat cls(b, c);
  for (std::size_t i = 0; i < b; ++i)
    std::ranges::copy(batch.x.row(i, 0), cls.row(i).begin());
  Mat logits = matmul_nt(layer_norm(cls, vec(w.norm_scale), vec(w.norm_shift)), w.head_w);
  add_row_bias(logits, vec(w.head_b));
  return logits;
}

}  // namespace adavit
