#include "adavit/token_ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace adavit {

std::size_t round_half_up(double v) {
  if (!(v >= 0.0)) return 0;
  return static_cast<std::size_t>(std::floor(v + 0.5));
}

std::size_t kept_count(std::size_t n, double t) {
  if (n == 0) return 0;
  const double tc = std::clamp(t, 0.0, 1.0);
  return std::clamp<std::size_t>(round_half_up(static_cast<double>(n) * tc), 1, n);
}

SortedTokens sort_by_importance(const Mat& x, const ImportanceScores& scores) {
  if (x.rows == 0) throw DimensionError("sort_by_importance: missing CLS row");
  const std::size_t n = x.rows - 1;
  if (scores.values.size() != n)
    throw DimensionError("sort_by_importance: " + std::to_string(scores.values.size()) +
                         " scores for " + std::to_string(n) + " tokens");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.values[a] > scores.values[b];
  });
  SortedTokens out{Mat(x.rows, x.cols), std::vector<std::size_t>(x.rows)};
  out.permutation[0] = 0;
  std::copy(x.row(0).begin(), x.row(0).end(), out.x.row(0).begin());
  for (std::size_t i = 0; i < n; ++i) {
    out.permutation[i + 1] = order[i] + 1;
    auto src = x.row(order[i] + 1);
    std::copy(src.begin(), src.end(), out.x.row(i + 1).begin());
  }
  return out;
}

Mat prune_tokens(const Mat& x_sorted, double t) {
  if (x_sorted.rows == 0) throw DimensionError("prune_tokens: missing CLS row");
  const std::size_t n = x_sorted.rows - 1;
  return top_left(x_sorted, 1 + kept_count(n, t), x_sorted.cols);
}

namespace {

Mat row_range(const Mat& x, std::size_t begin, std::size_t end) {
  Mat out(end - begin, x.cols);
  std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(begin * x.cols),
            x.data.begin() + static_cast<std::ptrdiff_t>(end * x.cols), out.data.begin());
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

// Divides once so that exactly tied directions give bitwise equal scores.
double cosine(std::span<const double> a, std::span<const double> b, double norm_a, double norm_b) {
  if (norm_a == 0.0 || norm_b == 0.0) return 0.0;
  return dot(a, b) / (norm_a * norm_b);
}

// Combine merged rows: sum, or size-weighted mean with the target.
void combine(Mat& merged, const Mat& unimportant, std::span<const std::size_t> target,
             MergeMode mode, std::span<const double> im_sizes,
             std::span<const double> un_sizes) {
  if (mode == MergeMode::sum) {
    for (std::size_t u = 0; u < unimportant.rows; ++u) {
      auto dst = merged.row(target[u]);
      auto src = unimportant.row(u);
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
    return;
  }
  auto size_of = [](std::span<const double> s, std::size_t i) {
    return s.empty() ? 1.0 : s[i];
  };
  std::vector<double> total(merged.rows);
  for (std::size_t m = 0; m < merged.rows; ++m) {
    total[m] = size_of(im_sizes, m);
    for (double& v : merged.row(m)) v *= total[m];
  }
  for (std::size_t u = 0; u < unimportant.rows; ++u) {
    const double w = size_of(un_sizes, u);
    auto dst = merged.row(target[u]);
    auto src = unimportant.row(u);
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += w * src[k];
    total[target[u]] += w;
  }
  for (std::size_t m = 0; m < merged.rows; ++m)
    for (double& v : merged.row(m)) v /= total[m];
}

}  // namespace

TokenSplit split_tokens(const Mat& x_sorted, double t) {
  if (x_sorted.rows < 2) throw DimensionError("split_tokens: need CLS and at least one token");
  const std::size_t n = x_sorted.rows - 1;
  const std::size_t m = kept_count(n, t);
  return {row_range(x_sorted, 0, 1), row_range(x_sorted, 1, 1 + m),
          row_range(x_sorted, 1 + m, x_sorted.rows)};
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  return cosine(a, b, norm(a), norm(b));
}

MergeResult merge_tokens_by(const Mat& important, const Mat& unimportant,
                            const Mat& important_features, const Mat& unimportant_features,
                            MergeMode mode, std::span<const double> important_sizes,
                            std::span<const double> unimportant_sizes) {
  if (important.rows == 0) throw DimensionError("merge_tokens: no important tokens");
  if (important_features.rows != important.rows || unimportant_features.rows != unimportant.rows)
    throw DimensionError("merge_tokens: feature rows do not align with tokens");
  MergeResult r{important, std::vector<std::size_t>(unimportant.rows, 0)};
  if (unimportant.rows == 0) return r;
  std::vector<double> im_norm(important.rows);
  for (std::size_t m = 0; m < important.rows; ++m) im_norm[m] = norm(important_features.row(m));
  for (std::size_t u = 0; u < unimportant.rows; ++u) {
    const auto un = unimportant_features.row(u);
    const double un_norm = norm(un);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < important.rows; ++m) {
      const double c = cosine(un, important_features.row(m), un_norm, im_norm[m]);
      if (c > best) {
        best = c;
        r.target[u] = m;
      }
    }
  }
  combine(r.merged, unimportant, r.target, mode, important_sizes, unimportant_sizes);
  return r;
}

MergeResult merge_tokens(const Mat& important, const Mat& unimportant, MergeMode mode) {
  return merge_tokens_by(important, unimportant, important, unimportant, mode);
}

Mat prune_then_merge(const Mat& x_sorted, double t_prune, double t_merge, MergeMode mode) {
  const Mat pruned = prune_tokens(x_sorted, t_prune);
  const TokenSplit s = split_tokens(pruned, t_merge);
  const Mat merged = merge_tokens(s.important, s.unimportant, mode).merged;
  Mat out(1 + merged.rows, x_sorted.cols);
  std::copy(s.cls.data.begin(), s.cls.data.end(), out.data.begin());
  std::copy(merged.data.begin(), merged.data.end(),
            out.data.begin() + static_cast<std::ptrdiff_t>(x_sorted.cols));
  return out;
}

std::size_t reduced_count(std::size_t n, const TokenDecision& d) {
  switch (d.strategy) {
    case TokenStrategy::prune:
    case TokenStrategy::merge: return kept_count(n, d.t);
    case TokenStrategy::prune_then_merge: return kept_count(kept_count(n, d.t_prune), d.t_merge);
  }
  return n;
}

TokenMap TokenMap::identity(std::size_t n) {
  TokenMap m;
  m.input_rows = n;
  m.sources.resize(n);
  for (std::size_t i = 0; i < n; ++i) m.sources[i] = {{i, 1.0}};
  return m;
}

Mat TokenMap::apply(const Mat& x) const {
  if (x.rows != input_rows) throw DimensionError("TokenMap::apply: row count");
  Mat out(sources.size(), x.cols);
  for (std::size_t m = 0; m < sources.size(); ++m) {
    auto dst = out.row(m);
    for (auto [src, w] : sources[m]) {
      auto s = x.row(src);
      for (std::size_t k = 0; k < x.cols; ++k) dst[k] += w * s[k];
    }
  }
  return out;
}

Mat TokenMap::backward(const Mat& grad_out) const {
  if (grad_out.rows != sources.size()) throw DimensionError("TokenMap::backward: row count");
  Mat dx(input_rows, grad_out.cols);
  for (std::size_t m = 0; m < sources.size(); ++m) {
    auto g = grad_out.row(m);
    for (auto [src, w] : sources[m]) {
      auto d = dx.row(src);
      for (std::size_t k = 0; k < g.size(); ++k) d[k] += w * g[k];
    }
  }
  return dx;
}

Reduction reduce_tokens(const Mat& x, const ImportanceScores& scores, const TokenDecision& d,
                        const ReductionOptions& opts, const Mat* features,
                        std::span<const double> sizes) {
  const SortedTokens sorted = sort_by_importance(x, scores);
  const std::size_t n = x.rows - 1;
  auto size_at = [&](std::size_t orig) { return sizes.empty() ? 1.0 : sizes[orig]; };

  std::size_t survivors = n;
  std::size_t important = n;
  switch (d.strategy) {
    case TokenStrategy::prune: survivors = important = kept_count(n, d.t); break;
    case TokenStrategy::merge: important = kept_count(n, d.t); break;
    case TokenStrategy::prune_then_merge:
      survivors = kept_count(n, d.t_prune);
      important = kept_count(survivors, d.t_merge);
      break;
  }

  Reduction r;
  r.map.input_rows = x.rows;
  r.map.sources.resize(1 + important);
  r.sizes.assign(1 + important, 0.0);
  r.map.sources[0] = {{0, 1.0}};
  r.sizes[0] = size_at(0);
  for (std::size_t m = 1; m <= important; ++m) {
    r.map.sources[m] = {{sorted.permutation[m], 1.0}};
    r.sizes[m] = size_at(sorted.permutation[m]);
  }

  if (survivors > important) {
    const Mat im = row_range(sorted.x, 1, 1 + important);
    const Mat un = row_range(sorted.x, 1 + important, 1 + survivors);
    Mat im_f = im;
    Mat un_f = un;
    if (features) {
      Mat sorted_f(features->rows, features->cols);
      for (std::size_t i = 0; i < features->rows; ++i) {
        auto s = features->row(sorted.permutation[i]);
        std::copy(s.begin(), s.end(), sorted_f.row(i).begin());
      }
      im_f = row_range(sorted_f, 1, 1 + important);
      un_f = row_range(sorted_f, 1 + important, 1 + survivors);
    }
    const MergeResult mr = merge_tokens_by(im, un, im_f, un_f, MergeMode::sum);
    for (std::size_t u = 0; u < mr.target.size(); ++u) {
      const std::size_t orig = sorted.permutation[1 + important + u];
      r.map.sources[1 + mr.target[u]].push_back({orig, 1.0});
    }
    for (std::size_t m = 1; m <= important; ++m) {
      double total = 0.0;
      for (auto [src, w] : r.map.sources[m]) total += size_at(src);
      r.sizes[m] = total;
      if (opts.merge_mode == MergeMode::mean) {
        for (auto& [src, w] : r.map.sources[m]) w = size_at(src) / total;
      }
    }
  }
  r.x = r.map.apply(x);
  return r;
}

// ---------------------------------------------------------------------------

Mat Tensor3::slice(std::size_t i, std::size_t rows, std::size_t cols) const {
  if (i >= batch || rows > tokens || cols > channels) throw std::out_of_range("Tensor3::slice");
  Mat out(rows, cols);
  for (std::size_t j = 0; j < rows; ++j)
    for (std::size_t k = 0; k < cols; ++k) out(j, k) = at(i, j, k);
  return out;
}

void Tensor3::set_slice(std::size_t i, const Mat& m) {
  if (i >= batch || m.rows > tokens || m.cols > channels)
    throw std::out_of_range("Tensor3::set_slice");
  for (std::size_t j = 0; j < m.rows; ++j)
    for (std::size_t k = 0; k < m.cols; ++k) at(i, j, k) = m(j, k);
}

Tensor3 hadamard(const Tensor3& a, const Tensor3& b) {
  if (a.batch != b.batch || a.tokens != b.tokens || a.channels != b.channels)
    throw DimensionError("hadamard: shape mismatch");
  Tensor3 out = a;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

MaskPair build_masks(std::span<const std::size_t> d_e, std::span<const std::size_t> d_t,
                     std::size_t n_max, std::size_t c_max) {
  if (d_e.size() != d_t.size()) throw DimensionError("build_masks: d_e and d_t lengths differ");
  const std::size_t b = d_e.size();
  MaskPair m{Tensor3(b, n_max, c_max), Tensor3(b, n_max, c_max),
             {d_e.begin(), d_e.end()}, {d_t.begin(), d_t.end()}};
  for (std::size_t i = 0; i < b; ++i) {
    if (d_e[i] > c_max || d_t[i] > n_max)
      throw std::out_of_range("build_masks: sample " + std::to_string(i) + " exceeds " +
                              std::to_string(n_max) + "x" + std::to_string(c_max));
    for (std::size_t j = 0; j < n_max; ++j)
      for (std::size_t k = 0; k < c_max; ++k) {
        m.channel.at(i, j, k) = k < d_e[i] ? 1.0 : 0.0;
        m.token.at(i, j, k) = j < d_t[i] ? 1.0 : 0.0;
      }
  }
  return m;
}

bool is_sentinel_row(std::span<const double> row) {
  return !row.empty() && std::all_of(row.begin(), row.end(), [](double v) {
    return std::isinf(v) && v > 0;
  });
}

MaskedMergeResult masked_merge(const Tensor3& x_im, const Tensor3& x_un, MergeMode mode) {
  if (x_im.batch != x_un.batch || x_im.channels != x_un.channels)
    throw DimensionError("masked_merge: batch or channel mismatch");
  const double neg_inf = -std::numeric_limits<double>::infinity();
  MaskedMergeResult r{Tensor3(x_im.batch, x_im.tokens, x_im.channels), {}};
  r.target.resize(x_im.batch);
  for (std::size_t i = 0; i < x_im.batch; ++i) {
    std::vector<bool> im_live(x_im.tokens);
    std::vector<double> im_norm(x_im.tokens, 0.0);
    std::size_t live_im = 0;
    for (std::size_t m = 0; m < x_im.tokens; ++m) {
      im_live[m] = !is_sentinel_row(x_im.row(i, m));
      if (im_live[m]) {
        im_norm[m] = norm(x_im.row(i, m));
        ++live_im;
      }
    }
    // Cosine similarity matrix with sentinel entries at -inf.
    Mat s(x_un.tokens, x_im.tokens, neg_inf);
    std::vector<std::size_t> live_un_rows;
    for (std::size_t u = 0; u < x_un.tokens; ++u) {
      if (is_sentinel_row(x_un.row(i, u))) continue;
      live_un_rows.push_back(u);
      const auto un = x_un.row(i, u);
      const double un_norm = norm(un);
      for (std::size_t m = 0; m < x_im.tokens; ++m)
        if (im_live[m]) s(u, m) = cosine(un, x_im.row(i, m), un_norm, im_norm[m]);
    }
    if (live_im == 0) {
      if (!live_un_rows.empty())
        throw DimensionError("masked_merge: sample " + std::to_string(i) +
                             " has unimportant tokens but no important ones");
      continue;
    }
    Mat merged(live_im, x_im.channels);
    for (std::size_t m = 0; m < live_im; ++m) {
      auto src = x_im.row(i, m);
      std::copy(src.begin(), src.end(), merged.row(m).begin());
    }
    Mat un_rows(live_un_rows.size(), x_un.channels);
    auto& targets = r.target[i];
    for (std::size_t idx = 0; idx < live_un_rows.size(); ++idx) {
      const std::size_t u = live_un_rows[idx];
      auto src = x_un.row(i, u);
      std::copy(src.begin(), src.end(), un_rows.row(idx).begin());
      std::size_t best_m = 0;
      double best = neg_inf;
      for (std::size_t m = 0; m < x_im.tokens; ++m) {
        if (s(u, m) > best) {
          best = s(u, m);
          best_m = m;
        }
      }
      targets.push_back(best_m);
    }
    combine(merged, un_rows, targets, mode, {}, {});
    r.merged.set_slice(i, merged);
  }
  return r;
}

Tensor3 masked_layer_norm(const Tensor3& x, const Tensor3& channel_mask,
                          std::span<const double> scale, std::span<const double> shift,
                          double eps) {
  if (x.batch != channel_mask.batch || x.tokens != channel_mask.tokens ||
      x.channels != channel_mask.channels)
    throw DimensionError("masked_layer_norm: mask shape");
  if (scale.size() != x.channels || shift.size() != x.channels)
    throw DimensionError("masked_layer_norm: affine length");
  const double c = static_cast<double>(x.channels);
  Tensor3 out(x.batch, x.tokens, x.channels);
  std::vector<double> fill(x.channels);
  for (std::size_t i = 0; i < x.batch; ++i) {
    for (std::size_t j = 0; j < x.tokens; ++j) {
      auto xr = x.row(i, j);
      auto mr = channel_mask.row(i, j);
      double live = 0.0;
      double sum = 0.0;
      for (std::size_t k = 0; k < x.channels; ++k) {
        live += mr[k];
        sum += xr[k] * mr[k];
      }
      if (live == 0.0)
        throw NumericError("masked_layer_norm: all channels masked at (" + std::to_string(i) +
                           ", " + std::to_string(j) + ")");
      const double mean = sum / live;
      for (std::size_t k = 0; k < x.channels; ++k)
        fill[k] = xr[k] * mr[k] + (1.0 - mr[k]) * mean;
      // Full-width statistics of the filled row: same mean, variance scaled by
      // live/C. Scaling eps the same way and the output by sqrt(live/C) makes the
      // live channels equal a LayerNorm over the live channels alone.
      double var = 0.0;
      for (double v : fill) var += (v - mean) * (v - mean);
      var /= c;
      const double ratio = live / c;
      const double inv = std::sqrt(ratio) / std::sqrt(var + eps * ratio);
      auto o = out.row(i, j);
      for (std::size_t k = 0; k < x.channels; ++k)
        o[k] = ((fill[k] - mean) * inv * scale[k] + shift[k]) * mr[k];
    }
  }
  return out;
}

MaskedBatch masked_reduce(const MaskedBatch& in, std::span<const ImportanceScores> scores,
                          std::span<const TokenDecision> decisions, MergeMode mode) {
  const std::size_t b = in.x.batch;
  if (scores.size() != b || decisions.size() != b || in.d_t.size() != b || in.d_e.size() != b)
    throw DimensionError("masked_reduce: batch size mismatch");
  const std::size_t c = in.x.channels;
  const double inf = std::numeric_limits<double>::infinity();

  std::vector<Mat> sorted(b);
  std::vector<std::size_t> survivors(b), important(b);
  std::size_t max_im = 1, max_un = 1;
  for (std::size_t i = 0; i < b; ++i) {
    const Mat live = in.x.slice(i, in.d_t[i], c);
    sorted[i] = sort_by_importance(live, scores[i]).x;
    const std::size_t n = in.d_t[i] - 1;
    const TokenDecision& d = decisions[i];
    switch (d.strategy) {
      case TokenStrategy::prune: survivors[i] = important[i] = kept_count(n, d.t); break;
      case TokenStrategy::merge:
        survivors[i] = n;
        important[i] = kept_count(n, d.t);
        break;
      case TokenStrategy::prune_then_merge:
        survivors[i] = kept_count(n, d.t_prune);
        important[i] = kept_count(survivors[i], d.t_merge);
        break;
    }
    max_im = std::max(max_im, important[i]);
    max_un = std::max(max_un, survivors[i] - important[i]);
  }

  // Pruning is a token-mask update; merging runs batched with +inf sentinels.
  Tensor3 x_im(b, max_im, c, inf);
  Tensor3 x_un(b, max_un, c, inf);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t m = 0; m < important[i]; ++m) {
      auto src = sorted[i].row(1 + m);
      std::copy(src.begin(), src.end(), x_im.row(i, m).begin());
    }
    for (std::size_t u = 0; u < survivors[i] - important[i]; ++u) {
      auto src = sorted[i].row(1 + important[i] + u);
      std::copy(src.begin(), src.end(), x_un.row(i, u).begin());
    }
  }
  const MaskedMergeResult mr = masked_merge(x_im, x_un, mode);

  MaskedBatch out{Tensor3(b, in.x.tokens, c), in.d_e, std::vector<std::size_t>(b)};
  for (std::size_t i = 0; i < b; ++i) {
    auto cls = sorted[i].row(0);
    std::copy(cls.begin(), cls.end(), out.x.row(i, 0).begin());
    for (std::size_t m = 0; m < important[i]; ++m) {
      auto src = mr.merged.row(i, m);
      std::copy(src.begin(), src.end(), out.x.row(i, 1 + m).begin());
    }
    out.d_t[i] = 1 + important[i];
  }
  return out;
}

GroupDecision decision_average(std::span<const GroupDecision> batch, const ElasticConfig& cfg) {
  if (batch.empty()) throw std::invalid_argument("decision_average: empty batch");
  const std::size_t k = batch.front().s_mhsa.size();
  const TokenStrategy strategy = batch.front().token.strategy;
  std::vector<double> mean(action_dim(cfg, strategy), 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const GroupDecision& d : batch) {
    if (d.s_mhsa.size() != k || d.s_mlp.size() != k || d.token.strategy != strategy)
      throw DimensionError("decision_average: heterogeneous decisions");
    for (std::size_t i = 0; i < k; ++i) {
      mean[i] += d.s_mhsa[i] * inv;
      mean[k + i] += d.s_mlp[i] * inv;
    }
    if (strategy == TokenStrategy::prune_then_merge) {
      mean[2 * k] += d.token.t_prune * inv;
      mean[2 * k + 1] += d.token.t_merge * inv;
    } else {
      mean[2 * k] += d.token.t * inv;
    }
  }
  return decode_action(mean, cfg, strategy);
}

}  // namespace adavit
