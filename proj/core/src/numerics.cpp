#include "adavit/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

namespace adavit {

namespace {

std::string shape_str(const Mat& m) {
  std::ostringstream os;
  os << m.rows << "x" << m.cols;
  return os.str();
}

void require_same_shape(const Mat& a, const Mat& b, const char* what) {
  if (a.rows != b.rows || a.cols != b.cols) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) +
                         " vs " + shape_str(b));
  }
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b,
                       std::uint64_t c) {
  std::uint64_t h = splitmix64(base);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return splitmix64(h ^ c);
}

Mat::Mat(std::size_t r, std::size_t c, std::initializer_list<double> values)
    : rows(r), cols(c), data(values) {
  if (data.size() != r * c) {
    throw DimensionError("Mat: initializer has " + std::to_string(data.size()) +
                         " values for " + std::to_string(r) + "x" + std::to_string(c));
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Mat::fill(double v) { std::fill(data.begin(), data.end(), v); }

Mat matmul(const Mat& a, const Mat& b, MacCounter* counter) {
  if (a.cols != b.rows) {
    throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
  }
  Mat out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* o = out.data.data() + i * out.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double av = a(i, k);
      const double* br = b.data.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
  if (counter) counter->add(a.rows, a.cols, b.cols);
  return out;
}

Mat matmul_nt(const Mat& a, const Mat& b, MacCounter* counter) {
  if (a.cols != b.cols) {
    throw DimensionError("matmul_nt: " + shape_str(a) + " * (" + shape_str(b) + ")^T");
  }
  Mat out(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* ar = a.data.data() + i * a.cols;
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* br = b.data.data() + j * b.cols;
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) s += ar[k] * br[k];
      out(i, j) = s;
    }
  }
  if (counter) counter->add(a.rows, a.cols, b.rows);
  return out;
}

Mat matmul_tn(const Mat& a, const Mat& b, MacCounter* counter) {
  if (a.rows != b.rows) {
    throw DimensionError("matmul_tn: (" + shape_str(a) + ")^T * " + shape_str(b));
  }
  Mat out(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* ar = a.data.data() + k * a.cols;
    const double* br = b.data.data() + k * b.cols;
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double av = ar[i];
      double* o = out.data.data() + i * out.cols;
      for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
    }
  }
  if (counter) counter->add(a.cols, a.rows, b.cols);
  return out;
}

Mat transpose(const Mat& a) {
  Mat t(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
  return t;
}

Mat top_left(const Mat& a, std::size_t r, std::size_t c) {
  if (r > a.rows || c > a.cols) {
    throw std::out_of_range("top_left: " + std::to_string(r) + "x" + std::to_string(c) +
                            " exceeds " + shape_str(a));
  }
  Mat out(r, c);
  for (std::size_t i = 0; i < r; ++i)
    std::copy_n(a.data.begin() + static_cast<std::ptrdiff_t>(i * a.cols), c,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * c));
  return out;
}

void add_top_left(Mat& dst, const Mat& src) {
  if (src.rows > dst.rows || src.cols > dst.cols) {
    throw DimensionError("add_top_left: " + shape_str(src) + " into " + shape_str(dst));
  }
  for (std::size_t i = 0; i < src.rows; ++i)
    for (std::size_t j = 0; j < src.cols; ++j) dst(i, j) += src(i, j);
}

void add_inplace(Mat& dst, const Mat& src) {
  require_same_shape(dst, src, "add_inplace");
  for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

void scale_inplace(Mat& dst, double s) {
  for (double& v : dst.data) v *= s;
}

void add_row_bias(Mat& x, std::span<const double> bias) {
  if (bias.size() < x.cols) throw DimensionError("add_row_bias: bias too short");
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) x(i, j) += bias[j];
}

void accumulate_col_sums(std::span<double> out, const Mat& g) {
  if (out.size() < g.cols) throw DimensionError("accumulate_col_sums: output too short");
  for (std::size_t i = 0; i < g.rows; ++i)
    for (std::size_t j = 0; j < g.cols; ++j) out[j] += g(i, j);
}

double max_abs_diff(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i)
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

bool all_finite(const Mat& a) {
  return std::all_of(a.data.begin(), a.data.end(), [](double v) { return std::isfinite(v); });
}

Mat softmax_rows(const Mat& a) {
  Mat out(a.rows, a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    auto in = a.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : in) {
      if (std::isnan(v)) throw NumericError("softmax_rows: NaN input");
      mx = std::max(mx, v);
    }
    auto o = out.row(i);
    double sum = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

Mat softmax_rows_backward(const Mat& probs, const Mat& grad_out) {
  require_same_shape(probs, grad_out, "softmax_rows_backward");
  Mat out(probs.rows, probs.cols);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < probs.cols; ++j) dot += probs(i, j) * grad_out(i, j);
    for (std::size_t j = 0; j < probs.cols; ++j)
      out(i, j) = probs(i, j) * (grad_out(i, j) - dot);
  }
  return out;
}

Mat layer_norm(const Mat& x, std::span<const double> scale, std::span<const double> shift,
               double eps, LayerNormCache* cache) {
  if (scale.size() != x.cols || shift.size() != x.cols) {
    throw DimensionError("layer_norm: affine length " + std::to_string(scale.size()) +
                         " for " + std::to_string(x.cols) + " columns");
  }
  Mat out(x.rows, x.cols);
  if (cache) {
    cache->normalized = Mat(x.rows, x.cols);
    cache->inv_std.assign(x.rows, 0.0);
  }
  const double n = static_cast<double>(x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < x.cols; ++j) {
      const double xh = (r[j] - mean) * inv;
      out(i, j) = xh * scale[j] + shift[j];
      if (cache) cache->normalized(i, j) = xh;
    }
    if (cache) cache->inv_std[i] = inv;
  }
  return out;
}

LayerNormGrad layer_norm_backward(const LayerNormCache& cache, std::span<const double> scale,
                                  const Mat& grad_out) {
  const Mat& xh = cache.normalized;
  require_same_shape(xh, grad_out, "layer_norm_backward");
  LayerNormGrad g{Mat(xh.rows, xh.cols), std::vector<double>(xh.cols, 0.0),
                  std::vector<double>(xh.cols, 0.0)};
  const double n = static_cast<double>(xh.cols);
  std::vector<double> dxh(xh.cols);
  for (std::size_t i = 0; i < xh.rows; ++i) {
    double sum_d = 0.0;
    double sum_dx = 0.0;
    for (std::size_t j = 0; j < xh.cols; ++j) {
      g.dscale[j] += grad_out(i, j) * xh(i, j);
      g.dshift[j] += grad_out(i, j);
      dxh[j] = grad_out(i, j) * scale[j];
      sum_d += dxh[j];
      sum_dx += dxh[j] * xh(i, j);
    }
    const double inv = cache.inv_std[i];
    for (std::size_t j = 0; j < xh.cols; ++j)
      g.dx(i, j) = inv * (dxh[j] - sum_d / n - xh(i, j) * sum_dx / n);
  }
  return g;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Mat gelu(const Mat& x) {
  Mat out(x.rows, x.cols);
  for (std::size_t i = 0; i < x.data.size(); ++i) out.data[i] = gelu(x.data[i]);
  return out;
}

Mat gelu_backward(const Mat& pre_activation, const Mat& grad_out) {
  require_same_shape(pre_activation, grad_out, "gelu_backward");
  Mat out(grad_out.rows, grad_out.cols);
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = grad_out.data[i] * gelu_derivative(pre_activation.data[i]);
  return out;
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

CrossEntropy softmax_cross_entropy(const Mat& logits, std::span<const int> labels) {
  if (labels.size() != logits.rows) throw DimensionError("softmax_cross_entropy: label count");
  CrossEntropy ce{0.0, softmax_rows(logits)};
  const double inv_n = 1.0 / static_cast<double>(logits.rows);
  for (std::size_t i = 0; i < logits.rows; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= logits.cols) throw std::out_of_range("softmax_cross_entropy: label");
    ce.loss -= std::log(std::max(ce.dlogits(i, y), 1e-300)) * inv_n;
    ce.dlogits(i, y) -= 1.0;
    for (std::size_t j = 0; j < logits.cols; ++j) ce.dlogits(i, j) *= inv_n;
  }
  return ce;
}

double finite_diff_check(const std::function<double()>& f, std::span<double> params,
                         std::span<const double> analytic, double h) {
  if (!(h >= 1e-6 && h <= 1e-3)) throw std::invalid_argument("finite_diff_check: h out of range");
  if (params.size() != analytic.size()) throw DimensionError("finite_diff_check: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double fp = f();
    params[i] = saved - h;
    const double fm = f();
    params[i] = saved;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_check: non-finite objective at coordinate " +
                         std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

Mat random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  Mat m(rows, cols);
  for (double& v : m.data) v = nd(rng);
  return m;
}

Mat orthogonal_init(std::size_t rows, std::size_t cols, double gain, Rng& rng) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("orthogonal_init: empty shape");
  const bool wide = rows <= cols;
  // Orthonormalise the shorter dimension's vectors (rows of a wide matrix).
  const std::size_t count = wide ? rows : cols;
  const std::size_t len = wide ? cols : rows;
  Mat v = random_normal(count, len, 1.0, rng);
  for (std::size_t i = 0; i < count; ++i) {
    auto vi = v.row(i);
    // Two Gram-Schmidt passes keep the result orthogonal to ~machine precision.
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < i; ++k) {
        auto vk = v.row(k);
        double d = 0.0;
        for (std::size_t j = 0; j < len; ++j) d += vi[j] * vk[j];
        for (std::size_t j = 0; j < len; ++j) vi[j] -= d * vk[j];
      }
    }
    double norm = 0.0;
    for (double x : vi) norm += x * x;
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw NumericError("orthogonal_init: degenerate draw");
    for (double& x : vi) x /= norm;
  }
  Mat out = wide ? v : transpose(v);
  scale_inplace(out, gain);
  return out;
}

AdamW::AdamW(std::vector<std::size_t> sizes, Options opts) : opts_(opts) {
  for (std::size_t s : sizes) {
    m_.emplace_back(s, 0.0);
    v_.emplace_back(s, 0.0);
  }
}

void AdamW::step(std::span<const std::span<double>> params,
                 std::span<const std::span<const double>> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw DimensionError("AdamW::step: parameter group count");
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t g = 0; g < params.size(); ++g) {
    auto p = params[g];
    auto d = grads[g];
    if (p.size() != m_[g].size() || d.size() != m_[g].size())
      throw DimensionError("AdamW::step: parameter size");
    auto& m = m_[g];
    auto& v = v_[g];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * d[i];
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * d[i] * d[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      p[i] -= lr * (mh / (std::sqrt(vh) + opts_.eps) + opts_.weight_decay * p[i]);
    }
  }
}

double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm) {
  double sq = 0.0;
  for (auto g : grads)
    for (double v : g) sq += v * v;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (auto g : grads)
      for (double& v : g) v *= s;
  }
  return norm;
}

double CosineSchedule::at(std::size_t step) const {
  if (step < warmup_steps) {
    const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
    return warmup_start_lr + (base_lr - warmup_start_lr) * frac;
  }
  const std::size_t decay_steps = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(decay_steps));
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace adavit
