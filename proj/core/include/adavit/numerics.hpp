#pragma once

// Dense row-major matrices and the small, closed set of layers the engine
// needs, each with a hand-derived backward pass.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace adavit {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a tuple of ids.
std::uint64_t mix_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                       std::uint64_t c = 0);

struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}
  Mat(std::size_t r, std::size_t c, std::initializer_list<double> values);

  static Mat identity(std::size_t n);

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  void fill(double v);

  bool operator==(const Mat&) const = default;
};

/// Counts multiply-accumulates: a product of (a x b)(b x c) adds a*b*c.
struct MacCounter {
  std::uint64_t macs = 0;
  void add(std::size_t a, std::size_t b, std::size_t c) {
    macs += static_cast<std::uint64_t>(a) * b * c;
  }
};

// Products. The loop order is fixed so results are bit-reproducible for a build.
Mat matmul(const Mat& a, const Mat& b, MacCounter* counter = nullptr);
/// a * b^T
Mat matmul_nt(const Mat& a, const Mat& b, MacCounter* counter = nullptr);
/// a^T * b
Mat matmul_tn(const Mat& a, const Mat& b, MacCounter* counter = nullptr);
Mat transpose(const Mat& a);

/// First `r` rows and first `c` columns.
Mat top_left(const Mat& a, std::size_t r, std::size_t c);
/// Adds `src` into the top-left corner of `dst`.
void add_top_left(Mat& dst, const Mat& src);

void add_inplace(Mat& dst, const Mat& src);
void scale_inplace(Mat& dst, double s);
void add_row_bias(Mat& x, std::span<const double> bias);
/// Column sums of `g` accumulated into `out` (first g.cols entries).
void accumulate_col_sums(std::span<double> out, const Mat& g);
double max_abs_diff(const Mat& a, const Mat& b);
bool all_finite(const Mat& a);

// Activations and normalisation.
Mat softmax_rows(const Mat& a);
/// Gradient through a row softmax given its output.
Mat softmax_rows_backward(const Mat& probs, const Mat& grad_out);

constexpr double kLayerNormEps = 1e-6;

struct LayerNormCache {
  Mat normalized;                // pre-affine x_hat
  std::vector<double> inv_std;   // per row
};

Mat layer_norm(const Mat& x, std::span<const double> scale,
               std::span<const double> shift, double eps = kLayerNormEps,
               LayerNormCache* cache = nullptr);

struct LayerNormGrad {
  Mat dx;
  std::vector<double> dscale;
  std::vector<double> dshift;
};

LayerNormGrad layer_norm_backward(const LayerNormCache& cache,
                                  std::span<const double> scale,
                                  const Mat& grad_out);

double gelu(double x);
double gelu_derivative(double x);
Mat gelu(const Mat& x);
Mat gelu_backward(const Mat& pre_activation, const Mat& grad_out);

double sigmoid(double x);

struct CrossEntropy {
  double loss = 0.0;
  Mat dlogits;
};

/// Mean softmax cross-entropy over the rows of `logits`.
CrossEntropy softmax_cross_entropy(const Mat& logits, std::span<const int> labels);

/// Central-difference check of an analytic gradient. Returns the max over
/// coordinates of |analytic - numeric| / max(1, |numeric|). `params` is
/// perturbed in place and restored.
double finite_diff_check(const std::function<double()>& f, std::span<double> params,
                         std::span<const double> analytic, double h = 1e-5);

/// Semi-orthogonal matrix scaled by `gain`: Q Q^T = gain^2 I when rows <= cols,
/// Q^T Q = gain^2 I otherwise.
Mat orthogonal_init(std::size_t rows, std::size_t cols, double gain, Rng& rng);

Mat random_normal(std::size_t rows, std::size_t cols, double stddev, Rng& rng);

/// Adam with decoupled weight decay over a flat list of parameter spans.
class AdamW {
public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(std::vector<std::size_t> sizes, Options opts);
  AdamW(std::vector<std::size_t> sizes) : AdamW(std::move(sizes), Options{}) {}

  /// params[i] and grads[i] must match the registered sizes.
  void step(std::span<const std::span<double>> params,
            std::span<const std::span<const double>> grads, double lr);

  std::size_t steps() const { return t_; }

private:
  Options opts_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(std::span<const std::span<double>> grads, double max_norm);

/// Linear warm-up followed by cosine decay to `min_lr`.
struct CosineSchedule {
  double base_lr = 1e-3;
  double min_lr = 1e-5;
  double warmup_start_lr = 1e-6;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  double at(std::size_t step) const;
};

}  // namespace adavit
