#pragma once

// Dense row-major matrices of doubles, the handful of neural-net primitives the
// model needs, and a reproducible random stream.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mue {

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

using TokenId = std::int32_t;

class Tensor2D {
 public:
  Tensor2D() = default;
  Tensor2D(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor2D(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("Tensor2D: data length " + std::to_string(data_.size()) +
                       " does not match " + std::to_string(rows_) + "x" +
                       std::to_string(cols_));
    }
  }

  // Nested initializer, e.g. Tensor2D::from({{1, 2}, {3, 4}}).
  static Tensor2D from(std::initializer_list<std::initializer_list<double>> rows) {
    std::size_t r = rows.size();
    std::size_t c = r ? rows.begin()->size() : 0;
    Tensor2D t(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("Tensor2D::from: ragged rows");
      std::copy(row.begin(), row.end(), t.data_.begin() + i * c);
      ++i;
    }
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  std::string shape_str() const {
    return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
  }

  bool same_shape(const Tensor2D& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  /// Appends one row; an empty 0x0 tensor adopts the row's width.
  void append_row(std::span<const double> r) {
    if (rows_ == 0 && cols_ == 0) cols_ = r.size();
    if (r.size() != cols_) {
      throw ShapeError("append_row: row of width " + std::to_string(r.size()) + " into " +
                       shape_str());
    }
    data_.insert(data_.end(), r.begin(), r.end());
    ++rows_;
  }

  bool operator==(const Tensor2D& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor2D& a, const Tensor2D& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                     b.shape_str());
  }
}

inline bool all_finite(const Tensor2D& t) {
  return std::all_of(t.values().begin(), t.values().end(),
                     [](double v) { return std::isfinite(v); });
}

// --- random numbers ---------------------------------------------------------

/// Reproducible random stream. Draws come from std::mt19937_64, whose output
/// sequence is fixed by the C++ standard, so a seed means the same numbers on
/// every platform. Uniforms use the top 53 bits; normals use Box-Muller with
/// both outputs consumed in order.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). Rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("SeededRng::below: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor2D seeded_normal(SeededRng& rng, std::size_t rows, std::size_t cols,
                              double stddev) {
  if (stddev < 0.0) throw ContractError("seeded_normal: stddev must be >= 0");
  Tensor2D t(rows, cols);
  if (stddev == 0.0) return t;
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

// --- linear algebra ---------------------------------------------------------

inline Tensor2D matmul(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: cannot multiply " + a.shape_str() + " by " + b.shape_str());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor2D out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data() + i * m;
    const double* ar = a.data() + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      const double* br = b.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

inline Tensor2D transpose(const Tensor2D& a) {
  Tensor2D out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

/// a * b^T. Goes through an explicit transpose so the inner loop is a
/// contiguous axpy; the summation order per entry is the same as a dot product.
inline Tensor2D matmul_nt(const Tensor2D& a, const Tensor2D& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: cannot multiply " + a.shape_str() + " by transpose of " +
                     b.shape_str());
  }
  return matmul(a, transpose(b));
}

/// a^T * b.
inline Tensor2D matmul_tn(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape_str() + " by " +
                     b.shape_str());
  }
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  Tensor2D out(n, m);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.data() + p * n;
    const double* br = b.data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ar[i];
      double* o = out.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}


inline Tensor2D add(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "add");
  Tensor2D out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline void add_inplace(Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] += b.data()[i];
}

/// Adds a 1 x cols row to every row of x.
inline Tensor2D add_row(const Tensor2D& x, const Tensor2D& row) {
  if (row.rows() != 1 || row.cols() != x.cols()) {
    throw ShapeError("add_row: expected 1x" + std::to_string(x.cols()) + " row, got " +
                     row.shape_str());
  }
  Tensor2D out = x;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    double* o = out.data() + i * out.cols();
    for (std::size_t j = 0; j < out.cols(); ++j) o[j] += row.data()[j];
  }
  return out;
}

inline Tensor2D scale(const Tensor2D& x, double s) {
  Tensor2D out = x;
  for (double& v : out.values()) v *= s;
  return out;
}

inline Tensor2D slice_rows(const Tensor2D& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.rows()) throw ShapeError("slice_rows: bad range on " + x.shape_str());
  Tensor2D out(end - begin, x.cols());
  std::copy(x.data() + begin * x.cols(), x.data() + end * x.cols(), out.data());
  return out;
}

inline Tensor2D slice_cols(const Tensor2D& x, std::size_t begin, std::size_t end) {
  if (begin > end || end > x.cols()) throw ShapeError("slice_cols: bad range on " + x.shape_str());
  const std::size_t w = end - begin;
  Tensor2D out(x.rows(), w);
  for (std::size_t i = 0; i < x.rows(); ++i)
    std::copy(x.data() + i * x.cols() + begin, x.data() + i * x.cols() + end, out.data() + i * w);
  return out;
}

inline Tensor2D concat_rows(const Tensor2D& a, const Tensor2D& b) {
  if (a.rows() == 0) return b;
  if (b.rows() == 0) return a;
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: column mismatch " + a.shape_str() + " vs " + b.shape_str());
  }
  Tensor2D out(a.rows() + b.rows(), a.cols());
  std::copy(a.values().begin(), a.values().end(), out.data());
  std::copy(b.values().begin(), b.values().end(), out.data() + a.size());
  return out;
}

inline Tensor2D concat_cols(const std::vector<Tensor2D>& parts) {
  if (parts.empty()) return {};
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Tensor2D out(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < rows; ++i)
      std::copy(p.data() + i * p.cols(), p.data() + (i + 1) * p.cols(),
                out.data() + i * cols + offset);
    offset += p.cols();
  }
  return out;
}

/// Gathers rows of table by index (embedding lookup).
inline Tensor2D gather_rows(const Tensor2D& table, std::span<const TokenId> ids) {
  Tensor2D out(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows()) {
      throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                       std::to_string(table.rows()) + " rows");
    }
    auto src = table.row(static_cast<std::size_t>(ids[i]));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

// --- elementwise nonlinearities --------------------------------------------

namespace detail {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace detail

/// tanh-approximated GELU.
inline double gelu(double x) {
  const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad(double x) {
  const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
  const double t = std::tanh(u);
  const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

inline Tensor2D gelu(const Tensor2D& x) {
  Tensor2D out = x;
  for (double& v : out.values()) v = gelu(v);
  return out;
}

// --- normalisation and probabilities ---------------------------------------

inline Tensor2D softmax_rows(const Tensor2D& x) {
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

/// Row-wise log-softmax, log p_j = x_j - max - log(sum exp(x - max)).
inline Tensor2D log_softmax_rows(const Tensor2D& x) {
  Tensor2D out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    if (in.empty()) continue;
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (double v : in) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] - lse;
  }
  return out;
}

constexpr double kLayerNormEps = 1e-5;

inline Tensor2D layer_norm(const Tensor2D& x, const Tensor2D& gain, const Tensor2D& bias,
                           double eps = kLayerNormEps) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || !gain.same_shape(bias)) {
    throw ShapeError("layer_norm: gain " + gain.shape_str() + " / bias " + bias.shape_str() +
                     " do not fit input " + x.shape_str());
  }
  if (!(eps > 0.0)) throw ContractError("layer_norm: eps must be positive");
  const std::size_t n = x.cols();
  Tensor2D out(x.rows(), n);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row(i);
    auto o = out.row(i);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) o[j] = (in[j] - mean) * inv * gain.data()[j] + bias.data()[j];
  }
  return out;
}

inline double frobenius_dot(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "frobenius_dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

/// Cosine similarity of the flattened tensors. Zero if either side has zero norm,
/// so a degenerate state can never look saturated.
inline double cosine_sim(const Tensor2D& a, const Tensor2D& b) {
  require_same_shape(a, b, "cosine_sim");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  const double c = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::clamp(c, -1.0, 1.0);
}

/// Sum over rows of -log softmax(logits)[row, target[row]].
inline double cross_entropy(const Tensor2D& logits, std::span<const TokenId> targets) {
  if (logits.rows() != targets.size()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     logits.shape_str());
  }
  double loss = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const TokenId t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols()) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside vocab of " +
                       std::to_string(logits.cols()));
    }
    auto in = logits.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double sum = 0.0;
    for (double v : in) sum += std::exp(v - mx);
    loss += mx + std::log(sum) - in[static_cast<std::size_t>(t)];
  }
  return loss;
}

/// Index of the largest entry in a row; ties go to the lowest index.
inline TokenId argmax_row(const Tensor2D& x, std::size_t r) {
  auto in = x.row(r);
  return static_cast<TokenId>(std::max_element(in.begin(), in.end()) - in.begin());
}

}  // namespace mue
