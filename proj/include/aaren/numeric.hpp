#pragma once

// Dense vector/matrix substrate, multiply-add accounting, the seeded RNG and
// the stable softmax used as the ground truth by every attention kernel.
//
// Every routine is a template over the scalar type. float and double are the
// kernel precisions; ad::Var (autodiff.hpp) plugs in through the unqualified
// calls to exp/max/sqrt/tanh/stop_gradient/value_of/is_finite below, which
// resolve by ADL.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "aaren/error.hpp"

namespace aaren {

enum class Precision : std::uint32_t { f32 = 0, f64 = 1 };

constexpr std::string_view precision_name(Precision p) noexcept {
  return p == Precision::f32 ? "single" : "double";
}

inline Precision parse_precision(std::string_view text) {
  if (text == "single" || text == "float" || text == "f32") return Precision::f32;
  if (text == "double" || text == "f64") return Precision::f64;
  fail(Errc::invalid_config, "unknown precision '" + std::string(text) + "'");
}

template <class T>
constexpr Precision precision_of() noexcept {
  return sizeof(T) == sizeof(float) ? Precision::f32 : Precision::f64;
}

// Scalar customization points for the arithmetic types.
template <std::floating_point T>
constexpr double value_of(T x) noexcept {
  return static_cast<double>(x);
}

template <std::floating_point T>
constexpr T stop_gradient(T x) noexcept {
  return x;
}

template <std::floating_point T>
inline bool is_finite(T x) noexcept {
  return std::isfinite(x);
}

template <class T>
inline T negative_infinity() {
  return T(-std::numeric_limits<double>::infinity());
}

// ---------------------------------------------------------------------------
// Multiply-add accounting. A CountingScope installs a counter for the current
// thread; every dot/matvec/axpy below charges it. Nothing is counted when no
// scope is active.

struct OpCounter {
  std::uint64_t madds = 0;
};

namespace detail {
inline thread_local OpCounter* active_counter = nullptr;
}

inline void count_madds(std::uint64_t n) noexcept {
  if (auto* c = detail::active_counter) c->madds += n;
}

class CountingScope {
 public:
  explicit CountingScope(OpCounter& counter) noexcept : previous_(detail::active_counter) {
    detail::active_counter = &counter;
  }
  ~CountingScope() { detail::active_counter = previous_; }
  CountingScope(const CountingScope&) = delete;
  CountingScope& operator=(const CountingScope&) = delete;

 private:
  OpCounter* previous_;
};

// ---------------------------------------------------------------------------

template <class T>
void require_finite(std::span<const T> xs, const char* what) {
  for (const T& x : xs) {
    if (!is_finite(x)) fail(Errc::non_finite_input, what);
  }
}

template <class T>
class Vec {
 public:
  Vec() = default;

  explicit Vec(std::vector<T> data) : data_(std::move(data)) {
    require(!data_.empty(), Errc::empty_input, "vector must have at least one entry");
    require_finite<T>(data_, "vector entries must be finite");
  }

  Vec(std::initializer_list<T> init) : Vec(std::vector<T>(init)) {}

  static Vec zeros(std::size_t n) { return filled(n, T(0)); }

  static Vec filled(std::size_t n, T value) {
    require(n > 0, Errc::empty_input, "vector must have at least one entry");
    Vec v;
    v.data_.assign(n, value);
    return v;
  }

  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  std::span<T> span() noexcept { return data_; }
  std::span<const T> span() const noexcept { return data_; }
  operator std::span<const T>() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  const std::vector<T>& storage() const noexcept { return data_; }

  friend bool operator==(const Vec&, const Vec&) = default;

 private:
  std::vector<T> data_;
};

// Row-major dense matrix.
template <class T>
class Mat {
 public:
  Mat() = default;

  Mat(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(rows_ > 0 && cols_ > 0, Errc::empty_input, "matrix dimensions must be positive");
    require(data_.size() == rows_ * cols_, Errc::dimension_mismatch,
            "matrix data length must equal rows * cols");
    require_finite<T>(data_, "matrix entries must be finite");
  }

  static Mat zeros(std::size_t rows, std::size_t cols) {
    require(rows > 0 && cols > 0, Errc::empty_input, "matrix dimensions must be positive");
    Mat m;
    m.rows_ = rows;
    m.cols_ = cols;
    m.data_.assign(rows * cols, T(0));
    return m;
  }

  static Mat identity(std::size_t n) {
    Mat m = zeros(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T(1);
    return m;
  }

  static Mat from_rows(std::span<const Vec<T>> rows) {
    require(!rows.empty(), Errc::empty_input, "matrix needs at least one row");
    const std::size_t cols = rows.front().size();
    std::vector<T> data;
    data.reserve(rows.size() * cols);
    for (const auto& r : rows) {
      require(r.size() == cols, Errc::dimension_mismatch, "rows must share one length");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Mat(rows.size(), cols, std::move(data));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<const T> row(std::size_t r) const noexcept {
    return std::span<const T>(data_).subspan(r * cols_, cols_);
  }
  std::span<T> row(std::size_t r) noexcept { return std::span<T>(data_).subspan(r * cols_, cols_); }

  std::span<T> flat() noexcept { return data_; }
  std::span<const T> flat() const noexcept { return data_; }

  friend bool operator==(const Mat&, const Mat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Span-level primitives.

template <class T>
T dot(std::span<const T> u, std::span<const T> v) {
  require(u.size() == v.size(), Errc::dimension_mismatch, "dot: length mismatch");
  count_madds(u.size());
  T sum = T(0);
  for (std::size_t i = 0; i < u.size(); ++i) sum += u[i] * v[i];
  return sum;
}

template <class T>
T dot(const Vec<T>& u, const Vec<T>& v) {
  return dot<T>(u.span(), v.span());
}

// Writes W x into out (out.size() == W.rows()).
template <class T>
void matvec_into(const Mat<T>& w, std::span<const T> x, std::span<T> out) {
  require(w.cols() == x.size(), Errc::dimension_mismatch, "matvec: W.cols != x.len");
  require(w.rows() == out.size(), Errc::dimension_mismatch, "matvec: output length");
  count_madds(w.rows() * w.cols());
  for (std::size_t r = 0; r < w.rows(); ++r) {
    const auto row = w.row(r);
    T sum = T(0);
    for (std::size_t c = 0; c < x.size(); ++c) sum += row[c] * x[c];
    out[r] = sum;
  }
}

template <class T>
Vec<T> matvec(const Mat<T>& w, std::span<const T> x) {
  Vec<T> out = Vec<T>::zeros(w.rows());
  matvec_into<T>(w, x, out.span());
  return out;
}

template <class T>
Vec<T> matvec(const Mat<T>& w, const Vec<T>& x) {
  return matvec<T>(w, x.span());
}

// acc = acc * keep + x * take, elementwise.
template <class T, class S>
void scale_add(std::span<T> acc, const S& keep, std::span<const T> x, const S& take) {
  require(acc.size() == x.size(), Errc::dimension_mismatch, "scale_add: length mismatch");
  count_madds(2 * acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] * keep + x[i] * take;
}

// acc += x * weight
template <class T, class S>
void add_scaled(std::span<T> acc, std::span<const T> x, const S& weight) {
  require(acc.size() == x.size(), Errc::dimension_mismatch, "add_scaled: length mismatch");
  count_madds(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += x[i] * weight;
}

// Σ exp(s_i - max s) evaluated with the max held constant under
// differentiation; softmax is shift invariant, so the shift carries no
// gradient.
template <class T>
Vec<T> softmax_stable(std::span<const T> scores) {
  using std::exp;
  using std::max;
  require(!scores.empty(), Errc::empty_input, "softmax of empty score vector");
  require_finite<T>(scores, "softmax scores must be finite");
  T peak = scores[0];
  for (std::size_t i = 1; i < scores.size(); ++i) peak = max(peak, scores[i]);
  peak = stop_gradient(peak);
  std::vector<T> out(scores.size());
  T total = T(0);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = exp(scores[i] - peak);
    total += out[i];
  }
  for (auto& x : out) x = x / total;
  return Vec<T>(std::move(out));
}

template <class T>
Vec<T> softmax_stable(const Vec<T>& scores) {
  return softmax_stable<T>(scores.span());
}

template <class To, class From>
Vec<To> cast_vec(const Vec<From>& v) {
  std::vector<To> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<To>(value_of(v[i]));
  return Vec<To>(std::move(out));
}

template <class To, class From>
Mat<To> cast_mat(const Mat<From>& m) {
  std::vector<To> out(m.rows() * m.cols());
  const auto src = m.flat();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(value_of(src[i]));
  return Mat<To>(m.rows(), m.cols(), std::move(out));
}

// ‖got − ref‖∞ / max(‖ref‖∞, 1). Inputs in this library are O(1), so the
// unit floor only matters for references that cancel to near zero.
template <class A, class B>
double relative_error(std::span<const A> got, std::span<const B> ref) {
  require(got.size() == ref.size(), Errc::dimension_mismatch, "relative_error: length mismatch");
  double diff = 0.0;
  double scale = 1.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const double g = value_of(got[i]);
    const double r = value_of(ref[i]);
    if (!std::isfinite(g) || !std::isfinite(r)) return std::numeric_limits<double>::infinity();
    diff = std::max(diff, std::abs(g - r));
    scale = std::max(scale, std::abs(r));
  }
  return diff / scale;
}

template <class A, class B>
double relative_error(const Vec<A>& got, const Vec<B>& ref) {
  return relative_error<A, B>(got.span(), ref.span());
}

inline double relative_error(double got, double ref) {
  if (!std::isfinite(got) || !std::isfinite(ref)) return std::numeric_limits<double>::infinity();
  return std::abs(got - ref) / std::max(std::abs(ref), 1.0);
}

// ---------------------------------------------------------------------------
// Seeded random stream. The engine is std::mt19937_64, whose output sequence
// is fixed by the C++ standard. Uniforms take the top 53 bits; normals use
// Box–Muller on those uniforms (std::normal_distribution is not portable).

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [0, n)
  std::uint64_t below(std::uint64_t n) {
    require(n > 0, Errc::invalid_config, "below(0)");
    return static_cast<std::uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent child stream; the derivation is a splitmix64 finalizer over
  // (seed, stream).
  SeededRng fork(std::uint64_t stream) const {
    std::uint64_t z = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return SeededRng(z ^ (z >> 31));
  }

  template <class T = double>
  Vec<T> normal_vec(std::size_t n, double stddev = 1.0) {
    std::vector<T> out(n);
    for (auto& x : out) x = static_cast<T>(normal() * stddev);
    return Vec<T>(std::move(out));
  }

  template <class T = double>
  Mat<T> normal_mat(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    std::vector<T> out(rows * cols);
    for (auto& x : out) x = static_cast<T>(normal() * stddev);
    return Mat<T>(rows, cols, std::move(out));
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace aaren
