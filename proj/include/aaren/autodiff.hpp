#pragma once

// Scalar reverse-mode differentiation.
//
// Var records every arithmetic operation on the Tape it belongs to. A Var
// without a tape is a constant. Values are computed with exactly the double
// operations the untaped code uses, so a taped forward reproduces the
// untaped result bit for bit.
//
// Supported primitives: + - * / (and unary -), exp, log, sqrt, tanh, max,
// stop_gradient. Var has no implicit conversion to double, so code that
// reaches for anything else fails to compile instead of silently dropping
// gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aaren/error.hpp"
#include "aaren/numeric.hpp"

namespace aaren::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(double value) : value_(value) {}  // NOLINT: constants mix freely with Vars

  double value() const noexcept { return value_; }
  std::int32_t index() const noexcept { return index_; }
  Tape* tape() const noexcept { return tape_; }
  bool is_constant() const noexcept { return tape_ == nullptr; }

  Var& operator+=(const Var& rhs);
  Var& operator-=(const Var& rhs);
  Var& operator*=(const Var& rhs);
  Var& operator/=(const Var& rhs);

 private:
  friend class Tape;
  Var(double value, std::int32_t index, Tape* tape) : value_(value), index_(index), tape_(tape) {}

  double value_ = 0.0;
  std::int32_t index_ = -1;
  Tape* tape_ = nullptr;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(double value) {
    nodes_.push_back({-1, -1, 0.0, 0.0});
    return Var(value, static_cast<std::int32_t>(nodes_.size() - 1), this);
  }

  Var record(double value, const Var& a, double da) {
    if (a.is_constant()) return Var(value);
    nodes_.push_back({a.index(), -1, da, 0.0});
    return Var(value, static_cast<std::int32_t>(nodes_.size() - 1), this);
  }

  Var record(double value, const Var& a, double da, const Var& b, double db) {
    if (a.is_constant()) return record(value, b, db);
    if (b.is_constant()) return record(value, a, da);
    nodes_.push_back({a.index(), b.index(), da, db});
    return Var(value, static_cast<std::int32_t>(nodes_.size() - 1), this);
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  void reserve(std::size_t n) { nodes_.reserve(n); }
  bool consumed() const noexcept { return consumed_; }

  // Adjoint of `output` with respect to every recorded node. A tape supports
  // one backward pass.
  std::vector<double> adjoints(const Var& output) {
    require(!consumed_, Errc::unsupported_primitive, "tape already consumed by a backward pass");
    consumed_ = true;
    std::vector<double> adj(nodes_.size(), 0.0);
    if (output.is_constant()) return adj;
    require(output.tape() == this, Errc::unsupported_primitive, "output recorded on another tape");
    adj[static_cast<std::size_t>(output.index())] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      const double g = adj[i];
      if (g == 0.0) continue;
      const Node& n = nodes_[i];
      if (n.lhs >= 0) adj[static_cast<std::size_t>(n.lhs)] += g * n.dlhs;
      if (n.rhs >= 0) adj[static_cast<std::size_t>(n.rhs)] += g * n.drhs;
    }
    return adj;
  }

 private:
  struct Node {
    std::int32_t lhs;
    std::int32_t rhs;
    double dlhs;
    double drhs;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {
inline Tape* shared_tape(const Var& a, const Var& b) {
  Tape* ta = a.tape();
  Tape* tb = b.tape();
  if (ta && tb && ta != tb) fail(Errc::unsupported_primitive, "operands recorded on different tapes");
  return ta ? ta : tb;
}
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
  const double v = a.value() + b.value();
  Tape* t = detail::shared_tape(a, b);
  return t ? t->record(v, a, 1.0, b, 1.0) : Var(v);
}

inline Var operator-(const Var& a, const Var& b) {
  const double v = a.value() - b.value();
  Tape* t = detail::shared_tape(a, b);
  return t ? t->record(v, a, 1.0, b, -1.0) : Var(v);
}

inline Var operator*(const Var& a, const Var& b) {
  const double v = a.value() * b.value();
  Tape* t = detail::shared_tape(a, b);
  return t ? t->record(v, a, b.value(), b, a.value()) : Var(v);
}

inline Var operator/(const Var& a, const Var& b) {
  const double v = a.value() / b.value();
  Tape* t = detail::shared_tape(a, b);
  return t ? t->record(v, a, 1.0 / b.value(), b, -v / b.value()) : Var(v);
}

inline Var operator-(const Var& a) {
  const double v = -a.value();
  return a.tape() ? a.tape()->record(v, a, -1.0) : Var(v);
}

inline Var& Var::operator+=(const Var& rhs) { return *this = *this + rhs; }
inline Var& Var::operator-=(const Var& rhs) { return *this = *this - rhs; }
inline Var& Var::operator*=(const Var& rhs) { return *this = *this * rhs; }
inline Var& Var::operator/=(const Var& rhs) { return *this = *this / rhs; }

inline bool operator<(const Var& a, const Var& b) { return a.value() < b.value(); }
inline bool operator>(const Var& a, const Var& b) { return a.value() > b.value(); }
inline bool operator<=(const Var& a, const Var& b) { return a.value() <= b.value(); }
inline bool operator>=(const Var& a, const Var& b) { return a.value() >= b.value(); }
inline bool operator==(const Var& a, const Var& b) { return a.value() == b.value(); }

inline Var exp(const Var& a) {
  const double v = std::exp(a.value());
  return a.tape() ? a.tape()->record(v, a, v) : Var(v);
}

inline Var log(const Var& a) {
  const double v = std::log(a.value());
  return a.tape() ? a.tape()->record(v, a, 1.0 / a.value()) : Var(v);
}

inline Var sqrt(const Var& a) {
  const double v = std::sqrt(a.value());
  return a.tape() ? a.tape()->record(v, a, 0.5 / v) : Var(v);
}

inline Var tanh(const Var& a) {
  const double v = std::tanh(a.value());
  return a.tape() ? a.tape()->record(v, a, 1.0 - v * v) : Var(v);
}

// Ties route the whole gradient to the first (earliest) argument.
inline Var max(const Var& a, const Var& b) {
  const bool take_a = a.value() >= b.value();
  const double v = take_a ? a.value() : b.value();
  Tape* t = detail::shared_tape(a, b);
  if (!t) return Var(v);
  return t->record(v, a, take_a ? 1.0 : 0.0, b, take_a ? 0.0 : 1.0);
}

inline Var stop_gradient(const Var& a) { return Var(a.value()); }
inline double value_of(const Var& a) { return a.value(); }
inline bool is_finite(const Var& a) { return std::isfinite(a.value()); }

// ---------------------------------------------------------------------------

// Loss recorded on a tape together with the parameter leaves it depends on.
struct TapedLoss {
  double loss = 0.0;
  std::unique_ptr<Tape> tape;
  std::vector<Var> params;
  Var output;
};

// Records f(params) on a fresh tape. f takes std::span<const Var> and returns
// a scalar Var.
template <class F>
TapedLoss forward_with_tape(F&& f, std::span<const double> params) {
  TapedLoss taped;
  taped.tape = std::make_unique<Tape>();
  taped.params.reserve(params.size());
  for (double p : params) taped.params.push_back(taped.tape->variable(p));
  taped.output = std::invoke(std::forward<F>(f), std::span<const Var>(taped.params));
  taped.loss = taped.output.value();
  return taped;
}

// Gradient of the recorded loss with respect to each parameter, in order.
inline std::vector<double> backward(TapedLoss& taped) {
  const auto adj = taped.tape->adjoints(taped.output);
  std::vector<double> grads;
  grads.reserve(taped.params.size());
  for (const Var& p : taped.params) grads.push_back(adj[static_cast<std::size_t>(p.index())]);
  return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check.

struct ParamGroup {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

struct GradEntry {
  std::string name;
  std::size_t count = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradReport {
  std::vector<GradEntry> entries;
  double step = 0.0;
  Precision precision = Precision::f64;
  double max_rel_error = 0.0;
};

// f must be callable both as f(std::span<const double>) -> double and as
// f(std::span<const Var>) -> Var (a generic lambda over the scalar type).
template <class F>
GradReport gradcheck(F&& f, std::span<const double> params, double h,
                     std::vector<ParamGroup> groups = {}) {
  require(h >= 1e-6 && h <= 1e-4, Errc::invalid_config, "gradcheck step must lie in [1e-6, 1e-4]");
  if (groups.empty()) groups.push_back({"params", 0, params.size()});

  auto taped = forward_with_tape(f, params);
  const auto analytic = backward(taped);

  std::vector<double> probe(params.begin(), params.end());
  GradReport report;
  report.step = h;
  for (const auto& group : groups) {
    require(group.offset + group.count <= params.size(), Errc::dimension_mismatch,
            "parameter group out of range");
    GradEntry entry{group.name, group.count, 0.0, group.offset, 0.0, 0.0};
    for (std::size_t i = group.offset; i < group.offset + group.count; ++i) {
      const double saved = probe[i];
      probe[i] = saved + h;
      const double up = f(std::span<const double>(probe));
      probe[i] = saved - h;
      const double down = f(std::span<const double>(probe));
      probe[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
        fail(Errc::non_finite_gradient, "non-finite gradient in group " + group.name);
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double err = std::abs(analytic[i] - numeric) / denom;
      if (err > entry.max_rel_error || i == group.offset) {
        entry.max_rel_error = err;
        entry.worst_index = i - group.offset;
        entry.analytic = analytic[i];
        entry.numeric = numeric;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace aaren::ad
