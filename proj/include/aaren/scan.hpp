#pragma once

// Inclusive prefix scan by recursive doubling (Hillis–Steele) over any
// associative operator, and the (m, u, w) operator that turns it into
// many-to-many attention: every prefix output o_k = w_k / u_k in
// ceil(log2 N) rounds.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <exception>
#include <functional>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include "aaren/attention.hpp"
#include "aaren/error.hpp"
#include "aaren/numeric.hpp"

namespace aaren {

// Summary of a set of scored tokens A:
//   m = max_{i∈A} s_i,  u = Σ e^{s_i-m},  w = Σ e^{s_i-m} v_i
template <class T>
struct ScanElement {
  T m;
  T u;
  std::vector<T> w;

  friend bool operator==(const ScanElement&, const ScanElement&) = default;
};

// Leaf element (s, 1, v). u is computed as exp(s - m) with m held constant,
// which is exactly 1 in value but keeps the gradient path to s.
template <class T>
ScanElement<T> scan_leaf(const T& s, std::span<const T> v) {
  using std::exp;
  require(is_finite(s), Errc::non_finite_input, "score must be finite");
  require_finite<T>(v, "value entries must be finite");
  const T m = stop_gradient(s);
  const T u = exp(s - m);
  std::vector<T> w(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) w[i] = v[i] * u;
  return {m, u, std::move(w)};
}

template <class T>
ScanElement<T> combine(const ScanElement<T>& lhs, const ScanElement<T>& rhs) {
  using std::exp;
  using std::max;
  require(lhs.w.size() == rhs.w.size(), Errc::dimension_mismatch, "combine: w length mismatch");
  require(is_finite(lhs.m) && is_finite(lhs.u) && is_finite(rhs.m) && is_finite(rhs.u),
          Errc::non_finite_input, "combine: non-finite m or u");
  require_finite<T>(lhs.w, "combine: non-finite w");
  require_finite<T>(rhs.w, "combine: non-finite w");
  const T m = stop_gradient(max(lhs.m, rhs.m));
  const T left = exp(lhs.m - m);
  const T right = exp(rhs.m - m);
  count_madds(2 + 2 * lhs.w.size());
  ScanElement<T> out{m, lhs.u * left + rhs.u * right, std::vector<T>(lhs.w.size())};
  for (std::size_t i = 0; i < out.w.size(); ++i) out.w[i] = lhs.w[i] * left + rhs.w[i] * right;
  return out;
}

struct AttentionCombine {
  template <class T>
  ScanElement<T> operator()(const ScanElement<T>& lhs, const ScanElement<T>& rhs) const {
    return combine<T>(lhs, rhs);
  }
};

// Doubling schedule for n elements: offsets 1, 2, 4, ... below n.
struct ScanPlan {
  std::size_t n = 0;
  std::size_t rounds = 0;
  std::vector<std::size_t> offsets;

  static ScanPlan for_length(std::size_t n) {
    require(n > 0, Errc::empty_input, "scan of empty sequence");
    ScanPlan plan;
    plan.n = n;
    for (std::size_t offset = 1; offset < n; offset <<= 1) plan.offsets.push_back(offset);
    plan.rounds = plan.offsets.size();
    return plan;
  }
};

// Executes body(j) for j in [0, n).
struct SerialFor {
  template <class F>
  void operator()(std::size_t n, F&& body) const {
    for (std::size_t j = 0; j < n; ++j) body(j);
  }
};

// Splits [0, n) into contiguous chunks across worker threads. Not for
// taped (ad::Var) element types: a Tape is single-threaded.
struct ThreadedFor {
  unsigned threads = std::max(1u, std::thread::hardware_concurrency());
  std::size_t min_chunk = 64;

  template <class F>
  void operator()(std::size_t n, F&& body) const {
    const std::size_t workers =
        std::min<std::size_t>(threads, std::max<std::size_t>(1, n / std::max<std::size_t>(1, min_chunk)));
    if (workers <= 1) {
      for (std::size_t j = 0; j < n; ++j) body(j);
      return;
    }
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      pool.reserve(workers);
      for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = n * w / workers;
        const std::size_t hi = n * (w + 1) / workers;
        pool.emplace_back([&, lo, hi, w] {
          try {
            for (std::size_t j = lo; j < hi; ++j) body(j);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
};

// Inclusive scan: out[k] = leaves[0] ⊕ ... ⊕ leaves[k]. Each round reads the
// previous round's buffer and writes a fresh one, so positions within a
// round are independent and the result does not depend on `exec`.
template <class E, class Op, class Exec = SerialFor>
std::vector<E> inclusive_scan(std::span<const E> leaves, Op&& op, const Exec& exec = {},
                              std::size_t* rounds_executed = nullptr) {
  const ScanPlan plan = ScanPlan::for_length(leaves.size());
  std::vector<E> current(leaves.begin(), leaves.end());
  std::vector<E> next(current.size());
  std::size_t rounds = 0;
  for (const std::size_t offset : plan.offsets) {
    exec(current.size(), [&](std::size_t j) {
      next[j] = j < offset ? current[j] : op(current[j - offset], current[j]);
    });
    std::swap(current, next);
    ++rounds;
  }
  if (rounds_executed) *rounds_executed = rounds;
  return current;
}

template <class E, class Op, class Exec = SerialFor>
std::vector<E> inclusive_scan(const std::vector<E>& leaves, Op&& op, const Exec& exec = {},
                              std::size_t* rounds_executed = nullptr) {
  return inclusive_scan(std::span<const E>(leaves), std::forward<Op>(op), exec, rounds_executed);
}

// (m_k, u_k, w_k) for every prefix k of the scored tokens.
template <class T, class Exec = SerialFor>
std::vector<ScanElement<T>> prefix_states_scored(std::span<const T> scores, const Mat<T>& values,
                                                 const Exec& exec = {}) {
  detail::validate_scored<T>(scores, values);
  std::vector<ScanElement<T>> leaves;
  leaves.reserve(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) leaves.push_back(scan_leaf<T>(scores[i], values.row(i)));
  return inclusive_scan(std::span<const ScanElement<T>>(leaves), AttentionCombine{}, exec);
}

template <class T>
Vec<T> scan_output(const ScanElement<T>& state) {
  std::vector<T> o(state.w.size());
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = state.w[i] / state.u;
  return Vec<T>(std::move(o));
}

template <class T, class Exec = SerialFor>
std::vector<Vec<T>> many_to_many_scored(std::span<const T> scores, const Mat<T>& values,
                                        const Exec& exec = {}) {
  const auto states = prefix_states_scored<T>(scores, values, exec);
  std::vector<Vec<T>> out;
  out.reserve(states.size());
  for (const auto& st : states) out.push_back(scan_output<T>(st));
  return out;
}

// Attention(q, x_{1:k}) for every k, via the prefix scan.
template <class T, class Exec = SerialFor>
std::vector<Vec<T>> attention_many_to_many(const Vec<T>& q, const Mat<T>& keys, const Mat<T>& values,
                                           ScoreOptions opts = {}, const Exec& exec = {}) {
  detail::validate_attention<T>(q, keys, values);
  const auto s = detail::all_scores<T>(q, keys, opts);
  return many_to_many_scored<T>(std::span<const T>(s), values, exec);
}

template <class T>
Mat<T> leading_rows(const Mat<T>& m, std::size_t count) {
  const auto flat = m.flat();
  return Mat<T>(count, m.cols(), std::vector<T>(flat.begin(), flat.begin() + count * m.cols()));
}

// O(N^2) reference: the conventional oracle on every prefix.
template <class T>
std::vector<Vec<T>> naive_many_to_many_scored(std::span<const T> scores, const Mat<T>& values) {
  detail::validate_scored<T>(scores, values);
  std::vector<Vec<T>> out;
  out.reserve(scores.size());
  for (std::size_t k = 1; k <= scores.size(); ++k) {
    out.push_back(attention_oracle_scored<T>(scores.first(k), leading_rows<T>(values, k)));
  }
  return out;
}

template <class T>
std::vector<Vec<T>> naive_many_to_many(const Vec<T>& q, const Mat<T>& keys, const Mat<T>& values,
                                       ScoreOptions opts = {}) {
  detail::validate_attention<T>(q, keys, values);
  const auto s = detail::all_scores<T>(q, keys, opts);
  return naive_many_to_many_scored<T>(std::span<const T>(s), values);
}

}  // namespace aaren
