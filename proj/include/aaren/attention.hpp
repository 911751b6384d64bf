#pragma once

// Many-to-one attention computed three ways: the conventional softmax form
// (the oracle), token by token through attention's RNN cell, and block by
// block. All three agree in exact arithmetic.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <utility>
#include <vector>

#include "aaren/error.hpp"
#include "aaren/numeric.hpp"

namespace aaren {

struct ScoreOptions {
  // Multiply scores by 1/sqrt(d_k). Off by default (plain dot-product scores).
  bool scaled_scores = false;
};

inline double score_scale(std::size_t key_dim, ScoreOptions opts) {
  return opts.scaled_scores ? 1.0 / std::sqrt(static_cast<double>(key_dim)) : 1.0;
}

template <class T>
T score(std::span<const T> q, std::span<const T> k, ScoreOptions opts = {}) {
  T s = dot<T>(q, k);
  if (opts.scaled_scores) s = s * T(score_scale(q.size(), opts));
  return s;
}

// Running (a, c, m) of the recurrence: a is the max-shifted weighted value
// sum, c the max-shifted normalizer, m the running max of scores. Starts at
// (0, 0, -inf) so the first update yields (v, 1, s) for any sign of s.
template <class T>
struct AttentionCarry {
  std::vector<T> a;
  T c = T(0);
  T m = negative_infinity<T>();

  static AttentionCarry empty(std::size_t value_dim) {
    require(value_dim > 0, Errc::dimension_mismatch, "value dimension must be positive");
    AttentionCarry carry;
    carry.a.assign(value_dim, T(0));
    return carry;
  }

  std::size_t scalar_count() const noexcept { return a.size() + 2; }
  bool started() const noexcept { return value_of(c) > 0.0; }

  Vec<T> output() const {
    require(started(), Errc::empty_input, "attention output requested before any token");
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / c;
    return Vec<T>(std::move(out));
  }

  friend bool operator==(const AttentionCarry&, const AttentionCarry&) = default;
};

// Attention's RNN cell state: the carry plus the query it is computed for.
template <class T>
struct AttentionState {
  AttentionCarry<T> carry;
  Vec<T> query;

  static AttentionState initial(Vec<T> query, std::size_t value_dim) {
    return {AttentionCarry<T>::empty(value_dim), std::move(query)};
  }

  Vec<T> output() const { return carry.output(); }
};

template <class T>
struct ScoredToken {
  T score;
  Vec<T> value;
};

// One step of the cumulative-max recurrence on an already scored token.
template <class T>
void rnn_cell_update(AttentionCarry<T>& carry, const T& s, std::span<const T> v) {
  using std::exp;
  using std::max;
  require(v.size() == carry.a.size(), Errc::dimension_mismatch, "value length != state length");
  require(is_finite(s), Errc::non_finite_input, "score must be finite");
  require_finite<T>(v, "value entries must be finite");
  const T m_next = stop_gradient(max(carry.m, s));
  const T keep = exp(carry.m - m_next);
  const T take = exp(s - m_next);
  count_madds(1);
  carry.c = carry.c * keep + take;
  scale_add<T>(carry.a, keep, v, take);
  carry.m = m_next;
}

template <class T>
void rnn_cell_update(AttentionCarry<T>& carry, const ScoredToken<T>& token) {
  rnn_cell_update<T>(carry, token.score, token.value.span());
}

template <class T>
AttentionState<T> rnn_cell_step(AttentionState<T> state, std::span<const T> k, std::span<const T> v,
                                ScoreOptions opts = {}) {
  require(k.size() == state.query.size(), Errc::dimension_mismatch, "key length != query length");
  require_finite<T>(k, "key entries must be finite");
  const T s = score<T>(state.query.span(), k, opts);
  rnn_cell_update<T>(state.carry, s, v);
  return state;
}

template <class T>
AttentionState<T> rnn_cell_step(AttentionState<T> state, const Vec<T>& k, const Vec<T>& v,
                                ScoreOptions opts = {}) {
  return rnn_cell_step<T>(std::move(state), k.span(), v.span(), opts);
}

namespace detail {

template <class T>
void validate_attention(const Vec<T>& q, const Mat<T>& keys, const Mat<T>& values) {
  require(!q.empty() && keys.rows() > 0 && values.rows() > 0, Errc::empty_input,
          "attention needs a query and at least one token");
  require(keys.rows() == values.rows(), Errc::dimension_mismatch, "K and V row counts differ");
  require(keys.cols() == q.size(), Errc::dimension_mismatch, "K.cols != q.len");
  require_finite<T>(q.span(), "query entries must be finite");
  require_finite<T>(keys.flat(), "key entries must be finite");
  require_finite<T>(values.flat(), "value entries must be finite");
}

template <class T>
void validate_scored(std::span<const T> scores, const Mat<T>& values) {
  require(!scores.empty() && values.rows() > 0, Errc::empty_input, "attention needs at least one token");
  require(scores.size() == values.rows(), Errc::dimension_mismatch, "score count != V rows");
  require_finite<T>(scores, "scores must be finite");
  require_finite<T>(values.flat(), "value entries must be finite");
}

template <class T>
std::vector<T> all_scores(const Vec<T>& q, const Mat<T>& keys, ScoreOptions opts) {
  std::vector<T> s(keys.rows());
  for (std::size_t i = 0; i < keys.rows(); ++i) s[i] = score<T>(q.span(), keys.row(i), opts);
  return s;
}

}  // namespace detail

// o = Σ softmax(s)_i v_i over already computed scores.
template <class T>
Vec<T> attention_oracle_scored(std::span<const T> scores, const Mat<T>& values) {
  detail::validate_scored<T>(scores, values);
  const Vec<T> weights = softmax_stable<T>(scores);
  Vec<T> out = Vec<T>::zeros(values.cols());
  for (std::size_t i = 0; i < values.rows(); ++i) add_scaled<T>(out.span(), values.row(i), weights[i]);
  return out;
}

// Conventional (parallel) attention for one query.
template <class T>
Vec<T> attention_oracle(const Vec<T>& q, const Mat<T>& keys, const Mat<T>& values, ScoreOptions opts = {}) {
  detail::validate_attention<T>(q, keys, values);
  const auto s = detail::all_scores<T>(q, keys, opts);
  return attention_oracle_scored<T>(s, values);
}

template <class T>
Vec<T> attention_sequential_scored(std::span<const T> scores, const Mat<T>& values) {
  detail::validate_scored<T>(scores, values);
  auto carry = AttentionCarry<T>::empty(values.cols());
  for (std::size_t i = 0; i < scores.size(); ++i) rnn_cell_update<T>(carry, scores[i], values.row(i));
  return carry.output();
}

// Token-by-token fold of the RNN cell; holds one carry at a time.
template <class T>
Vec<T> attention_sequential(const Vec<T>& q, const Mat<T>& keys, const Mat<T>& values, ScoreOptions opts = {}) {
  detail::validate_attention<T>(q, keys, values);
  auto carry = AttentionCarry<T>::empty(values.cols());
  for (std::size_t i = 0; i < keys.rows(); ++i) {
    rnn_cell_update<T>(carry, score<T>(q.span(), keys.row(i), opts), values.row(i));
  }
  return carry.output();
}

namespace detail {

// Folds one block of scored tokens into the carry:
//   m' = max(m, s_j...),  c' = c e^{m-m'} + Σ e^{s_j-m'},  a' = a e^{m-m'} + Σ v_j e^{s_j-m'}
// With a single token this performs the same operations, in the same order,
// as rnn_cell_update.
template <class T>
void fold_block(AttentionCarry<T>& carry, std::span<const T> scores, const Mat<T>& values,
                std::size_t first_row) {
  using std::exp;
  using std::max;
  T block_max = scores[0];
  for (std::size_t j = 1; j < scores.size(); ++j) block_max = max(block_max, scores[j]);
  const T m_next = stop_gradient(max(carry.m, block_max));
  const T keep = exp(carry.m - m_next);

  const std::size_t dv = carry.a.size();
  T take = exp(scores[0] - m_next);
  T sum_c = take;
  std::vector<T> sum_a(dv);
  const auto v0 = values.row(first_row);
  count_madds(dv);
  for (std::size_t i = 0; i < dv; ++i) sum_a[i] = v0[i] * take;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    take = exp(scores[j] - m_next);
    sum_c = sum_c + take;
    add_scaled<T>(sum_a, values.row(first_row + j), take);
  }

  count_madds(1 + dv);
  carry.c = carry.c * keep + sum_c;
  for (std::size_t i = 0; i < dv; ++i) carry.a[i] = carry.a[i] * keep + sum_a[i];
  carry.m = m_next;
}

}  // namespace detail

template <class T>
Vec<T> attention_block_scored(std::span<const T> scores, const Mat<T>& values, std::size_t block) {
  require(block >= 1, Errc::invalid_block_size, "block size must be at least 1");
  detail::validate_scored<T>(scores, values);
  auto carry = AttentionCarry<T>::empty(values.cols());
  for (std::size_t start = 0; start < scores.size(); start += block) {
    const std::size_t len = std::min(block, scores.size() - start);
    detail::fold_block<T>(carry, scores.subspan(start, len), values, start);
  }
  return carry.output();
}

// Block-by-block recurrence; auxiliary memory is one block of scores and one
// value-sized partial sum. The final block may be shorter than `block`.
template <class T>
Vec<T> attention_block(const Vec<T>& q, const Mat<T>& keys, const Mat<T>& values, std::size_t block,
                       ScoreOptions opts = {}) {
  require(block >= 1, Errc::invalid_block_size, "block size must be at least 1");
  detail::validate_attention<T>(q, keys, values);
  auto carry = AttentionCarry<T>::empty(values.cols());
  std::vector<T> scores;
  scores.reserve(std::min(block, keys.rows()));
  for (std::size_t start = 0; start < keys.rows(); start += block) {
    const std::size_t len = std::min(block, keys.rows() - start);
    scores.clear();
    for (std::size_t j = 0; j < len; ++j) scores.push_back(score<T>(q.span(), keys.row(start + j), opts));
    detail::fold_block<T>(carry, std::span<const T>(scores), values, start);
  }
  return carry.output();
}

}  // namespace aaren
