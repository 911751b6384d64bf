#pragma once

// Seeded property probes over the kernels, the scan, the two model families
// and their gradients. Each probe returns the worst error it saw; suites
// bundle probes with tolerances for the command-line `verify` entry point,
// and the acceptance tests run the same probes at full size.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <type_traits>
#include <vector>

#include "aaren/aaren.hpp"
#include "aaren/attention.hpp"
#include "aaren/autodiff.hpp"
#include "aaren/layers.hpp"
#include "aaren/numeric.hpp"
#include "aaren/scan.hpp"
#include "aaren/transformer.hpp"

namespace aaren {

struct Measurement {
  double worst = 0.0;
  std::size_t instances = 0;

  void add(double err) {
    worst = std::isnan(err) ? std::numeric_limits<double>::infinity() : std::max(worst, err);
  }
};

struct CheckResult {
  std::string suite;
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

namespace detail {

inline std::size_t uniform_size(SeededRng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

template <class T>
Mat<T> random_mat(SeededRng& rng, std::size_t r, std::size_t c) {
  return rng.normal_mat<T>(r, c);
}

}  // namespace detail

// Sequential, block (b in {1, 2, 3, 8, N}) and oracle attention on random
// instances with N <= max_n and d <= max_d, compared against the oracle in
// the same precision.
template <class T>
Measurement probe_formulations(std::uint64_t seed, std::size_t instances, std::size_t max_n,
                               std::size_t max_d) {
  SeededRng rng(seed);
  Measurement out;
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t n = detail::uniform_size(rng, 1, max_n);
    const std::size_t d = detail::uniform_size(rng, 1, max_d);
    const auto q = rng.normal_vec<T>(d);
    const auto keys = detail::random_mat<T>(rng, n, d);
    const auto values = detail::random_mat<T>(rng, n, detail::uniform_size(rng, 1, max_d));
    const auto ref = attention_oracle<T>(q, keys, values);
    out.add(relative_error(attention_sequential<T>(q, keys, values), ref));
    for (const std::size_t b : {std::size_t(1), std::size_t(2), std::size_t(3), std::size_t(8), n}) {
      out.add(relative_error(attention_block<T>(q, keys, values, b), ref));
    }
    ++out.instances;
  }
  return out;
}

// Scan prefix states (m_k, u_k, w_k) against the recurrence's (m_k, c_k, a_k).
inline Measurement probe_scan_states(std::uint64_t seed, std::size_t instances, std::size_t max_n,
                                     std::size_t max_d) {
  SeededRng rng(seed);
  Measurement out;
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t n = detail::uniform_size(rng, 1, max_n);
    const std::size_t d = detail::uniform_size(rng, 1, max_d);
    std::vector<double> scores(n);
    const double spread = rng.uniform(0.5, 30.0);
    for (double& s : scores) s = spread * rng.normal();
    const auto values = detail::random_mat<double>(rng, n, d);
    const auto states = prefix_states_scored<double>(std::span<const double>(scores), values);
    auto carry = AttentionCarry<double>::empty(d);
    for (std::size_t k = 0; k < n; ++k) {
      rnn_cell_update<double>(carry, scores[k], values.row(k));
      out.add(relative_error(states[k].m, carry.m));
      out.add(relative_error(states[k].u, carry.c));
      out.add(relative_error<double, double>(states[k].w, carry.a));
    }
    ++out.instances;
  }
  return out;
}

// (x ⊕ y) ⊕ z against x ⊕ (y ⊕ z) on leaves whose m differ by up to `spread`.
inline Measurement probe_combine_associativity(std::uint64_t seed, std::size_t triples, double spread) {
  SeededRng rng(seed);
  Measurement out;
  for (std::size_t it = 0; it < triples; ++it) {
    const std::size_t d = detail::uniform_size(rng, 1, 8);
    ScanElement<double> e[3];
    for (auto& x : e) {
      const double m = rng.uniform(-spread / 2, spread / 2);
      const auto w = rng.normal_vec<double>(d);
      const double u = rng.uniform(0.5, 4.0);
      x = ScanElement<double>{m, u, std::vector<double>(w.begin(), w.end())};
    }
    const auto left = combine(combine(e[0], e[1]), e[2]);
    const auto right = combine(e[0], combine(e[1], e[2]));
    out.add(relative_error(left.m, right.m));
    out.add(relative_error(left.u, right.u));
    out.add(relative_error<double, double>(left.w, right.w));
    ++out.instances;
  }
  return out;
}

// Scan many-to-many outputs against the per-prefix oracle.
inline Measurement probe_many_to_many(std::uint64_t seed, std::size_t instances, std::size_t max_n,
                                      std::size_t max_d) {
  SeededRng rng(seed);
  Measurement out;
  for (std::size_t it = 0; it < instances; ++it) {
    const std::size_t n = detail::uniform_size(rng, 1, max_n);
    const std::size_t d = detail::uniform_size(rng, 1, max_d);
    const auto q = rng.normal_vec<double>(d);
    const auto keys = detail::random_mat<double>(rng, n, d);
    const auto values = detail::random_mat<double>(rng, n, d);
    const auto scan = attention_many_to_many<double>(q, keys, values);
    const auto naive = naive_many_to_many<double>(q, keys, values);
    for (std::size_t k = 0; k < n; ++k) out.add(relative_error(scan[k], naive[k]));
    ++out.instances;
  }
  return out;
}

// Threaded scan must reproduce the serial one bit for bit.
inline bool probe_threaded_scan(std::uint64_t seed, std::size_t n, std::size_t d) {
  SeededRng rng(seed);
  const auto q = rng.normal_vec<double>(d);
  const auto keys = detail::random_mat<double>(rng, n, d);
  const auto values = detail::random_mat<double>(rng, n, d);
  return attention_many_to_many<double>(q, keys, values, {}, ThreadedFor{4, 16}) ==
         attention_many_to_many<double>(q, keys, values);
}

inline AarenConfig random_model_config(SeededRng& rng, std::size_t max_layers) {
  AarenConfig c;
  c.n_heads = detail::uniform_size(rng, 1, 2);
  c.d_model = c.n_heads * detail::uniform_size(rng, 2, 4);
  c.n_layers = detail::uniform_size(rng, 1, max_layers);
  c.ffn_mult = 2;
  c.use_ffn = rng.below(2) == 1;
  c.use_layernorm = rng.below(2) == 1;
  c.scaled_scores = rng.below(2) == 1;
  return c;
}

// Token-by-token stepping against the batch forward, for both model
// families built from the same random configs.
inline Measurement probe_streaming(std::uint64_t seed, std::size_t instances, std::size_t max_layers,
                                   std::size_t max_n) {
  SeededRng rng(seed);
  Measurement out;
  for (std::size_t it = 0; it < instances; ++it) {
    const AarenConfig c = random_model_config(rng, max_layers);
    const std::size_t n = detail::uniform_size(rng, 1, max_n);
    HiddenSeq<double> xs;
    for (std::size_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec<double>(c.d_model));

    const auto aaren = init_aaren<double>(c, rng.fork(it));
    const auto batch = model_forward(aaren, xs);
    auto state = AarenState<double>::fresh(c);
    for (std::size_t i = 0; i < n; ++i) out.add(relative_error(model_step(aaren, state, xs[i]), batch[i]));

    const auto transformer = init_transformer<double>(c, rng.fork(it + instances));
    const auto tbatch = model_forward(transformer, xs);
    auto cache = KvCache<double>::fresh(c);
    for (std::size_t i = 0; i < n; ++i) {
      out.add(relative_error(kv_cache_step(transformer, cache, xs[i]), tbatch[i]));
    }
    ++out.instances;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradients

// Config used for full-model gradient checks: every block component on.
inline AarenConfig gradcheck_config(std::size_t d_model, std::size_t n_layers) {
  AarenConfig c;
  c.d_model = d_model;
  c.n_heads = 2;
  c.n_layers = n_layers;
  c.ffn_mult = 2;
  c.use_ffn = true;
  c.use_layernorm = true;
  return c;
}

// Finite-difference check of L = Σ_k r_k · y_k over every parameter of
// `model`, with fixed random inputs x and readout vectors r.
template <class Model>
ad::GradReport model_gradcheck(const Model& model, std::size_t n_tokens, std::uint64_t seed, double h) {
  SeededRng rng(seed);
  const std::size_t d = model.config.d_model;
  HiddenSeq<double> xs, rs;
  for (std::size_t i = 0; i < n_tokens; ++i) xs.push_back(rng.normal_vec<double>(d));
  for (std::size_t i = 0; i < n_tokens; ++i) rs.push_back(rng.normal_vec<double>(d));
  const auto loss = [&](auto p) {
    using S = std::remove_cvref_t<decltype(p[0])>;
    const auto m = rebind<S>(model, p);
    HiddenSeq<S> inputs;
    for (const auto& x : xs) inputs.push_back(cast_vec<S>(x));
    const auto ys = model_forward(m, inputs);
    S total = S(0);
    for (std::size_t k = 0; k < ys.size(); ++k) {
      for (std::size_t i = 0; i < d; ++i) total += S(rs[k][i]) * ys[k][i];
    }
    return total;
  };
  std::vector<ad::ParamGroup> groups;
  for (const auto& r : param_layout(model)) groups.push_back({r.name, r.offset, r.count});
  const auto flat = flatten(model);
  return ad::gradcheck(loss, std::span<const double>(flat), h, groups);
}

// Gradients with respect to (q, K, V) of L = Σ_k r_k · o_k, taken once
// through the scan and once through the per-prefix oracle.
inline double probe_scan_gradients(std::uint64_t seed, std::size_t n, std::size_t d) {
  SeededRng rng(seed);
  std::vector<double> flat;
  for (std::size_t i = 0; i < d + 2 * n * d; ++i) flat.push_back(rng.normal());
  HiddenSeq<double> rs;
  for (std::size_t i = 0; i < n; ++i) rs.push_back(rng.normal_vec<double>(d));

  const auto make_loss = [&](bool through_scan) {
    return [&, through_scan](std::span<const ad::Var> p) {
      using S = ad::Var;
      const Vec<S> q(std::vector<S>(p.begin(), p.begin() + d));
      const Mat<S> keys(n, d, std::vector<S>(p.begin() + d, p.begin() + d + n * d));
      const Mat<S> values(n, d, std::vector<S>(p.begin() + d + n * d, p.end()));
      const auto outs = through_scan ? attention_many_to_many<S>(q, keys, values)
                                     : naive_many_to_many<S>(q, keys, values);
      S total = S(0);
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t i = 0; i < d; ++i) total += S(rs[k][i]) * outs[k][i];
      }
      return total;
    };
  };
  auto scan_taped = ad::forward_with_tape(make_loss(true), flat);
  auto naive_taped = ad::forward_with_tape(make_loss(false), flat);
  const auto g_scan = ad::backward(scan_taped);
  const auto g_naive = ad::backward(naive_taped);
  return relative_error<double, double>(std::span<const double>(g_scan), std::span<const double>(g_naive));
}

// ---------------------------------------------------------------------------
// Suites for the command-line verifier: the same probes at reduced size.

namespace detail {

inline CheckResult check(const std::string& suite, const std::string& name, double value, double tol) {
  return {suite, name, value, tol, value <= tol};
}

}  // namespace detail

inline std::vector<CheckResult> verify_kernels(std::uint64_t seed) {
  return {
      detail::check("kernels", "formulations_double", probe_formulations<double>(seed, 200, 256, 32).worst, 1e-12),
      detail::check("kernels", "formulations_single", probe_formulations<float>(seed + 1, 200, 256, 32).worst, 1e-5),
  };
}

inline std::vector<CheckResult> verify_scan(std::uint64_t seed) {
  return {
      detail::check("scan", "combine_associativity", probe_combine_associativity(seed, 2000, 700.0).worst, 1e-12),
      detail::check("scan", "prefix_states_vs_recurrence", probe_scan_states(seed + 1, 200, 256, 16).worst, 1e-12),
      detail::check("scan", "many_to_many_vs_naive", probe_many_to_many(seed + 2, 20, 128, 16).worst, 1e-12),
      detail::check("scan", "threaded_matches_serial", probe_threaded_scan(seed + 3, 300, 8) ? 0.0 : 1.0, 0.0),
  };
}

inline std::vector<CheckResult> verify_aaren(std::uint64_t seed) {
  std::vector<CheckResult> out;
  out.push_back(detail::check("aaren", "streaming_vs_batch", probe_streaming(seed, 12, 3, 48).worst, 1e-10));

  SeededRng rng(seed + 1);
  const AarenConfig c = random_model_config(rng, 2);
  const auto model = init_aaren<double>(c, rng.fork(0));
  auto state = AarenState<double>::fresh(c);
  const std::size_t before = state.scalar_count();
  for (int i = 0; i < 100; ++i) model_step(model, state, rng.normal_vec<double>(c.d_model));
  out.push_back(detail::check("aaren", "constant_state",
                              std::abs(double(state.scalar_count()) - double(before)), 0.0));
  out.push_back(detail::check("aaren", "param_count_matches_layout",
                              std::abs(double(flat_size(model)) - double(aaren_param_count(c))), 0.0));
  return out;
}

struct GradSuite {
  std::vector<CheckResult> checks;
  ad::GradReport aaren;
  ad::GradReport transformer;
};

inline GradSuite verify_grad(std::uint64_t seed) {
  GradSuite suite;
  const AarenConfig c = gradcheck_config(8, 2);
  suite.aaren = model_gradcheck(init_aaren<double>(c, SeededRng(seed)), 8, seed + 1, 1e-5);
  suite.transformer = model_gradcheck(init_transformer<double>(c, SeededRng(seed)), 8, seed + 1, 1e-5);
  suite.checks.push_back(detail::check("grad", "aaren_gradcheck", suite.aaren.max_rel_error, 1e-5));
  suite.checks.push_back(detail::check("grad", "transformer_gradcheck", suite.transformer.max_rel_error, 1e-5));
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 4; ++i) worst = std::max(worst, probe_scan_gradients(seed + 10 + i, 16, 4));
  suite.checks.push_back(detail::check("grad", "scan_vs_prefix_gradients", worst, 1e-8));
  return suite;
}

}  // namespace aaren
