#pragma once

// Baseline causal self-attention transformer with KV-cache decoding. Uses the
// same block structure and config toggles as the Aaren stack; the only
// differences are the input-projected query (W_q) and attention over the
// cached history.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aaren/attention.hpp"
#include "aaren/error.hpp"
#include "aaren/layers.hpp"
#include "aaren/numeric.hpp"

namespace aaren {

template <class T>
struct TransformerLayerParams {
  Mat<T> w_q;
  Mat<T> w_k;
  Mat<T> w_v;
  Mat<T> w_o;
  BlockParams<T> block;
};

template <class T>
struct TransformerModel {
  TransformerConfig config;
  std::vector<TransformerLayerParams<T>> layers;
};

// Keys and values of one head, row-major (length x d_head each).
template <class T>
struct HeadCache {
  std::vector<T> keys;
  std::vector<T> values;
  std::size_t length = 0;
};

template <class T>
struct KvCache {
  std::vector<std::vector<HeadCache<T>>> layers;
  std::size_t d_head = 0;

  static KvCache fresh(const TransformerConfig& config) {
    config.validate();
    KvCache cache;
    cache.layers.assign(config.n_layers, std::vector<HeadCache<T>>(config.n_heads));
    cache.d_head = config.d_head();
    return cache;
  }

  std::size_t length() const noexcept {
    return layers.empty() || layers.front().empty() ? 0 : layers.front().front().length;
  }

  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& layer : layers) {
      for (const auto& head : layer) n += head.keys.size() + head.values.size();
    }
    return n;
  }
};

template <class T>
TransformerModel<T> init_transformer(const TransformerConfig& config, SeededRng rng) {
  config.validate();
  TransformerModel<T> model{config, {}};
  const std::size_t d = config.d_model;
  const double sd = 1.0 / std::sqrt(double(d));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    SeededRng layer_rng = rng.fork(l);
    TransformerLayerParams<T> layer;
    layer.w_q = layer_rng.normal_mat<T>(d, d, sd);
    layer.w_k = layer_rng.normal_mat<T>(d, d, sd);
    layer.w_v = layer_rng.normal_mat<T>(d, d, sd);
    layer.w_o = layer_rng.normal_mat<T>(d, d, sd);
    layer.block = init_block<T>(config, layer_rng);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

template <class M, class F>
  requires requires(M& m) { m.layers.front().w_q; }
void visit_params(M& model, F&& f) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    f(prefix + "w_q", layer.w_q.flat());
    f(prefix + "w_k", layer.w_k.flat());
    f(prefix + "w_v", layer.w_v.flat());
    f(prefix + "w_o", layer.w_o.flat());
    visit_block(layer.block, prefix, f);
  }
}

template <class U, class T>
TransformerModel<U> cast_model(const TransformerModel<T>& model) {
  TransformerModel<U> out{model.config, {}};
  for (const auto& layer : model.layers) {
    out.layers.push_back({cast_mat<U>(layer.w_q), cast_mat<U>(layer.w_k), cast_mat<U>(layer.w_v),
                          cast_mat<U>(layer.w_o), cast_block<U>(layer.block)});
  }
  return out;
}

template <class U, class T>
TransformerModel<U> rebind(const TransformerModel<T>& model, std::span<const U> flat) {
  TransformerModel<U> out = cast_model<U>(model);
  assign_flat(out, flat);
  return out;
}

namespace detail {

// Softmax attention of q over the first `length` cached rows.
template <class T>
Vec<T> attend_cached(std::span<const T> q, std::span<const T> keys, std::span<const T> values,
                     std::size_t length, ScoreOptions opts) {
  const std::size_t dh = q.size();
  std::vector<T> scores(length);
  for (std::size_t j = 0; j < length; ++j) scores[j] = score<T>(q, keys.subspan(j * dh, dh), opts);
  const Vec<T> weights = softmax_stable<T>(std::span<const T>(scores));
  Vec<T> out = Vec<T>::zeros(dh);
  for (std::size_t j = 0; j < length; ++j) add_scaled<T>(out.span(), values.subspan(j * dh, dh), weights[j]);
  return out;
}

template <class T>
Vec<T> finish_heads(const TransformerConfig& config, const TransformerLayerParams<T>& layer,
                    std::span<const T> x, std::span<const Vec<T>> heads) {
  std::vector<T> concat;
  concat.reserve(config.d_model);
  for (const auto& h : heads) concat.insert(concat.end(), h.begin(), h.end());
  const Vec<T> attn = matvec<T>(layer.w_o, std::span<const T>(concat));
  return layer.block.finish(config, x, attn);
}

}  // namespace detail

// Position k attends over positions 1..k.
template <class T>
HiddenSeq<T> causal_self_attention(const TransformerConfig& config, const TransformerLayerParams<T>& layer,
                                   const HiddenSeq<T>& inputs) {
  config.validate();
  for (const auto& x : inputs) require(x.size() == config.d_model, Errc::dimension_mismatch, "token length");
  const std::size_t n = inputs.size();
  const std::size_t dh = config.d_head();
  const ScoreOptions opts{config.scaled_scores};

  std::vector<Vec<T>> queries(n);
  std::vector<std::vector<T>> keys(config.n_heads), values(config.n_heads);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec<T> z = layer.block.attention_input(inputs[i].span());
    queries[i] = matvec<T>(layer.w_q, z);
    const Vec<T> k = matvec<T>(layer.w_k, z);
    const Vec<T> v = matvec<T>(layer.w_v, z);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const auto kh = k.span().subspan(h * dh, dh);
      const auto vh = v.span().subspan(h * dh, dh);
      keys[h].insert(keys[h].end(), kh.begin(), kh.end());
      values[h].insert(values[h].end(), vh.begin(), vh.end());
    }
  }

  HiddenSeq<T> out;
  out.reserve(n);
  std::vector<Vec<T>> heads(config.n_heads);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      heads[h] = detail::attend_cached<T>(queries[i].span().subspan(h * dh, dh), keys[h], values[h], i + 1, opts);
    }
    out.push_back(detail::finish_heads<T>(config, layer, inputs[i].span(), heads));
  }
  return out;
}

// Appends this token's key/value to the layer's cache and attends over all of it.
template <class T>
Vec<T> kv_layer_step(const TransformerConfig& config, const TransformerLayerParams<T>& layer,
                     std::vector<HeadCache<T>>& cache, const Vec<T>& x) {
  require(x.size() == config.d_model, Errc::dimension_mismatch, "token length != d_model");
  require(cache.size() == config.n_heads, Errc::dimension_mismatch, "cache head count");
  const std::size_t dh = config.d_head();
  const ScoreOptions opts{config.scaled_scores};
  const Vec<T> z = layer.block.attention_input(x.span());
  const Vec<T> q = matvec<T>(layer.w_q, z);
  const Vec<T> k = matvec<T>(layer.w_k, z);
  const Vec<T> v = matvec<T>(layer.w_v, z);
  std::vector<Vec<T>> heads(config.n_heads);
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    auto& hc = cache[h];
    const auto kh = k.span().subspan(h * dh, dh);
    const auto vh = v.span().subspan(h * dh, dh);
    hc.keys.insert(hc.keys.end(), kh.begin(), kh.end());
    hc.values.insert(hc.values.end(), vh.begin(), vh.end());
    ++hc.length;
    heads[h] = detail::attend_cached<T>(q.span().subspan(h * dh, dh), hc.keys, hc.values, hc.length, opts);
  }
  return detail::finish_heads<T>(config, layer, x.span(), heads);
}

template <class T>
HiddenSeq<T> model_forward(const TransformerModel<T>& model, HiddenSeq<T> inputs) {
  for (const auto& layer : model.layers) inputs = causal_self_attention<T>(model.config, layer, inputs);
  return inputs;
}

template <class T>
Vec<T> kv_cache_step(const TransformerModel<T>& model, KvCache<T>& cache, Vec<T> x) {
  require(cache.layers.size() == model.layers.size(), Errc::dimension_mismatch, "cache layer count");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    x = kv_layer_step<T>(model.config, model.layers[l], cache.layers[l], x);
  }
  return x;
}

// Per layer W_q, W_k, W_v, W_o (4 d^2) + block extras.
inline std::size_t transformer_param_count(const TransformerConfig& c) {
  c.validate();
  return c.n_layers * (4 * c.d_model * c.d_model + block_param_count(c));
}

// Aaren minus baseline for one config: L (d - d^2), since Aaren adds a
// learned query and drops W_q.
inline std::int64_t aaren_param_delta(const AarenConfig& c) {
  const auto d = static_cast<std::int64_t>(c.d_model);
  return static_cast<std::int64_t>(c.n_layers) * (d - d * d);
}

}  // namespace aaren
