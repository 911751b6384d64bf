#pragma once

// Aaren: attention as a many-to-many RNN with a learned, input-independent
// query per layer. layer_forward computes every prefix output in parallel
// with the prefix scan; layer_step advances one token with O(1) state per
// head. The two agree position for position.

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
#include "aaren/scan.hpp"

namespace aaren {

template <class T>
struct AarenLayerParams {
  Vec<T> query;  // d_model; head h owns entries [h*d_head, (h+1)*d_head)
  Mat<T> w_k;
  Mat<T> w_v;
  Mat<T> w_o;
  BlockParams<T> block;
};

template <class T>
struct AarenModel {
  AarenConfig config;
  std::vector<AarenLayerParams<T>> layers;
};

// Streaming state: one (a, c, m) carry per head per layer. Its size never
// depends on how many tokens have been consumed.
template <class T>
struct AarenState {
  std::vector<std::vector<AttentionCarry<T>>> layers;
  std::uint64_t tokens_seen = 0;

  static AarenState fresh(const AarenConfig& config) {
    config.validate();
    AarenState st;
    st.layers.assign(config.n_layers,
                     std::vector<AttentionCarry<T>>(config.n_heads, AttentionCarry<T>::empty(config.d_head())));
    return st;
  }

  std::size_t scalar_count() const noexcept {
    std::size_t n = 0;
    for (const auto& layer : layers) {
      for (const auto& head : layer) n += head.scalar_count();
    }
    return n;
  }
};

template <class T>
AarenModel<T> init_aaren(const AarenConfig& config, SeededRng rng) {
  config.validate();
  AarenModel<T> model{config, {}};
  const std::size_t d = config.d_model;
  const double sd = 1.0 / std::sqrt(double(d));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    SeededRng layer_rng = rng.fork(l);
    AarenLayerParams<T> layer;
    layer.query = layer_rng.normal_vec<T>(d, sd);
    layer.w_k = layer_rng.normal_mat<T>(d, d, sd);
    layer.w_v = layer_rng.normal_mat<T>(d, d, sd);
    layer.w_o = layer_rng.normal_mat<T>(d, d, sd);
    layer.block = init_block<T>(config, layer_rng);
    model.layers.push_back(std::move(layer));
  }
  return model;
}

template <class M, class F>
  requires requires(M& m) { m.layers.front().query; }
void visit_params(M& model, F&& f) {
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    auto& layer = model.layers[l];
    const std::string prefix = "layer" + std::to_string(l) + ".";
    f(prefix + "query", layer.query.span());
    f(prefix + "w_k", layer.w_k.flat());
    f(prefix + "w_v", layer.w_v.flat());
    f(prefix + "w_o", layer.w_o.flat());
    visit_block(layer.block, prefix, f);
  }
}

template <class U, class T>
AarenModel<U> cast_model(const AarenModel<T>& model) {
  AarenModel<U> out{model.config, {}};
  for (const auto& layer : model.layers) {
    out.layers.push_back({cast_vec<U>(layer.query), cast_mat<U>(layer.w_k), cast_mat<U>(layer.w_v),
                          cast_mat<U>(layer.w_o), cast_block<U>(layer.block)});
  }
  return out;
}

// Same structure as `model`, scalars replaced by `flat` (in visit order).
template <class U, class T>
AarenModel<U> rebind(const AarenModel<T>& model, std::span<const U> flat) {
  AarenModel<U> out = cast_model<U>(model);
  assign_flat(out, flat);
  return out;
}

namespace detail {

template <class T>
void check_tokens(const HiddenSeq<T>& inputs, std::size_t d_model) {
  for (const auto& x : inputs) {
    require(x.size() == d_model, Errc::dimension_mismatch, "token length != d_model");
  }
}

// W_o applied to the concatenated head outputs, then the block tail.
template <class T>
Vec<T> project_heads(const AarenConfig& config, const Mat<T>& w_o, const BlockParams<T>& block,
                     std::span<const T> x, std::span<const Vec<T>> heads) {
  std::vector<T> concat;
  concat.reserve(config.d_model);
  for (const auto& h : heads) concat.insert(concat.end(), h.begin(), h.end());
  const Vec<T> attn = matvec<T>(w_o, std::span<const T>(concat));
  return block.finish(config, x, attn);
}

}  // namespace detail

template <class T, class Exec = SerialFor>
HiddenSeq<T> layer_forward(const AarenConfig& config, const AarenLayerParams<T>& layer, const HiddenSeq<T>& inputs,
                           const Exec& exec = {}) {
  config.validate();
  detail::check_tokens(inputs, config.d_model);
  if (inputs.empty()) return {};
  const std::size_t n = inputs.size();
  const std::size_t dh = config.d_head();
  const ScoreOptions opts{config.scaled_scores};

  std::vector<Vec<T>> keys(n), values(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec<T> z = layer.block.attention_input(inputs[i].span());
    keys[i] = matvec<T>(layer.w_k, z);
    values[i] = matvec<T>(layer.w_v, z);
  }

  // per_head[h][i] = prefix output of head h at position i
  std::vector<std::vector<Vec<T>>> per_head(config.n_heads);
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    const auto q = layer.query.span().subspan(h * dh, dh);
    std::vector<T> scores(n);
    std::vector<T> v_flat;
    v_flat.reserve(n * dh);
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = score<T>(q, keys[i].span().subspan(h * dh, dh), opts);
      const auto vh = values[i].span().subspan(h * dh, dh);
      v_flat.insert(v_flat.end(), vh.begin(), vh.end());
    }
    per_head[h] = many_to_many_scored<T>(std::span<const T>(scores), Mat<T>(n, dh, std::move(v_flat)), exec);
  }

  HiddenSeq<T> out;
  out.reserve(n);
  std::vector<Vec<T>> heads(config.n_heads);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < config.n_heads; ++h) heads[h] = per_head[h][i];
    out.push_back(detail::project_heads<T>(config, layer.w_o, layer.block, inputs[i].span(), heads));
  }
  return out;
}

// Advances every head's carry by one token and returns that token's output.
template <class T>
Vec<T> layer_step(const AarenConfig& config, const AarenLayerParams<T>& layer,
                  std::vector<AttentionCarry<T>>& heads_state, const Vec<T>& x) {
  require(x.size() == config.d_model, Errc::dimension_mismatch, "token length != d_model");
  require(heads_state.size() == config.n_heads, Errc::dimension_mismatch, "state head count");
  const std::size_t dh = config.d_head();
  const ScoreOptions opts{config.scaled_scores};
  const Vec<T> z = layer.block.attention_input(x.span());
  const Vec<T> k = matvec<T>(layer.w_k, z);
  const Vec<T> v = matvec<T>(layer.w_v, z);
  std::vector<Vec<T>> heads(config.n_heads);
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    const T s = score<T>(layer.query.span().subspan(h * dh, dh), k.span().subspan(h * dh, dh), opts);
    rnn_cell_update<T>(heads_state[h], s, v.span().subspan(h * dh, dh));
    heads[h] = heads_state[h].output();
  }
  return detail::project_heads<T>(config, layer.w_o, layer.block, x.span(), heads);
}

template <class T, class Exec = SerialFor>
HiddenSeq<T> model_forward(const AarenModel<T>& model, HiddenSeq<T> inputs, const Exec& exec = {}) {
  for (const auto& layer : model.layers) inputs = layer_forward<T>(model.config, layer, inputs, exec);
  return inputs;
}

template <class T>
Vec<T> model_step(const AarenModel<T>& model, AarenState<T>& state, Vec<T> x) {
  require(state.layers.size() == model.layers.size(), Errc::dimension_mismatch, "state layer count");
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    x = layer_step<T>(model.config, model.layers[l], state.layers[l], x);
  }
  ++state.tokens_seen;
  return x;
}

// Learnable scalars of an Aaren stack: per layer q (d) + W_k, W_v, W_o (3 d^2)
// + block extras.
inline std::size_t aaren_param_count(const AarenConfig& c) {
  c.validate();
  return c.n_layers * (c.d_model + 3 * c.d_model * c.d_model + block_param_count(c));
}

}  // namespace aaren
