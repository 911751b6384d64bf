#pragma once

// Pieces shared by the Aaren stack and the baseline transformer: the model
// configuration, layer norm, the position-wise MLP and the pre-norm residual
// block wrapped around each model's attention sublayer.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aaren/error.hpp"
#include "aaren/numeric.hpp"

namespace aaren {

// One configuration type drives both model families so that a baseline and
// an Aaren built from the same config differ only in their attention.
struct AarenConfig {
  std::size_t d_model = 8;
  std::size_t n_heads = 1;
  std::size_t n_layers = 1;
  std::size_t ffn_mult = 4;
  bool use_ffn = false;
  bool use_layernorm = false;
  bool scaled_scores = false;
  bool use_residual = true;

  std::size_t d_head() const noexcept { return n_heads ? d_model / n_heads : 0; }
  std::size_t ffn_hidden() const noexcept { return ffn_mult * d_model; }

  void validate() const {
    require(d_model > 0, Errc::invalid_config, "d_model must be positive");
    require(n_heads > 0, Errc::invalid_config, "n_heads must be positive");
    require(d_model % n_heads == 0, Errc::invalid_config, "d_model must be divisible by n_heads");
    require(!use_ffn || ffn_mult > 0, Errc::invalid_config, "ffn_mult must be positive");
  }

  friend bool operator==(const AarenConfig&, const AarenConfig&) = default;
};

using TransformerConfig = AarenConfig;

template <class T>
using HiddenSeq = std::vector<Vec<T>>;

inline constexpr double kLayerNormEpsilon = 1e-5;

template <class T>
struct LayerNormParams {
  Vec<T> gain;
  Vec<T> bias;

  static LayerNormParams identity(std::size_t d) { return {Vec<T>::filled(d, T(1)), Vec<T>::zeros(d)}; }

  Vec<T> apply(std::span<const T> x) const {
    using std::sqrt;
    require(x.size() == gain.size(), Errc::dimension_mismatch, "layernorm: input length");
    const T n = T(static_cast<double>(x.size()));
    T mean = T(0);
    for (const T& xi : x) mean += xi;
    mean = mean / n;
    T var = T(0);
    for (const T& xi : x) {
      const T centered = xi - mean;
      var += centered * centered;
    }
    var = var / n;
    const T inv = T(1) / sqrt(var + T(kLayerNormEpsilon));
    count_madds(3 * x.size());
    std::vector<T> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    return Vec<T>(std::move(out));
  }
};

// tanh approximation of GELU; smooth everywhere, which keeps finite
// differences honest.
template <class T>
T gelu(const T& x) {
  using std::tanh;
  const T inner = T(0.7978845608028654) * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + tanh(inner));
}

template <class T>
struct MlpParams {
  Mat<T> w1;  // hidden x d_model
  Vec<T> b1;
  Mat<T> w2;  // d_model x hidden
  Vec<T> b2;

  Vec<T> apply(std::span<const T> x) const {
    Vec<T> hidden = matvec<T>(w1, x);
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = gelu<T>(hidden[i] + b1[i]);
    Vec<T> out = matvec<T>(w2, hidden.span());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] + b2[i];
    return out;
  }
};

// Optional sublayers around the attention: y = x + Attn(LN(x)), then
// optionally y + MLP(LN(y)). The residual adds are skipped when
// use_residual is off.
template <class T>
struct BlockParams {
  std::optional<LayerNormParams<T>> norm_attn;
  std::optional<MlpParams<T>> mlp;
  std::optional<LayerNormParams<T>> norm_ffn;

  Vec<T> attention_input(std::span<const T> x) const {
    if (norm_attn) return norm_attn->apply(x);
    return Vec<T>(std::vector<T>(x.begin(), x.end()));
  }

  Vec<T> finish(const AarenConfig& config, std::span<const T> x, const Vec<T>& attn) const {
    Vec<T> h = attn;
    if (config.use_residual) {
      for (std::size_t i = 0; i < h.size(); ++i) h[i] = x[i] + attn[i];
    }
    if (!mlp) return h;
    const Vec<T> ffn_in = norm_ffn ? norm_ffn->apply(h.span()) : h;
    const Vec<T> ffn = mlp->apply(ffn_in.span());
    if (!config.use_residual) return ffn;
    Vec<T> out = h;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = h[i] + ffn[i];
    return out;
  }
};

// Learnable scalars held by BlockParams for a config.
inline std::size_t block_param_count(const AarenConfig& c) {
  std::size_t n = 0;
  if (c.use_layernorm) n += 2 * c.d_model;
  if (c.use_ffn) {
    n += 2 * c.ffn_hidden() * c.d_model + c.ffn_hidden() + c.d_model;
    if (c.use_layernorm) n += 2 * c.d_model;
  }
  return n;
}

// Weight matrices use N(0, 1/fan_in); layer norms start at the identity and
// MLP biases at zero.
template <class T>
BlockParams<T> init_block(const AarenConfig& c, SeededRng& rng) {
  BlockParams<T> block;
  if (c.use_layernorm) block.norm_attn = LayerNormParams<T>::identity(c.d_model);
  if (c.use_ffn) {
    const std::size_t h = c.ffn_hidden();
    MlpParams<T> mlp{rng.normal_mat<T>(h, c.d_model, 1.0 / std::sqrt(double(c.d_model))),
                     Vec<T>::zeros(h),
                     rng.normal_mat<T>(c.d_model, h, 1.0 / std::sqrt(double(h))),
                     Vec<T>::zeros(c.d_model)};
    block.mlp = std::move(mlp);
    if (c.use_layernorm) block.norm_ffn = LayerNormParams<T>::identity(c.d_model);
  }
  return block;
}

// f(name, span) for every tensor of the block, in a fixed order.
template <class B, class F>
void visit_block(B& block, const std::string& prefix, F&& f) {
  if (block.norm_attn) {
    f(prefix + "norm_attn.gain", block.norm_attn->gain.span());
    f(prefix + "norm_attn.bias", block.norm_attn->bias.span());
  }
  if (block.mlp) {
    f(prefix + "mlp.w1", block.mlp->w1.flat());
    f(prefix + "mlp.b1", block.mlp->b1.span());
    f(prefix + "mlp.w2", block.mlp->w2.flat());
    f(prefix + "mlp.b2", block.mlp->b2.span());
  }
  if (block.norm_ffn) {
    f(prefix + "norm_ffn.gain", block.norm_ffn->gain.span());
    f(prefix + "norm_ffn.bias", block.norm_ffn->bias.span());
  }
}

template <class U, class T>
BlockParams<U> cast_block(const BlockParams<T>& b) {
  BlockParams<U> out;
  if (b.norm_attn) out.norm_attn = LayerNormParams<U>{cast_vec<U>(b.norm_attn->gain), cast_vec<U>(b.norm_attn->bias)};
  if (b.mlp) {
    out.mlp = MlpParams<U>{cast_mat<U>(b.mlp->w1), cast_vec<U>(b.mlp->b1), cast_mat<U>(b.mlp->w2),
                           cast_vec<U>(b.mlp->b2)};
  }
  if (b.norm_ffn) out.norm_ffn = LayerNormParams<U>{cast_vec<U>(b.norm_ffn->gain), cast_vec<U>(b.norm_ffn->bias)};
  return out;
}

template <class T>
Vec<T> head_slice(const Vec<T>& full, std::size_t head, std::size_t d_head) {
  const auto s = full.span().subspan(head * d_head, d_head);
  return Vec<T>(std::vector<T>(s.begin(), s.end()));
}

// ---------------------------------------------------------------------------
// Generic parameter plumbing over any model exposing visit_params.

template <class Model>
std::size_t flat_size(const Model& model) {
  std::size_t n = 0;
  visit_params(model, [&](const std::string&, auto span) { n += span.size(); });
  return n;
}

template <class Model>
std::vector<double> flatten(const Model& model) {
  std::vector<double> flat;
  visit_params(model, [&](const std::string&, auto span) {
    for (const auto& x : span) flat.push_back(value_of(x));
  });
  return flat;
}

struct NamedRange {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

template <class Model>
std::vector<NamedRange> param_layout(const Model& model) {
  std::vector<NamedRange> out;
  std::size_t offset = 0;
  visit_params(model, [&](const std::string& name, auto span) {
    out.push_back({name, offset, span.size()});
    offset += span.size();
  });
  return out;
}

template <class Model, class U>
void assign_flat(Model& model, std::span<const U> flat) {
  require(flat.size() == flat_size(model), Errc::dimension_mismatch, "flat parameter length");
  std::size_t offset = 0;
  visit_params(model, [&](const std::string&, auto span) {
    for (auto& x : span) x = flat[offset++];
  });
}

}  // namespace aaren
