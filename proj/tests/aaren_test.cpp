#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "aaren/aaren.hpp"
#include "aaren/autodiff.hpp"
#include "aaren/scan.hpp"
#include "aaren/transformer.hpp"

namespace aaren {
namespace {

HiddenSeq<double> random_tokens(SeededRng& rng, std::size_t n, std::size_t d) {
  HiddenSeq<double> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(rng.normal_vec<double>(d));
  return xs;
}

AarenConfig full_config(std::size_t d, std::size_t heads, std::size_t layers) {
  AarenConfig c;
  c.d_model = d;
  c.n_heads = heads;
  c.n_layers = layers;
  c.ffn_mult = 2;
  c.use_ffn = true;
  c.use_layernorm = true;
  return c;
}

TEST(AarenInit, DeterministicAndShaped) {
  AarenConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  const auto a = init_aaren<double>(c, SeededRng(5));
  const auto b = init_aaren<double>(c, SeededRng(5));
  EXPECT_EQ(flatten(a), flatten(b));
  EXPECT_EQ(a.layers.at(0).query.size(), 8u);
  EXPECT_NE(flatten(a), flatten(init_aaren<double>(c, SeededRng(6))));
}

TEST(AarenInit, InvalidConfig) {
  AarenConfig c;
  c.d_model = 6;
  c.n_heads = 4;
  try {
    (void)init_aaren<double>(c, SeededRng(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_config);
  }
}

TEST(ParamCount, HandCountedTinyConfigs) {
  AarenConfig bare;
  bare.d_model = 4;
  bare.n_heads = 1;
  bare.n_layers = 1;
  EXPECT_EQ(aaren_param_count(bare), 52u);        // 3*16 + 4
  EXPECT_EQ(transformer_param_count(bare), 64u);  // 4*16

  AarenConfig normed = bare;  // two layers, layer norm, no MLP
  normed.n_layers = 2;
  normed.n_heads = 2;
  normed.use_layernorm = true;
  EXPECT_EQ(aaren_param_count(normed), 120u);        // 2 * (4 + 48 + 8)
  EXPECT_EQ(transformer_param_count(normed), 144u);  // 2 * (64 + 8)

  AarenConfig full;
  full.d_model = 2;
  full.n_heads = 1;
  full.n_layers = 1;
  full.ffn_mult = 2;
  full.use_ffn = true;
  full.use_layernorm = true;
  // q 2 + W 12 + LN 4 + W1 8 + b1 4 + W2 8 + b2 2 + LN 4
  EXPECT_EQ(aaren_param_count(full), 44u);
  EXPECT_EQ(transformer_param_count(full), 46u);

  for (const auto& c : {bare, normed, full}) {
    EXPECT_EQ(flat_size(init_aaren<double>(c, SeededRng(1))), aaren_param_count(c));
    EXPECT_EQ(flat_size(init_transformer<double>(c, SeededRng(1))), transformer_param_count(c));
    EXPECT_EQ(static_cast<std::int64_t>(aaren_param_count(c)) - static_cast<std::int64_t>(transformer_param_count(c)),
              aaren_param_delta(c));
    EXPECT_EQ(aaren_param_delta(c), static_cast<std::int64_t>(c.n_layers * c.d_model) -
                                        static_cast<std::int64_t>(c.n_layers * c.d_model * c.d_model));
  }
}

TEST(LayerForward, FirstOutputDependsOnlyOnFirstToken) {
  SeededRng rng(2);
  const auto c = full_config(8, 2, 1);
  const auto model = init_aaren<double>(c, rng.fork(0));
  auto xs = random_tokens(rng, 5, 8);
  const auto all = layer_forward(c, model.layers[0], xs);
  const auto single = layer_forward(c, model.layers[0], HiddenSeq<double>{xs[0]});
  EXPECT_EQ(all[0], single[0]);
}

TEST(LayerForward, IdenticalTokensGiveIdenticalOutputs) {
  SeededRng rng(3);
  const auto c = full_config(8, 2, 1);
  const auto model = init_aaren<double>(c, rng.fork(0));
  const auto x = rng.normal_vec<double>(8);
  const auto out = layer_forward(c, model.layers[0], HiddenSeq<double>(7, x));
  for (const auto& y : out) EXPECT_LE(relative_error(y, out[0]), 1e-15);
}

// Independent composition: per head, the naive per-prefix oracle on the
// projected keys/values, then W_o and the block tail.
HiddenSeq<double> composed_oracle(const AarenConfig& c, const AarenLayerParams<double>& layer,
                                  const HiddenSeq<double>& xs) {
  const std::size_t n = xs.size(), dh = c.d_head();
  std::vector<std::vector<Vec<double>>> per_head(c.n_heads);
  for (std::size_t h = 0; h < c.n_heads; ++h) {
    std::vector<double> kf, vf;
    for (const auto& x : xs) {
      const auto z = layer.block.attention_input(x.span());
      const auto k = matvec(layer.w_k, z);
      const auto v = matvec(layer.w_v, z);
      kf.insert(kf.end(), k.begin() + h * dh, k.begin() + (h + 1) * dh);
      vf.insert(vf.end(), v.begin() + h * dh, v.begin() + (h + 1) * dh);
    }
    per_head[h] = naive_many_to_many(head_slice(layer.query, h, dh), Mat<double>(n, dh, kf), Mat<double>(n, dh, vf),
                                     ScoreOptions{c.scaled_scores});
  }
  HiddenSeq<double> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> concat;
    for (std::size_t h = 0; h < c.n_heads; ++h) concat.insert(concat.end(), per_head[h][i].begin(), per_head[h][i].end());
    out.push_back(layer.block.finish(c, xs[i].span(), matvec<double>(layer.w_o, concat)));
  }
  return out;
}

TEST(LayerForward, MatchesPrefixOracleComposition) {
  SeededRng rng(4);
  for (bool scaled : {false, true}) {
    auto c = full_config(12, 3, 1);
    c.scaled_scores = scaled;
    const auto model = init_aaren<double>(c, rng.fork(1));
    const auto xs = random_tokens(rng, 40, 12);
    const auto fast = layer_forward(c, model.layers[0], xs);
    const auto ref = composed_oracle(c, model.layers[0], xs);
    for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_LE(relative_error(fast[i], ref[i]), 1e-12);
  }
}

TEST(LayerForward, ReducesToManyToManyUnderIdentityWeights) {
  SeededRng rng(5);
  AarenConfig c;
  c.d_model = 6;
  c.n_heads = 1;
  c.n_layers = 1;
  c.use_residual = false;
  AarenLayerParams<double> layer{rng.normal_vec<double>(6), Mat<double>::identity(6), Mat<double>::identity(6),
                                 Mat<double>::identity(6), {}};
  const auto xs = random_tokens(rng, 30, 6);
  const auto x_mat = Mat<double>::from_rows(xs);
  const auto ref = attention_many_to_many(layer.query, x_mat, x_mat);
  const auto got = layer_forward(c, layer, xs);
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_LE(relative_error(got[i], ref[i]), 1e-12);
}

TEST(LayerStep, StreamingMatchesBatch) {
  SeededRng rng(6);
  const auto c = full_config(8, 2, 1);
  const auto model = init_aaren<double>(c, rng.fork(2));
  const auto xs = random_tokens(rng, 64, 8);
  const auto batch = layer_forward(c, model.layers[0], xs);
  auto state = AarenState<double>::fresh(c);
  const std::size_t scalars = state.scalar_count();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto y = layer_step(c, model.layers[0], state.layers[0], xs[i]);
    EXPECT_LE(relative_error(y, batch[i]), 1e-12);
    EXPECT_EQ(state.scalar_count(), scalars);
  }
  EXPECT_EQ(scalars, c.n_layers * c.n_heads * (c.d_head() + 2));
}

TEST(LayerStep, FreshStateIsDeterministic) {
  SeededRng rng(7);
  const auto c = full_config(8, 2, 1);
  const auto model = init_aaren<double>(c, rng.fork(3));
  const auto x = rng.normal_vec<double>(8);
  auto s1 = AarenState<double>::fresh(c);
  auto s2 = AarenState<double>::fresh(c);
  EXPECT_EQ(layer_step(c, model.layers[0], s1.layers[0], x), layer_step(c, model.layers[0], s2.layers[0], x));
}

TEST(ModelForward, ZeroAndOneLayer) {
  SeededRng rng(8);
  auto c = full_config(8, 2, 0);
  const auto empty = init_aaren<double>(c, rng.fork(0));
  const auto xs = random_tokens(rng, 5, 8);
  EXPECT_EQ(model_forward(empty, xs), xs);
  c.n_layers = 1;
  const auto one = init_aaren<double>(c, rng.fork(1));
  EXPECT_EQ(model_forward(one, xs), layer_forward(c, one.layers[0], xs));
}

TEST(ModelStep, ThreeLayerStreamMatchesBatch) {
  SeededRng rng(9);
  const auto c = full_config(16, 4, 3);
  const auto model = init_aaren<double>(c, rng.fork(4));
  const auto xs = random_tokens(rng, 100, 16);
  const auto batch = model_forward(model, xs);
  auto state = AarenState<double>::fresh(c);
  for (std::size_t i = 0; i < xs.size(); ++i) EXPECT_LE(relative_error(model_step(model, state, xs[i]), batch[i]), 1e-10);
  EXPECT_EQ(state.tokens_seen, 100u);
}

TEST(ModelStep, FirstTokenEqualsSingleTokenForward) {
  SeededRng rng(10);
  const auto c = full_config(8, 2, 2);
  const auto model = init_aaren<double>(c, rng.fork(5));
  const auto x = rng.normal_vec<double>(8);
  auto state = AarenState<double>::fresh(c);
  EXPECT_LE(relative_error(model_step(model, state, x), model_forward(model, HiddenSeq<double>{x})[0]), 1e-15);
}

TEST(ModelStep, StateIndependentOfUnseenTokens) {
  SeededRng rng(11);
  const auto c = full_config(8, 2, 2);
  const auto model = init_aaren<double>(c, rng.fork(6));
  const auto xs = random_tokens(rng, 10, 8);
  auto ys = xs;
  ys[7] = rng.normal_vec<double>(8);
  auto a = AarenState<double>::fresh(c);
  auto b = AarenState<double>::fresh(c);
  for (std::size_t i = 0; i < 7; ++i) {
    (void)model_step(model, a, xs[i]);
    (void)model_step(model, b, ys[i]);
  }
  EXPECT_EQ(a.layers, b.layers);
}

TEST(ModelStep, MultiplyAddsPerStepAreConstant) {
  SeededRng rng(12);
  const auto c = full_config(8, 2, 2);
  const auto model = init_aaren<double>(c, rng.fork(7));
  auto state = AarenState<double>::fresh(c);
  std::uint64_t first = 0;
  for (int t = 0; t < 50; ++t) {
    OpCounter counter;
    {
      CountingScope scope(counter);
      (void)model_step(model, state, rng.normal_vec<double>(8));
    }
    if (t == 0) first = counter.madds;
    EXPECT_EQ(counter.madds, first);
  }
  EXPECT_GT(first, 0u);
}

TEST(ModelForward, Causality) {
  SeededRng rng(13);
  const auto c = full_config(8, 2, 2);
  const auto model = init_aaren<double>(c, rng.fork(8));
  const auto xs = random_tokens(rng, 12, 8);
  const auto base = model_forward(model, xs);
  for (std::size_t j = 0; j < xs.size(); j += 3) {
    auto perturbed = xs;
    perturbed[j][0] += 0.5;
    const auto out = model_forward(model, perturbed);
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (k < j) EXPECT_EQ(out[k], base[k]);
      else EXPECT_GT(relative_error(out[k], base[k]), 0.0);
    }
  }
}

// N = 1, W_o = I, no residual: y = W_v x, so dL/dW_v for L = ½‖y‖² is y xᵀ.
TEST(AarenGradient, SingleTokenValuePath) {
  SeededRng rng(14);
  AarenConfig c;
  c.d_model = 4;
  c.n_heads = 1;
  c.n_layers = 1;
  c.use_residual = false;
  auto model = init_aaren<double>(c, rng.fork(0));
  model.layers[0].w_o = Mat<double>::identity(4);
  const auto x = rng.normal_vec<double>(4);
  const auto loss = [&](auto p) {
    using S = std::remove_cvref_t<decltype(p[0])>;
    const auto m = rebind<S>(model, p);
    const auto y = model_forward(m, HiddenSeq<S>{cast_vec<S>(x)});
    S total = S(0);
    for (const auto& yi : y[0]) total += S(0.5) * yi * yi;
    return total;
  };
  const auto flat = flatten(model);
  auto taped = ad::forward_with_tape(loss, flat);
  EXPECT_EQ(taped.loss, loss(std::span<const double>(flat)));
  const auto grads = ad::backward(taped);
  const auto o = matvec(model.layers[0].w_v, x);
  const auto layout = param_layout(model);
  const auto& wv = layout[2];
  ASSERT_EQ(wv.name, "layer0.w_v");
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(grads[wv.offset + i * 4 + j], o[i] * x[j], 1e-14);
  }
}

}  // namespace
}  // namespace aaren
