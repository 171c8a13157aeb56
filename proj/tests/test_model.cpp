// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "laser/checks.hpp"
#include "laser/model.hpp"
#include "test_util.hpp"

using namespace laser;
using laser::testing::random_tensor;

namespace {

ModelConfig tiny_config(Variant v = Variant::standard) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 8;
  c.mlp_hidden = 12;
  c.heads = 2;
  c.vocab = 11;
  c.max_seq = 4;
  c.attention.variant = v;
  return c;
}

std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::uniform_int_distribution<int> u(0, int(vocab) - 1);
  std::vector<int> t(n);
  for (auto& x : t) x = u(rng);
  return t;
}

ModelParams<double> lively_params(const ModelConfig& cfg, std::uint64_t seed) {
  return perturbed_params<double>(cfg, seed);
}

double model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, double abs_floor = 0.0) {
  return model_gradient_error(cfg, seed, abs_floor);
}

}  // namespace

TEST(CausalMask, SmallCases) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_EQ(causal_mask<double>(1), Tensor<double>::from_rows({{0}}));
  EXPECT_EQ(causal_mask<double>(2), Tensor<double>::from_rows({{0, -inf}, {0, 0}}));
  auto m = causal_mask<double>(3);
  for (std::size_t i = 0; i < 3; ++i) {
    std::size_t finite = 0;
    for (std::size_t j = 0; j < 3; ++j) finite += std::isfinite(m(i, j));
    EXPECT_EQ(finite, i + 1);
  }
}

TEST(ModelConfig, Validation) {
  auto c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config();
  c.max_seq = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelParams, ShapesFollowConfig) {
  auto c = tiny_config(Variant::diff_laser);
  c.attention.per_dim_temp = false;
  auto p = ModelParams<double>::initialized(c, 1);
  EXPECT_EQ(p.at("tok_emb").shape(), (Shape{11, 8}));
  EXPECT_EQ(p.at("layer1.attn.w_q2").shape(), (Shape{8, 8}));
  EXPECT_EQ(p.at("layer0.attn.lambda")[0], 0.5);
  EXPECT_EQ(p.at("layer0.mlp.w1").shape(), (Shape{8, 12}));
  EXPECT_TRUE(p.contains("out"));
  c.tie_embeddings = true;
  EXPECT_FALSE(ModelParams<double>(c).contains("out"));
}

TEST(ModelParams, InitIsSeededAndScaled) {
  ModelConfig c;
  c.layers = 4;
  c.d_model = 128;
  c.mlp_hidden = 512;
  auto a = ModelParams<double>::initialized(c, 9);
  auto b = ModelParams<double>::initialized(c, 9);
  for (std::size_t i = 0; i < a.count(); ++i) EXPECT_EQ(a.entries()[i].second, b.entries()[i].second);
  auto stddev = [](const Tensor<double>& t) {
    double s = 0;
    for (double v : t.data()) s += v * v;
    return std::sqrt(s / double(t.size()));
  };
  EXPECT_NEAR(stddev(a.at("layer0.attn.w_q")), 0.02, 0.002);
  EXPECT_NEAR(stddev(a.at("layer0.attn.w_o")), 0.02 / std::sqrt(8.0), 0.001);
  EXPECT_NEAR(stddev(a.at("layer2.mlp.w2")), 0.02 / std::sqrt(8.0), 0.001);
}

TEST(TransformerLayer, ZeroSublayersAreIdentity) {
  auto cfg = tiny_config();
  ModelParams<double> params(cfg);
  for (auto& [name, t] : params.entries())
    if (name.ends_with("gain")) t = Tensor<double>::full(1, t.cols(), 1.0);
  std::mt19937_64 rng(3);
  auto x = random_tensor<double>(rng, 4, 8);
  for (Variant v : {Variant::standard, Variant::laser}) {
    cfg.attention.variant = v;
    Graph<double> g;
    BoundParams<double> p(g, params);
    EXPECT_EQ(transformer_layer(g.leaf(x), p, 0, cfg).value(), x);
  }
}

TEST(TransformerLayer, SingleTokenAttentionIsProjectedValue) {
  auto cfg = tiny_config();
  auto params = lively_params(cfg, 4);
  for (std::string w : {"mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"}) {
    auto& t = params.at("layer0." + w);
    t = Tensor<double>(t.shape());
  }
  std::mt19937_64 rng(5);
  auto x = random_tensor<double>(rng, 1, 8);
  for (Variant v : {Variant::standard, Variant::laser}) {
    cfg.attention.variant = v;
    Graph<double> g;
    BoundParams<double> p(g, params);
    auto out = transformer_layer(g.leaf(x), p, 0, cfg).value();
    auto h = layer_norm(g.leaf(x), p["layer0.ln1.gain"], p["layer0.ln1.bias"]);
    auto expect = add(g.leaf(x), matmul(matmul(h, p["layer0.attn.w_v"]), p["layer0.attn.w_o"])).value();
    EXPECT_LE(max_abs_diff(out, expect), 1e-14);
  }
}

TEST(TransformerLayer, RejectsWrongWidth) {
  auto cfg = tiny_config();
  ModelParams<double> params(cfg);
  Graph<double> g;
  BoundParams<double> p(g, params);
  EXPECT_THROW(transformer_layer(g.leaf(Tensor<double>::zeros(3, 6)), p, 0, cfg), DimensionError);
}

TEST(LmForward, ZeroParamsGiveUniformLoss) {
  auto cfg = tiny_config();
  ModelParams<double> params(cfg);
  std::vector<int> tokens{1, 5, 7, 2};
  auto [loss, logits] = lm_forward_loss(params, tokens);
  EXPECT_NEAR(loss, std::log(11.0), 1e-14);
  EXPECT_EQ(logits.shape(), (Shape{4, 11}));
}

TEST(LmForward, InputErrors) {
  auto cfg = tiny_config();
  auto params = ModelParams<double>::initialized(cfg, 1);
  std::vector<int> oov{1, 11, 2};
  EXPECT_THROW(lm_forward_loss(params, oov), InputError);
  std::vector<int> negative{1, -1};
  EXPECT_THROW(lm_forward_loss(params, negative), InputError);
  std::vector<int> too_long{1, 2, 3, 4, 5};
  EXPECT_THROW(lm_forward_loss(params, too_long), InputError);
  std::vector<int> single{3};
  EXPECT_THROW(lm_forward_loss(params, single), InputError);
}

TEST(LmForward, CausalityIsBitExact) {
  std::mt19937_64 rng(6);
  for (Variant v : {Variant::standard, Variant::laser, Variant::diff, Variant::diff_laser}) {
    auto cfg = tiny_config(v);
    cfg.max_seq = 8;
    auto params = lively_params(cfg, 7);
    auto tokens = random_tokens(rng, 8, cfg.vocab);
    const auto base = lm_forward_loss(params, tokens).second;
    for (std::size_t t = 1; t < 8; ++t) {
      auto pert = tokens;
      pert[t] = (pert[t] + 3) % int(cfg.vocab);
      const auto out = lm_forward_loss(params, pert).second;
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t c = 0; c < cfg.vocab; ++c)
          ASSERT_EQ(out(i, c), base(i, c)) << variant_name(v) << " position " << i << " token " << t;
    }
  }
}

TEST(LmForward, BatchedMatchesSeparate) {
  auto cfg = tiny_config(Variant::laser);
  auto params = lively_params(cfg, 8);
  std::vector<int> a{1, 2, 3, 4}, b{9, 8, 0, 6}, ab{1, 2, 3, 4, 9, 8, 0, 6};
  Graph<double> g;
  BoundParams<double> p(g, params, false);
  auto both = lm_forward(g, p, cfg, std::span<const int>(ab), 2);
  auto [la, xa] = lm_forward_loss(params, a);
  auto [lb, xb] = lm_forward_loss(params, b);
  EXPECT_NEAR(both.loss.value()[0], 0.5 * (la + lb), 1e-14);
  for (std::size_t i = 0; i < xa.size(); ++i) {
    EXPECT_EQ(both.logits.value()[i], xa[i]);
    EXPECT_EQ(both.logits.value()[xa.size() + i], xb[i]);
  }
}

TEST(LmForward, ZeroValueProjectionMakesVariantsCoincide) {
  auto cfg = tiny_config();
  auto params = lively_params(cfg, 10);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    auto& w = params.at(ModelParams<double>::layer_prefix(l) + "attn.w_v");
    w = Tensor<double>(w.shape());
  }
  std::vector<int> tokens{3, 1, 4, 1};
  const auto s = lm_forward_loss(params, tokens).second;
  auto lcfg = cfg;
  lcfg.attention.variant = Variant::laser;
  ModelParams<double> lp(lcfg);
  for (std::size_t i = 0; i < lp.count(); ++i) lp.entries()[i].second = params.entries()[i].second;
  const auto l = lm_forward_loss(lp, tokens).second;
  EXPECT_LE(max_abs_diff(s, l), 1e-12);
}

TEST(LmForward, TiedEmbeddings) {
  auto cfg = tiny_config();
  cfg.tie_embeddings = true;
  auto params = lively_params(cfg, 11);
  std::vector<int> tokens{3, 1, 4, 1};
  auto [loss, logits] = lm_forward_loss(params, tokens);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_EQ(logits.cols(), 11u);
}

class ModelGradient : public ::testing::TestWithParam<Variant> {};

TEST_P(ModelGradient, EveryParameterMatchesFiniteDifferences) {
  EXPECT_LE(model_gradcheck(tiny_config(GetParam()), 21), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Variants, ModelGradient,
                         ::testing::Values(Variant::standard, Variant::laser, Variant::diff, Variant::diff_laser),
                         [](const auto& info) { return std::string(variant_name(info.param)); });

TEST(ModelGradientModifiers, PerDimTemperatureAndQkNorm) {
  for (Variant v : {Variant::standard, Variant::laser}) {
    auto cfg = tiny_config(v);
    cfg.attention.per_dim_temp = true;
    EXPECT_LE(model_gradcheck(cfg, 22), 1e-5) << variant_name(v) << " per-dim temperature";
    cfg.attention.per_dim_temp = false;
    cfg.attention.qk_norm = true;
    // The key bias adds q.b to a whole logit row, so its true gradient is 0.
    EXPECT_LE(model_gradcheck(cfg, 23, 1e-9), 1e-5) << variant_name(v) << " qk-norm";
  }
}

TEST(ModelGradientModifiers, KeyBiasGradientVanishes) {
  auto cfg = tiny_config(Variant::laser);
  cfg.attention.qk_norm = true;
  auto params = lively_params(cfg, 24);
  std::vector<int> tokens{2, 7, 1, 8};
  Graph<double> g;
  BoundParams<double> p(g, params);
  auto grads = g.backward(lm_forward(g, p, cfg, std::span<const int>(tokens)).loss);
  EXPECT_LE(max_abs(grads.at(p["layer0.attn.k_bias"])), 1e-15);
  EXPECT_GT(max_abs(grads.at(p["layer0.attn.q_bias"])), 1e-6);
}
