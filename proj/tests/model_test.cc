// SPDX-License-Identifier: Apache-2.0

#include "snip/model.hpp"

#include <cmath>

#include "gtest/gtest.h"
#include "test_util.hpp"

namespace snip {
namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab = 11;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 12;
  c.n_blocks = 1;
  c.seq_len = 5;
  c.seed = 3;
  return c;
}

PrecisionPolicy hp(const ModelConfig& c) { return PrecisionPolicy::uniform(c, LayerPrecision::high_precision(), "hp"); }

TEST(ModelTest, ConfigValidation) {
  ModelConfig c = tiny_config();
  c.n_heads = 3;
  EXPECT_THROW(Model{c}, InvalidArgument);
  c = tiny_config();
  c.d_ff = 0;
  EXPECT_THROW(Model{c}, InvalidArgument);
}

TEST(ModelTest, LayerIdsEnumerateSevenPerBlock) {
  ModelConfig c = tiny_config();
  c.n_blocks = 3;
  const auto ids = all_layers(c);
  ASSERT_EQ(ids.size(), 21u);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    EXPECT_EQ(ids[i].index(), i);
    EXPECT_EQ(LayerId::from_index(i), ids[i]);
  }
  EXPECT_EQ(ids[13].block, 1u);
  EXPECT_EQ(ids[13].kind, LinearKind::kDown);
  EXPECT_EQ(linear_kind_from_string("Gate"), LinearKind::kGate);
  EXPECT_THROW(linear_kind_from_string("Foo"), InvalidArgument);
}

TEST(ModelTest, GradientsMatchCentralDifferences) {
  const ModelConfig c = tiny_config();
  Model model(c);
  RngStream data_rng(5, 5);
  const Batch batch = MarkovSource(1, c.vocab).sample(2, c.seq_len, data_rng);
  const auto policy = hp(c);
  const RngStream rng(1, 1);
  const auto fwd = model.forward(batch, policy, std::nullopt, rng);
  const GradSet grads = model.backward(fwd.cache, policy, std::nullopt, rng);
  const double worst = testing_util::max_fd_relative_error(model, batch, grads, 1e-5);
  EXPECT_LE(worst, 1e-4);
}

TEST(ModelTest, TwoBlockGradientsMatchCentralDifferences) {
  ModelConfig c = tiny_config();
  c.n_blocks = 2;
  c.d_model = 16;
  c.d_ff = 24;
  Model model(c);
  RngStream data_rng(6, 6);
  const Batch batch = MarkovSource(3, c.vocab).sample(2, c.seq_len, data_rng);
  const RngStream rng(1, 1);
  const auto fwd = model.forward(batch, hp(c), std::nullopt, rng);
  const GradSet grads = model.backward(fwd.cache, hp(c), std::nullopt, rng);
  // Entries below 1e-5 are compared on absolute error: at h = 1e-5 the
  // difference quotient itself carries ~1e-10 of roundoff.
  EXPECT_LE(testing_util::max_fd_relative_error(model, batch, grads, 1e-5, 1e-5), 1e-5);
}

TEST(ModelTest, ForwardAndBackwardAreDeterministic) {
  const ModelConfig c = tiny_config();
  const Model model(c);
  RngStream data_rng(2, 2);
  const Batch batch = MarkovSource(1, c.vocab).sample(3, c.seq_len, data_rng);
  const auto policy = PrecisionPolicy::uniform(c, LayerPrecision::fp4(), "fp4");
  const auto a = model.forward(batch, policy, std::nullopt, RngStream(4, 4));
  const auto b = model.forward(batch, policy, std::nullopt, RngStream(4, 4));
  EXPECT_EQ(a.loss, b.loss);
  const GradSet ga = model.backward(a.cache, policy, std::nullopt, RngStream(4, 4));
  const GradSet gb = model.backward(b.cache, policy, std::nullopt, RngStream(4, 4));
  EXPECT_EQ(ga.params, gb.params);
}

TEST(ModelTest, RejectsOutOfRangeTokens) {
  const ModelConfig c = tiny_config();
  const Model model(c);
  Batch batch{1, 2, {1, 2, static_cast<std::uint32_t>(c.vocab)}, {}};
  EXPECT_THROW(model.forward(batch, hp(c), std::nullopt, RngStream()), InvalidArgument);
}

TEST(ModelTest, StaleCacheRejected) {
  const ModelConfig c = tiny_config();
  Model model(c);
  RngStream data_rng(2, 2);
  const Batch batch = MarkovSource(1, c.vocab).sample(2, c.seq_len, data_rng);
  const auto fwd = model.forward(batch, hp(c), std::nullopt, RngStream());
  AdamWState opt = AdamWState::zeros_like(model.params(), {});
  model.apply_adamw(opt, model.backward(fwd.cache, hp(c), std::nullopt, RngStream()));
  EXPECT_THROW(model.backward(fwd.cache, hp(c), std::nullopt, RngStream()), StateError);
}

TEST(ModelTest, FullyMaskedBatchHasZeroLossAndGradients) {
  const ModelConfig c = tiny_config();
  const Model model(c);
  RngStream data_rng(2, 2);
  Batch batch = MarkovSource(1, c.vocab).sample(2, c.seq_len, data_rng);
  batch.target_weight.assign(batch.num_targets(), 0.0);
  const auto fwd = model.forward(batch, hp(c), std::nullopt, RngStream());
  EXPECT_EQ(fwd.loss, 0.0);
  const GradSet g = model.backward(fwd.cache, hp(c), std::nullopt, RngStream());
  for (const auto& t : g.params) EXPECT_EQ(frobenius_norm(t), 0.0);
}

TEST(ModelTest, PolicyLocality) {
  ModelConfig c = tiny_config();
  c.n_blocks = 2;
  const Model model(c);
  RngStream data_rng(2, 2);
  const Batch batch = MarkovSource(1, c.vocab).sample(2, c.seq_len, data_rng);
  const auto base = PrecisionPolicy::uniform(c, LayerPrecision::fp8(), "fp8");
  const auto ref = model.forward(batch, base, std::nullopt, RngStream(1, 2));
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    auto changed = base;
    changed.layers[i] = LayerPrecision::fp4();
    const auto out = model.forward(batch, changed, std::nullopt, RngStream(1, 2));
    for (std::size_t j = 0; j < i; ++j) {
      EXPECT_EQ(out.cache.layer_x[j], ref.cache.layer_x[j]) << "layer " << j << " changed by " << i;
      EXPECT_EQ(out.cache.layer_y[j], ref.cache.layer_y[j]);
    }
  }
}

TEST(ModelTest, InjectionEpsilonBounds) {
  const ModelConfig c = tiny_config();
  const Model model(c);
  RngStream data_rng(2, 2);
  const Batch batch = MarkovSource(1, c.vocab).sample(2, c.seq_len, data_rng);
  EXPECT_THROW(model.forward(batch, hp(c), InjectionSite{Pass::kForward, 0.0}, RngStream()), InvalidArgument);
  EXPECT_THROW(model.forward(batch, hp(c), InjectionSite{Pass::kForward, 1e6}, RngStream()), InvalidArgument);
  const auto fwd = model.forward(batch, hp(c), std::nullopt, RngStream());
  EXPECT_THROW(model.backward(fwd.cache, hp(c), InjectionSite{Pass::kBackward, -1.0}, RngStream()), InvalidArgument);
}

TEST(ModelTest, ForwardInjectionLossChangeIsLinearInEpsilon) {
  const ModelConfig c = tiny_config();
  const Model model(c);
  RngStream data_rng(2, 2);
  const Batch batch = MarkovSource(1, c.vocab).sample(2, c.seq_len, data_rng);
  const auto base = model.forward(batch, hp(c), std::nullopt, RngStream(3, 3));
  const double target = frobenius_norm(base.cache.h_last);
  auto delta = [&](double ratio) {
    const auto inj = model.forward(batch, hp(c), InjectionSite{Pass::kForward, ratio * target}, RngStream(3, 3));
    return std::abs(inj.loss - base.loss);
  };
  const double ratio = delta(1e-4) / delta(1e-5);
  EXPECT_NEAR(ratio, 10.0, 2.0);
}

TEST(ModelTest, InjectedNoiseHasRequestedNorm) {
  ModelConfig c = tiny_config();
  c.d_model = 32;
  c.seq_len = 16;
  const Model model(c);
  RngStream data_rng(2, 2);
  const Batch batch = MarkovSource(1, c.vocab).sample(8, c.seq_len, data_rng);
  const auto base = model.forward(batch, hp(c), std::nullopt, RngStream(3, 3));
  const double eps = 1e-4 * frobenius_norm(base.cache.h_last);
  const auto inj = model.forward(batch, hp(c), InjectionSite{Pass::kForward, eps}, RngStream(3, 3));
  EXPECT_NEAR(frobenius_norm(inj.cache.injected) / eps, 1.0, 0.05);
}

TEST(ModelTest, AdamWHandEvaluatedStep) {
  AdamWHyper h{0.1, 0.9, 0.999, 0.0, 1e-8};
  Tensor w({1}, 1.0), m({1}), v({1});
  adamw_update(w, m, v, Tensor({1}, 1.0), h, 1);
  EXPECT_NEAR(m[0], 0.1, 1e-15);
  EXPECT_NEAR(v[0], 0.001, 1e-15);
  EXPECT_NEAR(w[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(ModelTest, AdamWZeroGradient) {
  AdamWHyper h{0.1, 0.9, 0.999, 0.0, 1e-8};
  Tensor w = Tensor::matrix({{0.3, -2.0}}), m = Tensor::matrix({{0.5, -0.5}}), v = Tensor::matrix({{0.2, 0.4}});
  const Tensor w0 = w;
  // lambda = 0, m = v = 0: nothing moves.
  Tensor mz({1, 2}), vz({1, 2});
  adamw_update(w, mz, vz, Tensor({1, 2}), h, 3);
  EXPECT_EQ(w, w0);
  EXPECT_EQ(frobenius_norm(mz), 0.0);
  // With state, the moments decay toward zero.
  Tensor w2 = w0;
  adamw_update(w2, m, v, Tensor({1, 2}), h, 3);
  EXPECT_NEAR(m[0], 0.45, 1e-15);
  EXPECT_NEAR(v[1], 0.4 * 0.999, 1e-15);

  AdamWHyper decay{0.1, 0.9, 0.999, 0.1, 1e-8};
  Tensor w3 = w0, m3({1, 2}), v3({1, 2});
  adamw_update(w3, m3, v3, Tensor({1, 2}), decay, 1);
  EXPECT_NEAR(w3[0], 0.3 * 0.99, 1e-15);
  EXPECT_NEAR(w3[1], -2.0 * 0.99, 1e-15);
}

TEST(ModelTest, AdamWShapeMismatch) {
  std::vector<Tensor> params{Tensor({2, 2})};
  AdamWState s = AdamWState::zeros_like(params, {});
  EXPECT_THROW(adamw_step(params, s, {Tensor({3})}), ShapeError);
}

TEST(ModelTest, LayerFlops) {
  ModelConfig c;
  c.d_model = 64;
  c.d_ff = 256;
  EXPECT_EQ(layer_flops({0, LinearKind::kQ}, c, 128), 3145728.0);
  EXPECT_EQ(layer_flops({0, LinearKind::kUp}, c, 128), 4 * 3145728.0);
  for (std::size_t r : {1, 2, 4}) {
    c.d_ff = r * c.d_model;
    c.n_blocks = 3;
    const double d = static_cast<double>(c.d_model), T = 100;
    const double closed = 3.0 * 2.0 * T * d * d * (4.0 + 3.0 * r) * c.n_blocks;
    EXPECT_DOUBLE_EQ(total_linear_flops(c, 100), closed);
  }
}

TEST(ModelTest, PolicyFp4FractionBookkeeping) {
  ModelConfig c = tiny_config();
  c.n_blocks = 2;
  auto p = PrecisionPolicy::uniform(c, LayerPrecision::fp8(), "mix");
  EXPECT_EQ(policy_fp4_fraction(p, c, 10), 0.0);
  p.layers[3] = LayerPrecision::fp4();
  p.layers[5].x = recipe_spec(FloatFormat::e2m1(), TensorRole::kActivation);
  p.layers[5].w = recipe_spec(FloatFormat::e2m1(), TensorRole::kWeight);
  const double total = total_linear_flops(c, 10);
  const double expect = (layer_flops(LayerId::from_index(3), c, 10) + layer_flops(LayerId::from_index(5), c, 10) / 3) / total;
  EXPECT_NEAR(policy_fp4_fraction(p, c, 10), expect, 1e-15);
  EXPECT_NEAR(policy_fp4_fraction(PrecisionPolicy::uniform(c, LayerPrecision::fp4(), "fp4"), c, 10), 1.0, 1e-15);
  EXPECT_EQ(fp4_gemm_fraction(LayerPrecision::high_precision()), 0.0);
}

TEST(ModelTest, Fp8CloseToHighPrecisionOnTrainedModel) {
  ModelConfig c;
  c.vocab = 64;
  c.d_model = 32;
  c.n_heads = 4;
  c.d_ff = 64;
  c.n_blocks = 2;
  c.seq_len = 16;
  Model model(c);
  const MarkovSource src(7, c.vocab);
  RngStream data_rng(7, 1);
  AdamWState opt = AdamWState::zeros_like(model.params(), {3e-3, 0.9, 0.999, 0.0, 1e-8});
  for (int step = 0; step < 100; ++step) {
    const Batch b = src.sample(8, c.seq_len, data_rng);
    const auto fwd = model.forward(b, hp(c), std::nullopt, RngStream(1, step));
    model.apply_adamw(opt, model.backward(fwd.cache, hp(c), std::nullopt, RngStream(1, step)));
  }
  const Batch eval = src.sample(16, c.seq_len, data_rng);
  const double l_hp = model.forward(eval, hp(c), std::nullopt, RngStream()).loss;
  const double l_fp8 =
      model.forward(eval, PrecisionPolicy::uniform(c, LayerPrecision::fp8(), "fp8"), std::nullopt, RngStream()).loss;
  EXPECT_LT(std::abs(l_fp8 - l_hp) / l_hp, 0.01);
}

}  // namespace
}  // namespace snip
