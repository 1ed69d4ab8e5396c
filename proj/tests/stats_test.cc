// SPDX-License-Identifier: Apache-2.0

#include "snip/stats.hpp"

#include <cmath>
#include <numeric>

#include "gtest/gtest.h"

namespace snip {
namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab = 17;
  c.d_model = 16;
  c.n_heads = 2;
  c.d_ff = 24;
  c.n_blocks = 2;
  c.seq_len = 8;
  c.seed = 5;
  return c;
}

struct Fixture {
  ModelConfig cfg = small_config();
  Model model{cfg};
  AdamWState opt = AdamWState::zeros_like(model.params(), AdamWHyper{});
  Batch batch;

  explicit Fixture(int warm_steps = 3) {
    RngStream data(9, 9);
    batch = MarkovSource(2, cfg.vocab).sample(4, cfg.seq_len, data);
    const auto hp = high_precision_policy(cfg);
    for (int s = 0; s < warm_steps; ++s) {
      const auto f = model.forward(batch, hp, std::nullopt, RngStream());
      const GradSet g = model.backward(f.cache, hp, std::nullopt, RngStream());
      adamw_step(model.mutable_params(), opt, g.params);
    }
  }
};

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

double stddev(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

TEST(CatalogTest, DefaultCatalogLayout) {
  const OptionCatalog cat = default_catalog();
  ASSERT_EQ(cat.size(), 8u);
  EXPECT_EQ(cat[0].precision, LayerPrecision::fp8());
  EXPECT_EQ(cat[7].precision, LayerPrecision::fp4());
  EXPECT_EQ(cat[0].label, "x8w8g8");
  EXPECT_EQ(cat[5].label, "x4w8g4");
  EXPECT_EQ(all_fp4_option(cat), 7u);
  EXPECT_NO_THROW(validate_catalog(cat));
  OptionCatalog bad = cat;
  std::swap(bad[0], bad[1]);
  EXPECT_THROW(validate_catalog(bad), InvalidArgument);
}

TEST(StatsTest, FreshOptimizerSensitivityIsConstant) {
  const AdamWHyper h;
  const Tensor zero({3, 4});
  // m = v = 0 and g = 0: only (1 - b1) / eps survives in every entry.
  const double expected = (1.0 - h.beta1) / h.eps * std::sqrt(12.0);
  EXPECT_NEAR(opt_sensitivity_norm(zero, zero, zero, h), expected, 1e-9 * expected);
}

TEST(StatsTest, OptimizerSensitivityMatchesEntrywiseFormula) {
  AdamWHyper h;
  Tensor m({1, 1}, {0.02}), v({1, 1}, {4e-4}), g({1, 1}, {0.05});
  const double mm = h.beta1 * 0.02 + (1 - h.beta1) * 0.05;
  const double vv = h.beta2 * 4e-4 + (1 - h.beta2) * 0.0025;
  const double sv = std::sqrt(vv);
  const double expected = (1 - h.beta1) / (sv + h.eps) - (1 - h.beta2) * mm * 0.05 / (sv * (sv + h.eps) * (sv + h.eps));
  EXPECT_NEAR(opt_sensitivity_norm(m, v, g, h), std::abs(expected), 1e-12);
}

TEST(StatsTest, BaselineFieldsAndHighPrecisionOption) {
  Fixture f;
  OptionCatalog cat = default_catalog();
  cat.push_back({8, "hp", LayerPrecision::high_precision()});
  const RngStream rng(1, 2);
  const Baseline b = collect_baseline(f.model, f.opt, f.batch, cat, rng);
  ASSERT_EQ(b.layers.size(), f.model.num_layers());
  for (const auto& s : b.layers) {
    EXPECT_GT(s.M, 0u);
    EXPECT_GT(s.K, 0u);
    EXPECT_GT(s.N, 0u);
    ASSERT_EQ(s.option_errors.size(), cat.size());
    EXPECT_EQ(s.option_errors[8], ErrorNorms{});
    EXPECT_GT(s.option_errors[7].dx, s.option_errors[0].dx);
    EXPECT_GT(s.opt_sens_norm, 0.0);
  }
  // Independent recompute of the weight gradient norms.
  const auto hp = high_precision_policy(f.cfg);
  const auto fwd = f.model.forward(f.batch, hp, std::nullopt, RngStream(7, 7));
  const GradSet g = f.model.backward(fwd.cache, hp, std::nullopt, RngStream(7, 7));
  for (const auto& s : b.layers) EXPECT_EQ(s.gw_norm, frobenius_norm(g.wgrad(s.id)));
  EXPECT_EQ(b.loss, fwd.loss);
}

TEST(StatsTest, OptionErrorsUseLayerKeyedStreams) {
  Fixture f;
  const RngStream rng(4, 4);
  OptionCatalog cat = default_catalog();
  const Baseline a = collect_baseline(f.model, f.opt, f.batch, cat, rng);
  // Same options in a different catalog position must see the same noise.
  OptionCatalog small{cat[0], cat[7]};
  small[1].id = 1;
  const Baseline b = collect_baseline(f.model, f.opt, f.batch, small, rng);
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].option_errors[7], b.layers[i].option_errors[1]);
  }
}

TEST(StatsTest, StepsOneToThreeLeaveStateUntouched) {
  Fixture f;
  const auto params = f.model.params();
  const AdamWState opt = f.opt;
  const RngStream rng(3, 3);
  const Baseline b = collect_baseline(f.model, f.opt, f.batch, default_catalog(), rng);
  run_injection(f.model, f.batch, Pass::kBackward, injection_epsilon(b, Pass::kBackward), b, rng.derive(1));
  run_injection(f.model, f.batch, Pass::kForward, injection_epsilon(b, Pass::kForward), b, rng.derive(2));
  EXPECT_EQ(f.model.params(), params);
  EXPECT_EQ(f.opt.t, opt.t);
  EXPECT_EQ(f.opt.m, opt.m);
  EXPECT_EQ(f.opt.v, opt.v);
}

TEST(StatsTest, InjectionRejectsDifferentBatchAndBadEpsilon) {
  Fixture f;
  const RngStream rng(3, 3);
  const Baseline b = collect_baseline(f.model, f.opt, f.batch, default_catalog(), rng);
  Batch other = f.batch;
  other.tokens[0] = (other.tokens[0] + 1) % f.cfg.vocab;
  EXPECT_THROW(run_injection(f.model, other, Pass::kBackward, 1e-6, b, rng), InvalidArgument);
  EXPECT_THROW(run_injection(f.model, f.batch, Pass::kBackward, 0.0, b, rng), InvalidArgument);
  EXPECT_THROW(run_injection(f.model, f.batch, Pass::kBackward, 1.0, b, rng), InvalidArgument);
}

TEST(StatsTest, HalvingEpsilonHalvesGradientDiffs) {
  Fixture f;
  const RngStream rng(3, 3);
  const Baseline b = collect_baseline(f.model, f.opt, f.batch, default_catalog(), rng);
  for (Pass pass : {Pass::kBackward, Pass::kForward}) {
    const double eps = injection_epsilon(b, pass);
    // Same noise direction for both runs: only the scale differs.
    const auto full = run_injection(f.model, f.batch, pass, eps, b, rng);
    const auto half = run_injection(f.model, f.batch, pass, eps / 2, b, rng);
    for (std::size_t l = 0; l < full.grad_diff_norm.size(); ++l) {
      EXPECT_NEAR(full.grad_diff_norm[l] / half.grad_diff_norm[l], 2.0, 0.5) << to_string(pass) << " layer " << l;
    }
  }
}

TEST(StatsTest, NoDownstreamPathGivesZeroDiffs) {
  Fixture f(0);
  for (double& w : f.model.mutable_params()[param::lm_head(f.cfg)].data()) w = 0.0;
  const RngStream rng(3, 3);
  const Baseline b = collect_baseline(f.model, f.opt, f.batch, default_catalog(), rng);
  const auto prof = run_injection(f.model, f.batch, Pass::kForward, injection_epsilon(b, Pass::kForward), b, rng);
  for (double d : prof.grad_diff_norm) EXPECT_LE(d, 1e-12);
}

TEST(StatsTest, AveragingSamplesReducesVariance) {
  Fixture f;
  const RngStream rng(3, 3);
  const Baseline b = collect_baseline(f.model, f.opt, f.batch, default_catalog(), rng);
  const double eps = injection_epsilon(b, Pass::kBackward);
  std::vector<double> one, many;
  for (std::uint64_t t = 0; t < 12; ++t) {
    one.push_back(run_injection(f.model, f.batch, Pass::kBackward, eps, b, rng.derive(100 + t), 1).sens(0));
    many.push_back(run_injection(f.model, f.batch, Pass::kBackward, eps, b, rng.derive(200 + t), 16).sens(0));
  }
  EXPECT_LT(stddev(many), stddev(one));
}

TEST(EstimatorTest, LinearMapRecoversFrobeniusNorm) {
  RngStream rng(11, 0);
  const Tensor a = sample_gaussian({6, 5}, 1.0, rng);
  const VectorFn g = [&](const std::vector<double>& x) {
    std::vector<double> y(6, 0.0);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t k = 0; k < 5; ++k) y[i] += a(i, k) * x[k];
    return y;
  };
  const double truth = frobenius_norm(a) * frobenius_norm(a);
  RngStream noise(12, 0);
  const double est = jacobian_norm_sq_estimate(g, std::vector<double>(5, 0.3), 1e-3, 1000, noise);
  EXPECT_NEAR(est / truth, 1.0, 0.05);
}

TEST(EstimatorTest, PerturbationBoundHoldsForSmallMlp) {
  RngStream rng(21, 0);
  const std::size_t d = 10;
  const TwoLayerMlp mlp = TwoLayerMlp::random(d, 16, 4, rng);
  std::vector<double> x(d);
  for (double& v : x) v = rng.normal();
  const double jac = frobenius_norm(mlp.jacobian(x));
  const double eps = 1e-3, sd = eps / std::sqrt(static_cast<double>(d));
  const auto y0 = mlp(x);
  int held = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> xp = x;
    for (double& v : xp) v += sd * rng.normal();
    const auto y1 = mlp(xp);
    double diff = 0.0;
    for (std::size_t i = 0; i < y0.size(); ++i) diff += (y1[i] - y0[i]) * (y1[i] - y0[i]);
    if (std::sqrt(diff) <= 3.0 * jac * sd) ++held;
  }
  EXPECT_GE(held, 990);
}

TEST(EstimatorTest, MlpJacobianMatchesFiniteDifferences) {
  RngStream rng(5, 5);
  const TwoLayerMlp mlp = TwoLayerMlp::random(4, 7, 3, rng);
  std::vector<double> x{0.1, -0.4, 0.8, 0.3};
  const Tensor j = mlp.jacobian(x);
  const double h = 1e-6;
  for (std::size_t k = 0; k < 4; ++k) {
    auto up = x, dn = x;
    up[k] += h;
    dn[k] -= h;
    const auto yu = mlp(up), yd = mlp(dn);
    for (std::size_t o = 0; o < 3; ++o) EXPECT_NEAR(j(o, k), (yu[o] - yd[o]) / (2 * h), 1e-8);
  }
}

}  // namespace
}  // namespace snip
