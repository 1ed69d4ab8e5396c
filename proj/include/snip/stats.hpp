// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "snip/data.hpp"
#include "snip/error.hpp"
#include "snip/model.hpp"
#include "snip/quant.hpp"
#include "snip/tensor.hpp"

namespace snip {

// ---------------------------------------------------------------------------
// Quantization options

/// One candidate precision setting for a linear layer.
struct QuantOption {
  std::size_t id = 0;
  std::string label;
  LayerPrecision precision;

  double fp4_flops_fraction_of_layer() const { return fp4_gemm_fraction(precision); }

  friend bool operator==(const QuantOption&, const QuantOption&) = default;
};

using OptionCatalog = std::vector<QuantOption>;

/// All eight FP8/FP4 combinations of (x, w, g). Option 0 is all-FP8 and
/// option 7 all-FP4; bit 2 selects FP4 inputs, bit 1 weights, bit 0 gradients.
inline OptionCatalog default_catalog() {
  const FloatFormat fp8 = FloatFormat::e4m3(), fp4 = FloatFormat::e2m1();
  OptionCatalog cat;
  for (std::size_t j = 0; j < 8; ++j) {
    const bool x4 = j & 4, w4 = j & 2, g4 = j & 1;
    LayerPrecision p{recipe_spec(x4 ? fp4 : fp8, TensorRole::kActivation),
                     recipe_spec(w4 ? fp4 : fp8, TensorRole::kWeight),
                     recipe_spec(g4 ? fp4 : fp8, TensorRole::kGradient)};
    std::string label = std::string("x") + (x4 ? "4" : "8") + "w" + (w4 ? "4" : "8") + "g" + (g4 ? "4" : "8");
    cat.push_back({j, std::move(label), std::move(p)});
  }
  return cat;
}

/// Checks ids are 0..n-1, option 0 is all-FP8 and some option is all-FP4.
inline void validate_catalog(const OptionCatalog& cat) {
  if (cat.empty()) throw InvalidArgument("option catalog is empty");
  bool has_fp4 = false;
  for (std::size_t j = 0; j < cat.size(); ++j) {
    if (cat[j].id != j) throw InvalidArgument("option catalog ids must be 0..n-1 in order");
    if (cat[j].fp4_flops_fraction_of_layer() == 1.0) has_fp4 = true;
  }
  if (!(cat[0].precision == LayerPrecision::fp8())) throw InvalidArgument("option 0 must be all-FP8");
  if (!has_fp4) throw InvalidArgument("option catalog has no all-FP4 option");
}

inline std::size_t all_fp4_option(const OptionCatalog& cat) {
  for (const auto& o : cat) {
    if (o.fp4_flops_fraction_of_layer() == 1.0) return o.id;
  }
  throw InvalidArgument("option catalog has no all-FP4 option");
}

// ---------------------------------------------------------------------------
// Statistics

struct ErrorNorms {
  double dx = 0.0, dw = 0.0, dg = 0.0;
  friend bool operator==(const ErrorNorms&, const ErrorNorms&) = default;
};

struct LayerStats {
  LayerId id;
  std::size_t M = 0, K = 0, N = 0;
  double x_norm = 0.0, w_norm = 0.0, y_norm = 0.0;
  double gy_norm = 0.0, gx_norm = 0.0, gw_norm = 0.0;
  /// Indexed by option id.
  std::vector<ErrorNorms> option_errors;
  double opt_sens_norm = 0.0;

  friend bool operator==(const LayerStats&, const LayerStats&) = default;
};

struct PerturbationProfile {
  Pass pass = Pass::kBackward;
  double epsilon = 0.0;
  std::size_t n_samples = 1;
  std::string batch_digest;
  /// Per layer: ||grad_W(injected) - grad_W(baseline)||_F, averaged over samples.
  std::vector<double> grad_diff_norm;

  double sens(std::size_t layer) const { return grad_diff_norm.at(layer) / epsilon; }

  friend bool operator==(const PerturbationProfile&, const PerturbationProfile&) = default;
};

/// Norm of (1-b1)/(sqrt(v)+eps) - (1-b2) m g / (sqrt(v) (sqrt(v)+eps)^2), the
/// derivative of m/(sqrt(v)+eps) with respect to g, with m and v the moments
/// after folding in g. The second term is taken as 0 where v = 0.
inline double opt_sensitivity_norm(const Tensor& m_prev, const Tensor& v_prev, const Tensor& g, const AdamWHyper& h) {
  require_same_shape(m_prev, g, "opt_sensitivity_norm");
  require_same_shape(v_prev, g, "opt_sensitivity_norm");
  double acc = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double m = h.beta1 * m_prev[i] + (1.0 - h.beta1) * g[i];
    const double v = h.beta2 * v_prev[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double sv = std::sqrt(v);
    double term = (1.0 - h.beta1) / (sv + h.eps);
    if (sv > 0.0) term -= (1.0 - h.beta2) * m * g[i] / (sv * (sv + h.eps) * (sv + h.eps));
    acc += term * term;
  }
  return std::sqrt(acc);
}

/// Result of Step 1: per-layer statistics plus the baseline gradients and the
/// norms of the two injection targets.
struct Baseline {
  double loss = 0.0;
  std::string batch_digest;
  std::vector<LayerStats> layers;
  GradSet grads;
  double forward_target_norm = 0.0;   // ||last block output||_F
  double backward_target_norm = 0.0;  // ||dL/d(last block output)||_F
};

inline PrecisionPolicy high_precision_policy(const ModelConfig& cfg) {
  return PrecisionPolicy::uniform(cfg, LayerPrecision::high_precision(), "high-precision");
}

/// Step 1: one full-precision forward and backward pass, no weight update.
/// Records norms, dimensions, per-option quantization error norms and the
/// optimizer sensitivity norm from the current AdamW state.
inline Baseline collect_baseline(const Model& model, const AdamWState& opt, const Batch& batch,
                                 const OptionCatalog& catalog, const RngStream& rng) {
  validate_catalog(catalog);
  const ModelConfig& cfg = model.config();
  if (opt.m.size() != model.params().size() || opt.v.size() != model.params().size()) {
    throw InvalidArgument("optimizer state does not match the model parameters");
  }
  const auto hp = high_precision_policy(cfg);
  const auto fwd = model.forward(batch, hp, std::nullopt, rng);
  Baseline out;
  out.loss = fwd.loss;
  out.batch_digest = batch_digest(batch);
  out.grads = model.backward(fwd.cache, hp, std::nullopt, rng);
  out.forward_target_norm = frobenius_norm(fwd.cache.h_last);
  const LayerId last{cfg.n_blocks - 1, LinearKind::kDown};
  out.backward_target_norm = frobenius_norm(out.grads.layer_dy[last.index()]);

  for (const auto& id : all_layers(cfg)) {
    const std::size_t li = id.index();
    const Tensor& x = fwd.cache.layer_x[li];
    const Tensor& w = model.weight(id);
    const Tensor& gy = out.grads.layer_dy[li];
    LayerStats s;
    s.id = id;
    s.M = x.rows();
    s.K = x.cols();
    s.N = w.rows();
    s.x_norm = frobenius_norm(x);
    s.w_norm = frobenius_norm(w);
    s.y_norm = frobenius_norm(fwd.cache.layer_y[li]);
    s.gy_norm = frobenius_norm(gy);
    s.gx_norm = frobenius_norm(out.grads.layer_dx[li]);
    s.gw_norm = frobenius_norm(out.grads.wgrad(id));
    auto err = [&](const Tensor& t, const std::optional<QuantSpec>& spec, TensorRole role) {
      if (!spec) return 0.0;
      return fake_quantize(t, *spec, rng.derive(detail::quant_label(li, role))).abs_err_norm;
    };
    for (const auto& o : catalog) {
      s.option_errors.push_back({err(x, o.precision.x, TensorRole::kActivation),
                                 err(w, o.precision.w, TensorRole::kWeight),
                                 err(gy, o.precision.g, TensorRole::kGradient)});
    }
    const std::size_t p = param::of_layer(id);
    s.opt_sens_norm = opt_sensitivity_norm(opt.m[p], opt.v[p], out.grads.params[p], opt.hyper);
    out.layers.push_back(std::move(s));
  }
  return out;
}

/// Steps 2 and 3: forward and backward pass with Gaussian noise at the last
/// block, no weight update. Sample k draws its noise from rng.derive(k).
inline PerturbationProfile run_injection(const Model& model, const Batch& batch, Pass pass, double epsilon,
                                         const Baseline& baseline, const RngStream& rng, std::size_t n_samples = 1) {
  if (n_samples < 1) throw InvalidArgument("run_injection needs n_samples >= 1");
  const std::string digest = batch_digest(batch);
  if (digest != baseline.batch_digest) throw InvalidArgument("injection batch differs from the baseline batch");
  const auto hp = high_precision_policy(model.config());
  const InjectionSite site{pass, epsilon};
  PerturbationProfile prof{pass, epsilon, n_samples, digest, std::vector<double>(model.num_layers(), 0.0)};
  for (std::size_t k = 0; k < n_samples; ++k) {
    const RngStream r = rng.derive(k);
    const auto fwd = model.forward(batch, hp, pass == Pass::kForward ? std::optional(site) : std::nullopt, r);
    const GradSet g = model.backward(fwd.cache, hp, pass == Pass::kBackward ? std::optional(site) : std::nullopt, r);
    for (const auto& id : all_layers(model.config())) {
      prof.grad_diff_norm[id.index()] += diff_norm(g.wgrad(id), baseline.grads.wgrad(id));
    }
  }
  for (double& d : prof.grad_diff_norm) d /= static_cast<double>(n_samples);
  return prof;
}

/// Default epsilon for an injection pass: `ratio` times the target norm.
inline double injection_epsilon(const Baseline& b, Pass pass, double ratio = 1e-4) {
  const double target = pass == Pass::kForward ? b.forward_target_norm : b.backward_target_norm;
  if (!(target > 0.0)) throw InvalidArgument("injection target has zero norm");
  return ratio * target;
}

// ---------------------------------------------------------------------------
// Estimator checks on explicit functions

using VectorFn = std::function<std::vector<double>(const std::vector<double>&)>;

/// Monte-Carlo estimate of ||J_g(x)||_F^2 as eps^-2 E||g(x) - g(x + delta)||^2,
/// delta ~ N(0, eps^2 I).
inline double jacobian_norm_sq_estimate(const VectorFn& g, const std::vector<double>& x, double eps,
                                        std::size_t samples, RngStream& rng) {
  if (!(eps > 0.0) || samples == 0) throw InvalidArgument("need eps > 0 and samples >= 1");
  const auto g0 = g(x);
  double acc = 0.0;
  std::vector<double> xp(x.size());
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t i = 0; i < x.size(); ++i) xp[i] = x[i] + eps * rng.normal();
    const auto g1 = g(xp);
    double d = 0.0;
    for (std::size_t i = 0; i < g0.size(); ++i) d += (g1[i] - g0[i]) * (g1[i] - g0[i]);
    acc += d;
  }
  return acc / (eps * eps * static_cast<double>(samples));
}

/// y = W2 tanh(W1 x + b1), with its Jacobian.
struct TwoLayerMlp {
  Tensor w1, b1, w2;

  static TwoLayerMlp random(std::size_t d_in, std::size_t hidden, std::size_t d_out, RngStream& rng) {
    return {sample_gaussian({hidden, d_in}, 1.0 / std::sqrt(static_cast<double>(d_in)), rng),
            sample_gaussian({hidden}, 0.1, rng),
            sample_gaussian({d_out, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng)};
  }

  std::vector<double> operator()(const std::vector<double>& x) const {
    std::vector<double> h(w1.rows()), y(w2.rows(), 0.0);
    for (std::size_t i = 0; i < w1.rows(); ++i) {
      double a = b1[i];
      for (std::size_t k = 0; k < w1.cols(); ++k) a += w1(i, k) * x[k];
      h[i] = std::tanh(a);
    }
    for (std::size_t o = 0; o < w2.rows(); ++o)
      for (std::size_t i = 0; i < h.size(); ++i) y[o] += w2(o, i) * h[i];
    return y;
  }

  Tensor jacobian(const std::vector<double>& x) const {
    Tensor d1({w1.rows(), w1.cols()});
    for (std::size_t i = 0; i < w1.rows(); ++i) {
      double a = b1[i];
      for (std::size_t k = 0; k < w1.cols(); ++k) a += w1(i, k) * x[k];
      const double t = std::tanh(a);
      for (std::size_t k = 0; k < w1.cols(); ++k) d1(i, k) = (1.0 - t * t) * w1(i, k);
    }
    return matmul(w2, d1);
  }
};

}  // namespace snip
