// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "snip/error.hpp"
#include "snip/model.hpp"
#include "snip/stats.hpp"

namespace snip {

/// Everything planning needs, detached from the live model.
struct StatsBundle {
  std::uint64_t step = 0;
  std::string batch_digest;
  double baseline_loss = 0.0;
  ModelConfig config;
  std::size_t tokens = 0;
  AdamWHyper adamw;
  /// Step index of the update the statistics describe (optimizer t + 1).
  std::uint64_t adamw_t = 1;
  OptionCatalog catalog;
  std::vector<LayerStats> layers;
  std::vector<PerturbationProfile> profiles;

  const PerturbationProfile* profile(Pass p) const {
    for (const auto& pr : profiles) {
      if (pr.pass == p) return &pr;
    }
    return nullptr;
  }

  friend bool operator==(const StatsBundle&, const StatsBundle&) = default;
};

inline constexpr double kNormFloor = 1e-30;

/// Loss divergence of quantizing layer `s` with `err`, normalized by |loss|:
/// sqrt((|gX| |dX| / sqrt(MK))^2 + (|gW| |dW| / sqrt(NK))^2) / |L|.
inline double loss_divergence(const LayerStats& s, const ErrorNorms& err, double baseline_loss) {
  if (baseline_loss == 0.0) throw InvalidArgument("loss_divergence: baseline loss is zero");
  const double tx = s.gx_norm * err.dx / std::sqrt(static_cast<double>(s.M * s.K));
  const double tw = s.gw_norm * err.dw / std::sqrt(static_cast<double>(s.N * s.K));
  return std::hypot(tx, tw) / std::abs(baseline_loss);
}

inline double loss_divergence(const LayerStats& s, std::size_t option, double baseline_loss) {
  return loss_divergence(s, s.option_errors.at(option), baseline_loss);
}

/// Weight change per unit of gradient error for one layer at step t.
inline double optimizer_sensitivity(const LayerStats& s, const AdamWHyper& h, std::uint64_t t) {
  if (t == 0) throw InvalidArgument("optimizer_sensitivity: t must be >= 1");
  const double td = static_cast<double>(t);
  const double bias = std::sqrt(1.0 - std::pow(h.beta2, td)) / (1.0 - std::pow(h.beta1, td));
  return h.alpha * bias * s.opt_sens_norm / std::sqrt(static_cast<double>(s.N * s.K));
}

/// Per-entry RMS quantization error of the three GEMM inputs.
inline double error_rms_sum(const LayerStats& s, const ErrorNorms& err) {
  const double M = static_cast<double>(s.M), K = static_cast<double>(s.K), N = static_cast<double>(s.N);
  return err.dx / std::sqrt(M * K) + err.dw / std::sqrt(N * K) + err.dg / std::sqrt(M * N);
}

/// How a gradient error entering at layer i reaches the weight gradient of an
/// earlier layer l, read off the backward injection profile.
enum class GainRule {
  /// sens(l) / epsilon: gradient change at l per unit of injected noise.
  kPerUnit,
  /// sens(l) / sens(i): attenuation relative to the quantized layer itself.
  kRatio,
};

inline std::string_view to_string(GainRule g) { return g == GainRule::kPerUnit ? "per_unit" : "ratio"; }

inline GainRule gain_rule_from_string(std::string_view s) {
  if (s == "per_unit") return GainRule::kPerUnit;
  if (s == "ratio") return GainRule::kRatio;
  throw InvalidArgument("unknown gain rule '" + std::string(s) + "'");
}

struct DivergenceOptions {
  double w_loss = 1.0;
  double w_weight = 1.0;
  GainRule gain = GainRule::kPerUnit;
  /// Average the forward-injection gain into S(l, i) as well.
  bool use_forward_profile = false;
};

/// Propagation gain S(l, i) from layer i to an earlier layer l; S(i, i) = 1.
inline double propagation_gain(const StatsBundle& b, std::size_t l, std::size_t i, const DivergenceOptions& opt) {
  if (l == i) return 1.0;
  auto gain = [&](const PerturbationProfile& p) {
    const double denom = opt.gain == GainRule::kRatio ? p.sens(i) : p.epsilon;
    return p.sens(l) / std::max(denom, kNormFloor);
  };
  const PerturbationProfile* bwd = b.profile(Pass::kBackward);
  if (!bwd) throw InvalidArgument("weight divergence needs a backward injection profile");
  if (!opt.use_forward_profile) return gain(*bwd);
  const PerturbationProfile* fwd = b.profile(Pass::kForward);
  if (!fwd) throw InvalidArgument("use_forward_profile set but no forward injection profile");
  return 0.5 * (gain(*bwd) + gain(*fwd));
}

/// Weight divergence of quantizing layer i with `err`: the error reaches the
/// weight gradients of i and every earlier layer; averaged over all N layers.
inline double weight_divergence(const StatsBundle& b, std::size_t i, const ErrorNorms& err,
                                const std::vector<double>& c, const DivergenceOptions& opt = {}) {
  if (!b.profile(Pass::kBackward) || !b.profile(Pass::kForward)) {
    throw InvalidArgument("weight divergence needs forward and backward injection profiles");
  }
  const double delta = error_rms_sum(b.layers.at(i), err);
  if (delta == 0.0) return 0.0;
  double sum = 0.0;
  for (std::size_t l = 0; l <= i; ++l) {
    sum += propagation_gain(b, l, i, opt) * delta * c.at(l) / std::max(b.layers[l].w_norm, kNormFloor);
  }
  return sum / static_cast<double>(b.layers.size());
}

struct DivergenceCell {
  double dL_raw = 0.0, dW_raw = 0.0;
  /// Relative to the all-FP8 option, floored at 0.
  double dL = 0.0, dW = 0.0;
  double q = 0.0, e = 0.0;

  friend bool operator==(const DivergenceCell&, const DivergenceCell&) = default;
};

struct DivergenceReport {
  std::string batch_digest;
  std::uint64_t step = 0;
  ModelConfig config;
  DivergenceOptions options;
  OptionCatalog catalog;
  std::vector<LayerId> layers;
  /// cells[i][j] for layer i, option j.
  std::vector<std::vector<DivergenceCell>> cells;

  std::size_t num_layers() const { return cells.size(); }
  std::size_t num_options() const { return catalog.size(); }
};

/// Step 4: q and e for every (layer, option).
inline DivergenceReport build_report(const StatsBundle& b, const DivergenceOptions& opt = {}) {
  validate_catalog(b.catalog);
  if (b.layers.size() != b.config.n_blocks * kLinearsPerBlock) throw InvalidArgument("bundle layer count mismatch");
  for (const auto& p : b.profiles) {
    if (p.batch_digest != b.batch_digest) {
      throw StateError("profile batch digest " + p.batch_digest + " does not match bundle digest " + b.batch_digest);
    }
    if (p.grad_diff_norm.size() != b.layers.size()) throw InvalidArgument("profile layer count mismatch");
  }
  for (const auto& s : b.layers) {
    if (s.option_errors.size() != b.catalog.size()) throw InvalidArgument("layer stats miss catalog options");
  }
  DivergenceReport r;
  r.batch_digest = b.batch_digest;
  r.step = b.step;
  r.config = b.config;
  r.options = opt;
  r.catalog = b.catalog;
  std::vector<double> c;
  for (const auto& s : b.layers) {
    r.layers.push_back(s.id);
    c.push_back(optimizer_sensitivity(s, b.adamw, b.adamw_t));
  }
  const double total = total_linear_flops(b.config, b.tokens);
  for (std::size_t i = 0; i < b.layers.size(); ++i) {
    const LayerStats& s = b.layers[i];
    std::vector<DivergenceCell> row;
    for (const auto& o : b.catalog) {
      DivergenceCell cell;
      cell.dL_raw = loss_divergence(s, o.id, b.baseline_loss);
      cell.dW_raw = weight_divergence(b, i, s.option_errors[o.id], c, opt);
      cell.e = o.fp4_flops_fraction_of_layer() * layer_flops(s.id, b.config, b.tokens) / total;
      row.push_back(cell);
    }
    for (auto& cell : row) {
      cell.dL = std::max(0.0, cell.dL_raw - row[0].dL_raw);
      cell.dW = std::max(0.0, cell.dW_raw - row[0].dW_raw);
      cell.q = opt.w_loss * cell.dL + opt.w_weight * cell.dW;
    }
    r.cells.push_back(std::move(row));
  }
  return r;
}

/// Layer x option heatmap of q.
inline void write_heatmap_csv(std::ostream& os, const DivergenceReport& r) {
  os << "block,kind";
  for (const auto& o : r.catalog) os << ',' << o.label;
  os << '\n';
  os.precision(17);
  for (std::size_t i = 0; i < r.num_layers(); ++i) {
    os << r.layers[i].block << ',' << to_string(r.layers[i].kind);
    for (const auto& cell : r.cells[i]) os << ',' << cell.q;
    os << '\n';
  }
}

}  // namespace snip
