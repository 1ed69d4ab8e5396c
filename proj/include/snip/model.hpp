// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include "snip/data.hpp"
#include "snip/error.hpp"
#include "snip/quant.hpp"
#include "snip/tensor.hpp"

namespace snip {

// ---------------------------------------------------------------------------
// Configuration and layer identity

struct ModelConfig {
  std::size_t vocab = 256;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t n_blocks = 2;
  std::size_t seq_len = 32;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab < 2 || d_model < 1 || n_heads < 1 || d_ff < 1 || n_blocks < 1 || seq_len < 1) {
      throw InvalidArgument("model config sizes must be >= 1 (vocab >= 2)");
    }
    if (d_model % n_heads != 0) throw InvalidArgument("d_model must be divisible by n_heads");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class LinearKind : std::uint8_t { kQ, kK, kV, kO, kGate, kUp, kDown };

inline constexpr std::array<LinearKind, 7> kLinearKinds{LinearKind::kQ,    LinearKind::kK,  LinearKind::kV,
                                                         LinearKind::kO,    LinearKind::kGate, LinearKind::kUp,
                                                         LinearKind::kDown};
inline constexpr std::size_t kLinearsPerBlock = kLinearKinds.size();

inline std::string_view to_string(LinearKind k) {
  constexpr std::array<std::string_view, 7> names{"Q", "K", "V", "O", "Gate", "Up", "Down"};
  return names[static_cast<std::size_t>(k)];
}

inline LinearKind linear_kind_from_string(std::string_view s) {
  for (auto k : kLinearKinds) {
    if (to_string(k) == s) return k;
  }
  throw InvalidArgument("unknown linear layer kind '" + std::string(s) + "'");
}

/// A quantizable linear layer. Layers are ordered block-major, and within a
/// block in forward order Q, K, V, O, Gate, Up, Down.
struct LayerId {
  std::size_t block = 0;
  LinearKind kind = LinearKind::kQ;

  std::size_t index() const { return block * kLinearsPerBlock + static_cast<std::size_t>(kind); }
  static LayerId from_index(std::size_t i) { return {i / kLinearsPerBlock, kLinearKinds[i % kLinearsPerBlock]}; }
  std::string str() const { return "block" + std::to_string(block) + "." + std::string(to_string(kind)); }

  friend bool operator==(const LayerId&, const LayerId&) = default;
};

inline std::vector<LayerId> all_layers(const ModelConfig& cfg) {
  std::vector<LayerId> ids;
  ids.reserve(cfg.n_blocks * kLinearsPerBlock);
  for (std::size_t i = 0; i < cfg.n_blocks * kLinearsPerBlock; ++i) ids.push_back(LayerId::from_index(i));
  return ids;
}

/// Weight shape {N, K} (out, in) of a linear layer.
inline std::pair<std::size_t, std::size_t> layer_out_in(LinearKind kind, const ModelConfig& cfg) {
  switch (kind) {
    case LinearKind::kGate:
    case LinearKind::kUp: return {cfg.d_ff, cfg.d_model};
    case LinearKind::kDown: return {cfg.d_model, cfg.d_ff};
    default: return {cfg.d_model, cfg.d_model};
  }
}

/// Training FLOPs of one linear layer for `tokens` tokens per step: forward,
/// input-gradient and weight-gradient GEMMs, 2*M*N*K each.
inline double layer_flops(const LayerId& id, const ModelConfig& cfg, std::size_t tokens) {
  const auto [n, k] = layer_out_in(id.kind, cfg);
  return 3.0 * 2.0 * static_cast<double>(tokens) * static_cast<double>(n) * static_cast<double>(k);
}

inline double total_linear_flops(const ModelConfig& cfg, std::size_t tokens) {
  double total = 0.0;
  for (const auto& id : all_layers(cfg)) total += layer_flops(id, cfg, tokens);
  return total;
}

// ---------------------------------------------------------------------------
// Precision policy

enum class TensorRole { kActivation, kWeight, kGradient };

/// Standard recipe: 1x128 tiles for activations and gradients, 128x128 blocks
/// for weights; FP4 gradients use stochastic rounding.
inline QuantSpec recipe_spec(const FloatFormat& format, TensorRole role) {
  QuantSpec s;
  s.format = format;
  s.granularity = role == TensorRole::kWeight ? Granularity::blockwise(128) : Granularity::tilewise(128);
  s.rounding = (role == TensorRole::kGradient && format.total_bits() <= 4) ? Rounding::kStochastic
                                                                           : Rounding::kNearestEven;
  return s;
}

/// Quantization of the three GEMM inputs of one linear layer. An empty spec
/// means the tensor passes through at working precision.
struct LayerPrecision {
  std::optional<QuantSpec> x;
  std::optional<QuantSpec> w;
  std::optional<QuantSpec> g;

  static LayerPrecision high_precision() { return {}; }
  static LayerPrecision uniform(const FloatFormat& f) {
    return {recipe_spec(f, TensorRole::kActivation), recipe_spec(f, TensorRole::kWeight),
            recipe_spec(f, TensorRole::kGradient)};
  }
  static LayerPrecision fp8() { return uniform(FloatFormat::e4m3()); }
  static LayerPrecision fp4() { return uniform(FloatFormat::e2m1()); }

  bool is_high_precision() const { return !x && !w && !g; }

  friend bool operator==(const LayerPrecision&, const LayerPrecision&) = default;
};

inline bool is_fp4(const std::optional<QuantSpec>& s) { return s && s->format.total_bits() <= 4; }

/// Share of this layer's training FLOPs that run as FP4 GEMMs. A GEMM counts
/// as FP4 only when both of its operands are FP4: forward (x, w), input
/// gradient (g, w), weight gradient (g, x).
inline double fp4_gemm_fraction(const LayerPrecision& p) {
  int n = 0;
  if (is_fp4(p.x) && is_fp4(p.w)) ++n;
  if (is_fp4(p.g) && is_fp4(p.w)) ++n;
  if (is_fp4(p.g) && is_fp4(p.x)) ++n;
  return n / 3.0;
}

/// Total map LayerId -> LayerPrecision, stored densely by LayerId::index().
struct PrecisionPolicy {
  std::string label;
  std::vector<LayerPrecision> layers;

  static PrecisionPolicy uniform(const ModelConfig& cfg, const LayerPrecision& p, std::string label) {
    return {std::move(label), std::vector<LayerPrecision>(cfg.n_blocks * kLinearsPerBlock, p)};
  }

  const LayerPrecision& at(const LayerId& id) const {
    if (id.index() >= layers.size()) throw InvalidArgument("policy has no entry for " + id.str());
    return layers[id.index()];
  }
  LayerPrecision& at(const LayerId& id) {
    if (id.index() >= layers.size()) throw InvalidArgument("policy has no entry for " + id.str());
    return layers[id.index()];
  }

  void require_covers(const ModelConfig& cfg) const {
    if (layers.size() != cfg.n_blocks * kLinearsPerBlock) {
      throw InvalidArgument("policy '" + label + "' covers " + std::to_string(layers.size()) + " layers, model has " +
                            std::to_string(cfg.n_blocks * kLinearsPerBlock));
    }
  }

  friend bool operator==(const PrecisionPolicy&, const PrecisionPolicy&) = default;
};

/// FP4 share of all linear-layer FLOPs under `policy`.
inline double policy_fp4_fraction(const PrecisionPolicy& policy, const ModelConfig& cfg, std::size_t tokens) {
  policy.require_covers(cfg);
  const double total = total_linear_flops(cfg, tokens);
  double fp4 = 0.0;
  for (const auto& id : all_layers(cfg)) fp4 += fp4_gemm_fraction(policy.at(id)) * layer_flops(id, cfg, tokens) / total;
  return fp4;
}

// ---------------------------------------------------------------------------
// Noise injection

enum class Pass { kForward, kBackward };

inline std::string_view to_string(Pass p) { return p == Pass::kForward ? "forward" : "backward"; }

/// Gaussian noise N(0, epsilon^2/d) added to the last transformer block's
/// output activation (forward) or to the gradient arriving at it (backward).
struct InjectionSite {
  Pass pass = Pass::kBackward;
  double epsilon = 0.0;
};

/// Largest allowed epsilon relative to the target tensor norm.
inline constexpr double kMaxInjectionRatio = 1e-2;

// ---------------------------------------------------------------------------
// Parameters, caches, gradients

namespace param {
inline constexpr std::size_t kTokEmb = 0;
inline constexpr std::size_t kPosEmb = 1;
inline constexpr std::size_t kFirstBlock = 2;
inline constexpr std::size_t kPerBlock = 9;  // attn_norm, q, k, v, o, mlp_norm, gate, up, down
inline constexpr std::size_t kAttnNorm = 0;
inline constexpr std::size_t kMlpNorm = 5;

inline std::size_t block_base(std::size_t b) { return kFirstBlock + b * kPerBlock; }
inline std::size_t final_norm(const ModelConfig& c) { return block_base(c.n_blocks); }
inline std::size_t lm_head(const ModelConfig& c) { return block_base(c.n_blocks) + 1; }
inline std::size_t count(const ModelConfig& c) { return block_base(c.n_blocks) + 2; }

inline std::size_t of_layer(const LayerId& id) {
  static constexpr std::array<std::size_t, 7> offset{1, 2, 3, 4, 6, 7, 8};
  return block_base(id.block) + offset[static_cast<std::size_t>(id.kind)];
}
}  // namespace param

/// Per-block forward intermediates kept for the backward pass.
struct BlockCache {
  Tensor h_in, a, r_attn, q, k, v, probs, att, h1, b2, r_mlp, gate, up, s;
};

struct ForwardCache {
  std::uint64_t model_version = 0;
  ModelConfig config;
  Batch batch;
  std::vector<BlockCache> blocks;
  Tensor h_last;  // last block output after any forward injection
  Tensor r_final, f, probs;
  double weight_sum = 0.0;
  /// Per linear layer (LayerId::index()): unquantized GEMM input X and output Y.
  std::vector<Tensor> layer_x, layer_y;
  /// Forward-injected noise, empty when none.
  Tensor injected;
};

struct ForwardResult {
  double loss = 0.0;
  ForwardCache cache;
};

/// Gradients of every parameter plus, per linear layer, the input gradient
/// dL/dX and the output gradient dL/dY.
struct GradSet {
  std::vector<Tensor> params;
  std::vector<Tensor> layer_dx, layer_dy;
  /// Backward-injected noise, empty when none.
  Tensor injected;

  const Tensor& wgrad(const LayerId& id) const { return params.at(param::of_layer(id)); }
};

/// Forward/backward pass counters; copying snapshots the counts.
class PassCounter {
 public:
  PassCounter() = default;
  PassCounter(const PassCounter& o) : forward_(o.forward()), backward_(o.backward()) {}
  PassCounter& operator=(const PassCounter& o) {
    forward_ = o.forward();
    backward_ = o.backward();
    return *this;
  }
  std::uint64_t forward() const { return forward_.load(std::memory_order_relaxed); }
  std::uint64_t backward() const { return backward_.load(std::memory_order_relaxed); }
  void count_forward() const { forward_.fetch_add(1, std::memory_order_relaxed); }
  void count_backward() const { backward_.fetch_add(1, std::memory_order_relaxed); }

 private:
  mutable std::atomic<std::uint64_t> forward_{0};
  mutable std::atomic<std::uint64_t> backward_{0};
};

// ---------------------------------------------------------------------------
// AdamW

struct AdamWHyper {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lambda = 0.0;
  double eps = 1e-8;

  friend bool operator==(const AdamWHyper&, const AdamWHyper&) = default;
};

struct AdamWState {
  AdamWHyper hyper;
  std::uint64_t t = 0;
  std::vector<Tensor> m, v;

  static AdamWState zeros_like(const std::vector<Tensor>& params, AdamWHyper hyper) {
    AdamWState s{hyper, 0, {}, {}};
    for (const auto& p : params) {
      s.m.emplace_back(p.shape());
      s.v.emplace_back(p.shape());
    }
    return s;
  }
};

/// One AdamW update of a single tensor at step `t` (already incremented):
/// decoupled decay first, then moments, bias correction and the step.
inline void adamw_update(Tensor& w, Tensor& m, Tensor& v, const Tensor& g, const AdamWHyper& h, std::uint64_t t) {
  require_same_shape(w, g, "adamw_update");
  require_same_shape(w, m, "adamw_update");
  require_same_shape(w, v, "adamw_update");
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] -= h.alpha * h.lambda * w[i];
    m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
    v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    w[i] -= h.alpha * m_hat / (std::sqrt(v_hat) + h.eps);
  }
}

inline void adamw_step(std::vector<Tensor>& params, AdamWState& state, const std::vector<Tensor>& grads) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) require_same_shape(params[i], grads[i], "adamw_step");
  ++state.t;
  for (std::size_t i = 0; i < params.size(); ++i) {
    adamw_update(params[i], state.m[i], state.v[i], grads[i], state.hyper, state.t);
  }
}

// ---------------------------------------------------------------------------
// Model

namespace detail {

inline constexpr double kRmsEps = 1e-6;

// RNG labels: quantizer streams are keyed by (layer, tensor role) so that
// changing one layer's precision never shifts another layer's draws.
inline std::uint64_t quant_label(std::size_t layer, TensorRole role) {
  return 0x100 + layer * 4 + static_cast<std::uint64_t>(role);
}
inline constexpr std::uint64_t kNoiseLabel = 0x51;

inline Tensor maybe_quantize(const Tensor& t, const std::optional<QuantSpec>& spec, const RngStream& rng) {
  if (!spec) return t;
  return fake_quantize(t, *spec, rng).tensor;
}

/// y = x * r * g per row, r = 1/sqrt(mean(x^2) + eps). Returns (y, r).
inline std::pair<Tensor, Tensor> rmsnorm_forward(const Tensor& x, const Tensor& gain) {
  const std::size_t rows = x.rows(), d = x.cols();
  Tensor y(x.shape()), r({rows});
  for (std::size_t i = 0; i < rows; ++i) {
    const auto xi = x.row(i);
    const double ri = 1.0 / std::sqrt(sum_squares(xi) / static_cast<double>(d) + kRmsEps);
    r[i] = ri;
    for (std::size_t j = 0; j < d; ++j) y(i, j) = xi[j] * ri * gain[j];
  }
  return {std::move(y), std::move(r)};
}

/// Accumulates dgain and returns dx.
inline Tensor rmsnorm_backward(const Tensor& x, const Tensor& r, const Tensor& gain, const Tensor& dy, Tensor& dgain) {
  const std::size_t rows = x.rows(), d = x.cols();
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const double ri = r[i];
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dgain[j] += dy(i, j) * x(i, j) * ri;
      dot += dy(i, j) * gain[j] * x(i, j);
    }
    const double c = ri * ri * ri * dot / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx(i, j) = ri * gain[j] * dy(i, j) - x(i, j) * c;
  }
  return dx;
}

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

/// A small Llama-style decoder: token + learned position embeddings, pre-norm
/// blocks of causal multi-head attention and a SwiGLU MLP, final RMSNorm and an
/// untied output projection. Only the seven linear layers per block take
/// quantization; norms, softmax, attention and SwiGLU run at full precision.
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    init();
  }

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_layers() const { return cfg_.n_blocks * kLinearsPerBlock; }

  const std::vector<Tensor>& params() const { return params_; }
  /// Mutable access invalidates outstanding caches.
  std::vector<Tensor>& mutable_params() {
    ++version_;
    return params_;
  }
  const std::vector<std::string>& param_names() const { return names_; }
  const Tensor& weight(const LayerId& id) const { return params_.at(param::of_layer(id)); }

  std::uint64_t version() const { return version_; }
  const PassCounter& passes() const { return passes_; }

  void apply_adamw(AdamWState& state, const GradSet& grads) {
    adamw_step(params_, state, grads.params);
    ++version_;
  }

  ForwardResult forward(const Batch& batch, const PrecisionPolicy& policy, const std::optional<InjectionSite>& inj,
                        const RngStream& rng) const;

  GradSet backward(const ForwardCache& cache, const PrecisionPolicy& policy, const std::optional<InjectionSite>& inj,
                   const RngStream& rng) const;

 private:
  void init();
  void check_batch(const Batch& batch) const;
  Tensor attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t B, std::size_t T,
                           Tensor& probs) const;
  void attention_backward(const BlockCache& c, const Tensor& datt, std::size_t B, std::size_t T, Tensor& dq,
                          Tensor& dk, Tensor& dv) const;

  ModelConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::uint64_t version_ = 0;
  PassCounter passes_;
};

inline void Model::init() {
  RngStream rng(cfg_.seed, 0x1417);
  const std::size_t d = cfg_.d_model;
  auto add = [this](std::string name, Tensor t) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(t));
  };
  add("tok_emb", sample_gaussian({cfg_.vocab, d}, 1.0, rng));
  add("pos_emb", sample_gaussian({cfg_.seq_len, d}, 0.5, rng));
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg_.n_blocks));
  for (std::size_t b = 0; b < cfg_.n_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    add(p + "attn_norm", Tensor({d}, 1.0));
    for (auto kind : {LinearKind::kQ, LinearKind::kK, LinearKind::kV, LinearKind::kO}) {
      const auto [n, k] = layer_out_in(kind, cfg_);
      const double sd = (kind == LinearKind::kO ? resid_scale : 1.0) / std::sqrt(static_cast<double>(k));
      add(p + std::string(to_string(kind)), sample_gaussian({n, k}, sd, rng));
    }
    add(p + "mlp_norm", Tensor({d}, 1.0));
    for (auto kind : {LinearKind::kGate, LinearKind::kUp, LinearKind::kDown}) {
      const auto [n, k] = layer_out_in(kind, cfg_);
      const double sd = (kind == LinearKind::kDown ? resid_scale : 1.0) / std::sqrt(static_cast<double>(k));
      add(p + std::string(to_string(kind)), sample_gaussian({n, k}, sd, rng));
    }
  }
  add("final_norm", Tensor({d}, 1.0));
  add("lm_head", sample_gaussian({cfg_.vocab, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
}

inline void Model::check_batch(const Batch& batch) const {
  if (batch.batch_size == 0 || batch.seq_len == 0) throw InvalidArgument("empty batch");
  if (batch.seq_len > cfg_.seq_len) throw InvalidArgument("batch sequence longer than model context");
  if (batch.tokens.size() != batch.batch_size * batch.row_len()) throw InvalidArgument("batch token count mismatch");
  if (!batch.target_weight.empty() && batch.target_weight.size() != batch.num_targets()) {
    throw InvalidArgument("batch target weight count mismatch");
  }
  for (auto t : batch.tokens) {
    if (t >= cfg_.vocab) throw InvalidArgument("token id " + std::to_string(t) + " out of vocabulary range");
  }
}

inline Tensor Model::attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t B,
                                       std::size_t T, Tensor& probs) const {
  const std::size_t d = cfg_.d_model, H = cfg_.n_heads, dh = d / H;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({B * T, d});
  probs = Tensor({B * H * T, T});
  std::vector<double> s(T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t t = 0; t < T; ++t) {
        double mx = -INFINITY;
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += q(b * T + t, c0 + c) * k(b * T + u, c0 + c);
          s[u] = acc * inv;
          mx = std::max(mx, s[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          s[u] = std::exp(s[u] - mx);
          z += s[u];
        }
        auto prow = probs.row((b * H + h) * T + t);
        for (std::size_t u = 0; u <= t; ++u) prow[u] = s[u] / z;
        for (std::size_t c = 0; c < dh; ++c) {
          double acc = 0.0;
          for (std::size_t u = 0; u <= t; ++u) acc += prow[u] * v(b * T + u, c0 + c);
          out(b * T + t, c0 + c) = acc;
        }
      }
    }
  }
  return out;
}

inline void Model::attention_backward(const BlockCache& c, const Tensor& datt, std::size_t B, std::size_t T,
                                      Tensor& dq, Tensor& dk, Tensor& dv) const {
  const std::size_t d = cfg_.d_model, H = cfg_.n_heads, dh = d / H;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  dq = Tensor({B * T, d});
  dk = Tensor({B * T, d});
  dv = Tensor({B * T, d});
  std::vector<double> dp(T);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t c0 = h * dh;
      for (std::size_t t = 0; t < T; ++t) {
        const auto prow = c.probs.row((b * H + h) * T + t);
        const std::size_t rt = b * T + t;
        double dot = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const std::size_t ru = b * T + u;
          double acc = 0.0;
          for (std::size_t cc = 0; cc < dh; ++cc) {
            acc += datt(rt, c0 + cc) * c.v(ru, c0 + cc);
            dv(ru, c0 + cc) += prow[u] * datt(rt, c0 + cc);
          }
          dp[u] = acc;
          dot += prow[u] * acc;
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const std::size_t ru = b * T + u;
          const double ds = prow[u] * (dp[u] - dot) * inv;
          for (std::size_t cc = 0; cc < dh; ++cc) {
            dq(rt, c0 + cc) += ds * c.k(ru, c0 + cc);
            dk(ru, c0 + cc) += ds * c.q(rt, c0 + cc);
          }
        }
      }
    }
  }
}

inline ForwardResult Model::forward(const Batch& batch, const PrecisionPolicy& policy,
                                    const std::optional<InjectionSite>& inj, const RngStream& rng) const {
  check_batch(batch);
  policy.require_covers(cfg_);
  passes_.count_forward();
  const std::size_t B = batch.batch_size, T = batch.seq_len, M = B * T, d = cfg_.d_model;

  ForwardResult res;
  ForwardCache& c = res.cache;
  c.model_version = version_;
  c.config = cfg_;
  c.batch = batch;
  c.layer_x.resize(num_layers());
  c.layer_y.resize(num_layers());

  auto linear = [&](const LayerId& id, const Tensor& x) {
    const LayerPrecision& prec = policy.at(id);
    const std::size_t li = id.index();
    const Tensor xq = detail::maybe_quantize(x, prec.x, rng.derive(detail::quant_label(li, TensorRole::kActivation)));
    const Tensor wq = detail::maybe_quantize(weight(id), prec.w, rng.derive(detail::quant_label(li, TensorRole::kWeight)));
    Tensor y = matmul_nt(xq, wq);
    c.layer_x[li] = x;
    c.layer_y[li] = y;
    return y;
  };

  Tensor h({M, d});
  const Tensor& tok = params_[param::kTokEmb];
  const Tensor& pos = params_[param::kPosEmb];
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::uint32_t id = batch.input(b, t);
      for (std::size_t j = 0; j < d; ++j) h(b * T + t, j) = tok(id, j) + pos(t, j);
    }
  }

  c.blocks.resize(cfg_.n_blocks);
  for (std::size_t blk = 0; blk < cfg_.n_blocks; ++blk) {
    BlockCache& bc = c.blocks[blk];
    const std::size_t base = param::block_base(blk);
    bc.h_in = h;
    std::tie(bc.a, bc.r_attn) = detail::rmsnorm_forward(h, params_[base + param::kAttnNorm]);
    bc.q = linear({blk, LinearKind::kQ}, bc.a);
    bc.k = linear({blk, LinearKind::kK}, bc.a);
    bc.v = linear({blk, LinearKind::kV}, bc.a);
    bc.att = attention_forward(bc.q, bc.k, bc.v, B, T, bc.probs);
    bc.h1 = add(h, linear({blk, LinearKind::kO}, bc.att));
    std::tie(bc.b2, bc.r_mlp) = detail::rmsnorm_forward(bc.h1, params_[base + param::kMlpNorm]);
    bc.gate = linear({blk, LinearKind::kGate}, bc.b2);
    bc.up = linear({blk, LinearKind::kUp}, bc.b2);
    bc.s = Tensor(bc.gate.shape());
    for (std::size_t i = 0; i < bc.s.size(); ++i) {
      const double z = bc.gate[i];
      bc.s[i] = z * detail::sigmoid(z) * bc.up[i];
    }
    h = add(bc.h1, linear({blk, LinearKind::kDown}, bc.s));
  }

  if (inj && inj->pass == Pass::kForward) {
    const double target = frobenius_norm(h);
    if (!(inj->epsilon > 0.0) || inj->epsilon > kMaxInjectionRatio * target) {
      throw InvalidArgument("forward injection epsilon must be in (0, 1e-2 * ||activation||_F]");
    }
    RngStream noise_rng = rng.derive(detail::kNoiseLabel);
    c.injected = sample_gaussian(h.shape(), inj->epsilon / std::sqrt(static_cast<double>(h.size())), noise_rng);
    add_inplace(h, c.injected);
  }
  c.h_last = h;

  std::tie(c.f, c.r_final) = detail::rmsnorm_forward(h, params_[param::final_norm(cfg_)]);
  Tensor logits = matmul_nt(c.f, params_[param::lm_head(cfg_)]);
  const std::size_t V = cfg_.vocab;
  c.probs = Tensor({M, V});
  double loss = 0.0, wsum = 0.0;
  for (std::size_t i = 0; i < M; ++i) {
    const auto lr = logits.row(i);
    const double mx = *std::max_element(lr.begin(), lr.end());
    double z = 0.0;
    for (std::size_t j = 0; j < V; ++j) z += std::exp(lr[j] - mx);
    auto pr = c.probs.row(i);
    for (std::size_t j = 0; j < V; ++j) pr[j] = std::exp(lr[j] - mx) / z;
    const double w = batch.weight(i);
    if (w != 0.0) {
      const std::uint32_t tgt = batch.target(i / T, i % T);
      loss += w * (std::log(z) + mx - lr[tgt]);
      wsum += w;
    }
  }
  c.weight_sum = wsum;
  res.loss = wsum > 0.0 ? loss / wsum : 0.0;
  return res;
}

inline GradSet Model::backward(const ForwardCache& c, const PrecisionPolicy& policy,
                               const std::optional<InjectionSite>& inj, const RngStream& rng) const {
  if (c.model_version != version_ || !(c.config == cfg_) || c.blocks.size() != cfg_.n_blocks) {
    throw StateError("backward: forward cache is stale (weights changed since it was recorded)");
  }
  policy.require_covers(cfg_);
  passes_.count_backward();
  const Batch& batch = c.batch;
  const std::size_t B = batch.batch_size, T = batch.seq_len, M = B * T, d = cfg_.d_model, V = cfg_.vocab;

  GradSet gs;
  for (const auto& p : params_) gs.params.emplace_back(p.shape());
  gs.layer_dx.resize(num_layers());
  gs.layer_dy.resize(num_layers());

  // Y = Xq Wq^T  =>  dX = Gq Wq,  dW = Gq^T Xq.
  auto linear_back = [&](const LayerId& id, const Tensor& dy) {
    const LayerPrecision& prec = policy.at(id);
    const std::size_t li = id.index();
    const Tensor& x = c.layer_x[li];
    const Tensor xq = detail::maybe_quantize(x, prec.x, rng.derive(detail::quant_label(li, TensorRole::kActivation)));
    const Tensor wq = detail::maybe_quantize(weight(id), prec.w, rng.derive(detail::quant_label(li, TensorRole::kWeight)));
    const Tensor gq = detail::maybe_quantize(dy, prec.g, rng.derive(detail::quant_label(li, TensorRole::kGradient)));
    Tensor dx = matmul(gq, wq);
    gs.params[param::of_layer(id)] = matmul_tn(gq, xq);
    gs.layer_dy[li] = dy;
    gs.layer_dx[li] = dx;
    return dx;
  };

  Tensor dlogits({M, V});
  if (c.weight_sum > 0.0) {
    for (std::size_t i = 0; i < M; ++i) {
      const double w = batch.weight(i) / c.weight_sum;
      if (w == 0.0) continue;
      const auto pr = c.probs.row(i);
      auto dr = dlogits.row(i);
      for (std::size_t j = 0; j < V; ++j) dr[j] = w * pr[j];
      dr[batch.target(i / T, i % T)] -= w;
    }
  }
  const std::size_t head = param::lm_head(cfg_), fnorm = param::final_norm(cfg_);
  gs.params[head] = matmul_tn(dlogits, c.f);
  Tensor df = matmul(dlogits, params_[head]);
  Tensor dh = detail::rmsnorm_backward(c.h_last, c.r_final, params_[fnorm], df, gs.params[fnorm]);

  if (inj && inj->pass == Pass::kBackward) {
    const double target = frobenius_norm(dh);
    if (!(inj->epsilon > 0.0) || inj->epsilon > kMaxInjectionRatio * target) {
      throw InvalidArgument("backward injection epsilon must be in (0, 1e-2 * ||gradient||_F]");
    }
    RngStream noise_rng = rng.derive(detail::kNoiseLabel);
    gs.injected = sample_gaussian(dh.shape(), inj->epsilon / std::sqrt(static_cast<double>(dh.size())), noise_rng);
    add_inplace(dh, gs.injected);
  }

  for (std::size_t blk = cfg_.n_blocks; blk-- > 0;) {
    const BlockCache& bc = c.blocks[blk];
    const std::size_t base = param::block_base(blk);

    // h_out = h1 + Down(s)
    const Tensor ds = linear_back({blk, LinearKind::kDown}, dh);
    Tensor dgate(bc.gate.shape()), dup(bc.up.shape());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const double z = bc.gate[i], sg = detail::sigmoid(z);
      dup[i] = ds[i] * z * sg;
      dgate[i] = ds[i] * bc.up[i] * sg * (1.0 + z * (1.0 - sg));
    }
    Tensor db2 = linear_back({blk, LinearKind::kGate}, dgate);
    add_inplace(db2, linear_back({blk, LinearKind::kUp}, dup));
    Tensor dh1 = add(dh, detail::rmsnorm_backward(bc.h1, bc.r_mlp, params_[base + param::kMlpNorm], db2,
                                                  gs.params[base + param::kMlpNorm]));

    // h1 = h_in + O(att)
    const Tensor datt = linear_back({blk, LinearKind::kO}, dh1);
    Tensor dq, dk, dv;
    attention_backward(bc, datt, B, T, dq, dk, dv);
    Tensor da = linear_back({blk, LinearKind::kQ}, dq);
    add_inplace(da, linear_back({blk, LinearKind::kK}, dk));
    add_inplace(da, linear_back({blk, LinearKind::kV}, dv));
    dh = add(dh1, detail::rmsnorm_backward(bc.h_in, bc.r_attn, params_[base + param::kAttnNorm], da,
                                           gs.params[base + param::kAttnNorm]));
  }

  Tensor& dtok = gs.params[param::kTokEmb];
  Tensor& dpos = gs.params[param::kPosEmb];
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t t = 0; t < T; ++t) {
      const std::uint32_t id = batch.input(b, t);
      for (std::size_t j = 0; j < d; ++j) {
        dtok(id, j) += dh(b * T + t, j);
        dpos(t, j) += dh(b * T + t, j);
      }
    }
  }
  return gs;
}

}  // namespace snip
