// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"
#include "snip/divergence.hpp"
#include "snip/error.hpp"
#include "snip/model.hpp"
#include "snip/policy.hpp"
#include "snip/stats.hpp"

namespace snip {

using Json = nlohmann::ordered_json;

inline constexpr const char* kPolicySchema = "snip.policy/1";
inline constexpr const char* kBundleSchema = "snip.stats/1";
inline constexpr const char* kReportSchema = "snip.report/1";
inline constexpr const char* kIlpSchema = "snip.ilp/1";
inline constexpr const char* kCheckpointSchema = "snip.checkpoint/1";

namespace io_detail {

/// Shortest-exact is not guaranteed by printf, %.17g is.
inline std::string exact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_exact(const Json& j) {
  if (j.is_number()) return j.get<double>();
  const std::string s = j.get<std::string>();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0') throw FormatError("not a number: '" + s + "'");
  return v;
}

inline void require_schema(const Json& j, const char* schema) {
  if (!j.is_object() || !j.contains("schema") || j["schema"] != schema) {
    throw FormatError(std::string("expected schema ") + schema);
  }
}

template <typename F>
auto guarded(const char* what, F&& f) {
  try {
    return f();
  } catch (const Json::exception& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string(what) + ": " + e.what());
  }
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Quantization specs and policies

inline std::string_view to_string(GranularityKind k) {
  switch (k) {
    case GranularityKind::kTensorwise: return "tensorwise";
    case GranularityKind::kRowwise: return "rowwise";
    case GranularityKind::kColumnwise: return "columnwise";
    case GranularityKind::kTilewise: return "tilewise";
    case GranularityKind::kBlockwise: return "blockwise";
  }
  return "?";
}

inline GranularityKind granularity_kind_from_string(const std::string& s) {
  for (auto k : {GranularityKind::kTensorwise, GranularityKind::kRowwise, GranularityKind::kColumnwise,
                 GranularityKind::kTilewise, GranularityKind::kBlockwise}) {
    if (to_string(k) == s) return k;
  }
  throw FormatError("unknown granularity '" + s + "'");
}

inline Json to_json(const QuantSpec& s) {
  return {{"format", s.format.name()},
          {"granularity", {{"kind", to_string(s.granularity.kind)}, {"nb", s.granularity.nb}}},
          {"rounding", s.rounding == Rounding::kStochastic ? "stochastic" : "nearest_even"}};
}

inline QuantSpec quant_spec_from_json(const Json& j) {
  return io_detail::guarded("QuantSpec", [&] {
    QuantSpec s;
    s.format = FloatFormat::from_name(j.at("format").get<std::string>());
    s.granularity = {granularity_kind_from_string(j.at("granularity").at("kind").get<std::string>()),
                     j.at("granularity").at("nb").get<std::size_t>()};
    const std::string r = j.at("rounding").get<std::string>();
    if (r == "stochastic") s.rounding = Rounding::kStochastic;
    else if (r == "nearest_even") s.rounding = Rounding::kNearestEven;
    else throw FormatError("unknown rounding '" + r + "'");
    return s;
  });
}

inline Json to_json(const std::optional<QuantSpec>& s) { return s ? to_json(*s) : Json(nullptr); }

inline std::optional<QuantSpec> optional_spec_from_json(const Json& j) {
  if (j.is_null()) return std::nullopt;
  return quant_spec_from_json(j);
}

inline Json to_json(const LayerPrecision& p) { return {{"x", to_json(p.x)}, {"w", to_json(p.w)}, {"g", to_json(p.g)}}; }

inline LayerPrecision layer_precision_from_json(const Json& j) {
  return io_detail::guarded("LayerPrecision", [&] {
    return LayerPrecision{optional_spec_from_json(j.at("x")), optional_spec_from_json(j.at("w")),
                          optional_spec_from_json(j.at("g"))};
  });
}

inline Json to_json(const PrecisionPolicy& p) {
  Json layers = Json::array();
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const LayerId id = LayerId::from_index(i);
    Json l = {{"block", id.block}, {"kind", to_string(id.kind)}};
    l.update(to_json(p.layers[i]));
    layers.push_back(std::move(l));
  }
  return {{"schema", kPolicySchema}, {"label", p.label}, {"layers", std::move(layers)}};
}

inline PrecisionPolicy policy_from_json(const Json& j) {
  io_detail::require_schema(j, kPolicySchema);
  return io_detail::guarded("PrecisionPolicy", [&] {
    PrecisionPolicy p;
    p.label = j.at("label").get<std::string>();
    const Json& layers = j.at("layers");
    p.layers.resize(layers.size());
    std::vector<bool> seen(layers.size(), false);
    for (const auto& l : layers) {
      const LayerId id{l.at("block").get<std::size_t>(), linear_kind_from_string(l.at("kind").get<std::string>())};
      if (id.index() >= p.layers.size() || seen[id.index()]) throw FormatError("policy layers are not a total map");
      seen[id.index()] = true;
      p.layers[id.index()] = layer_precision_from_json(l);
    }
    return p;
  });
}

// ---------------------------------------------------------------------------
// Config pieces

inline Json to_json(const ModelConfig& c) {
  return {{"vocab", c.vocab},     {"d_model", c.d_model},   {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"n_blocks", c.n_blocks}, {"seq_len", c.seq_len}, {"seed", c.seed}};
}

/// Missing keys keep their defaults.
inline ModelConfig model_config_from_json(const Json& j, ModelConfig c = {}) {
  return io_detail::guarded("ModelConfig", [&] {
    c.vocab = j.value("vocab", c.vocab);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.n_blocks = j.value("n_blocks", c.n_blocks);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.seed = j.value("seed", c.seed);
    return c;
  });
}

inline Json to_json(const AdamWHyper& h) {
  using io_detail::exact;
  return {{"alpha", exact(h.alpha)},
          {"beta1", exact(h.beta1)},
          {"beta2", exact(h.beta2)},
          {"lambda", exact(h.lambda)},
          {"eps", exact(h.eps)}};
}

inline AdamWHyper adamw_from_json(const Json& j, AdamWHyper h = {}) {
  return io_detail::guarded("AdamW", [&] {
    auto get = [&](const char* k, double& v) {
      if (j.contains(k)) v = io_detail::parse_exact(j[k]);
    };
    get("alpha", h.alpha);
    get("beta1", h.beta1);
    get("beta2", h.beta2);
    get("lambda", h.lambda);
    get("eps", h.eps);
    return h;
  });
}

inline Json to_json(const OptionCatalog& cat) {
  Json a = Json::array();
  for (const auto& o : cat) {
    Json j = {{"id", o.id}, {"label", o.label}};
    j.update(to_json(o.precision));
    a.push_back(std::move(j));
  }
  return a;
}

inline OptionCatalog catalog_from_json(const Json& j) {
  return io_detail::guarded("catalog", [&] {
    OptionCatalog cat;
    for (const auto& o : j) {
      cat.push_back({o.at("id").get<std::size_t>(), o.at("label").get<std::string>(), layer_precision_from_json(o)});
    }
    validate_catalog(cat);
    return cat;
  });
}

// ---------------------------------------------------------------------------
// Stats bundle

inline Json to_json(const StatsBundle& b) {
  using io_detail::exact;
  Json layers = Json::array();
  for (const auto& s : b.layers) {
    Json errs = Json::array();
    for (const auto& e : s.option_errors) errs.push_back({{"dx", exact(e.dx)}, {"dw", exact(e.dw)}, {"dg", exact(e.dg)}});
    layers.push_back({{"block", s.id.block},
                      {"kind", to_string(s.id.kind)},
                      {"M", s.M},
                      {"K", s.K},
                      {"N", s.N},
                      {"x_norm", exact(s.x_norm)},
                      {"w_norm", exact(s.w_norm)},
                      {"y_norm", exact(s.y_norm)},
                      {"gy_norm", exact(s.gy_norm)},
                      {"gx_norm", exact(s.gx_norm)},
                      {"gw_norm", exact(s.gw_norm)},
                      {"opt_sens_norm", exact(s.opt_sens_norm)},
                      {"option_errors", std::move(errs)}});
  }
  Json profiles = Json::array();
  for (const auto& p : b.profiles) {
    Json d = Json::array();
    for (double v : p.grad_diff_norm) d.push_back(exact(v));
    profiles.push_back({{"pass", to_string(p.pass)},
                        {"epsilon", exact(p.epsilon)},
                        {"n_samples", p.n_samples},
                        {"batch_digest", p.batch_digest},
                        {"grad_diff_norm", std::move(d)}});
  }
  return {{"schema", kBundleSchema},
          {"step", b.step},
          {"batch_digest", b.batch_digest},
          {"baseline_loss", exact(b.baseline_loss)},
          {"config", to_json(b.config)},
          {"tokens", b.tokens},
          {"adamw", to_json(b.adamw)},
          {"adamw_t", b.adamw_t},
          {"catalog", to_json(b.catalog)},
          {"layers", std::move(layers)},
          {"profiles", std::move(profiles)}};
}

inline StatsBundle bundle_from_json(const Json& j) {
  io_detail::require_schema(j, kBundleSchema);
  using io_detail::parse_exact;
  return io_detail::guarded("StatsBundle", [&] {
    StatsBundle b;
    b.step = j.at("step").get<std::uint64_t>();
    b.batch_digest = j.at("batch_digest").get<std::string>();
    b.baseline_loss = parse_exact(j.at("baseline_loss"));
    b.config = model_config_from_json(j.at("config"));
    b.tokens = j.at("tokens").get<std::size_t>();
    b.adamw = adamw_from_json(j.at("adamw"));
    b.adamw_t = j.at("adamw_t").get<std::uint64_t>();
    b.catalog = catalog_from_json(j.at("catalog"));
    for (const auto& l : j.at("layers")) {
      LayerStats s;
      s.id = {l.at("block").get<std::size_t>(), linear_kind_from_string(l.at("kind").get<std::string>())};
      s.M = l.at("M").get<std::size_t>();
      s.K = l.at("K").get<std::size_t>();
      s.N = l.at("N").get<std::size_t>();
      s.x_norm = parse_exact(l.at("x_norm"));
      s.w_norm = parse_exact(l.at("w_norm"));
      s.y_norm = parse_exact(l.at("y_norm"));
      s.gy_norm = parse_exact(l.at("gy_norm"));
      s.gx_norm = parse_exact(l.at("gx_norm"));
      s.gw_norm = parse_exact(l.at("gw_norm"));
      s.opt_sens_norm = parse_exact(l.at("opt_sens_norm"));
      for (const auto& e : l.at("option_errors")) {
        s.option_errors.push_back({parse_exact(e.at("dx")), parse_exact(e.at("dw")), parse_exact(e.at("dg"))});
      }
      b.layers.push_back(std::move(s));
    }
    for (const auto& p : j.at("profiles")) {
      PerturbationProfile pr;
      const std::string pass = p.at("pass").get<std::string>();
      if (pass != "forward" && pass != "backward") throw FormatError("unknown pass '" + pass + "'");
      pr.pass = pass == "forward" ? Pass::kForward : Pass::kBackward;
      pr.epsilon = parse_exact(p.at("epsilon"));
      pr.n_samples = p.at("n_samples").get<std::size_t>();
      pr.batch_digest = p.at("batch_digest").get<std::string>();
      for (const auto& v : p.at("grad_diff_norm")) pr.grad_diff_norm.push_back(parse_exact(v));
      b.profiles.push_back(std::move(pr));
    }
    return b;
  });
}

// ---------------------------------------------------------------------------
// Divergence report

inline Json to_json(const DivergenceReport& r) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < r.num_layers(); ++i) {
    for (std::size_t j = 0; j < r.num_options(); ++j) {
      const auto& c = r.cells[i][j];
      rows.push_back({{"block", r.layers[i].block},
                      {"kind", to_string(r.layers[i].kind)},
                      {"option", j},
                      {"dL", c.dL},
                      {"dW", c.dW},
                      {"q", c.q},
                      {"e", c.e},
                      {"dL_raw", c.dL_raw},
                      {"dW_raw", c.dW_raw}});
    }
  }
  return {{"schema", kReportSchema},
          {"batch_digest", r.batch_digest},
          {"step", r.step},
          {"config", to_json(r.config)},
          {"weights", {{"w_loss", r.options.w_loss}, {"w_weight", r.options.w_weight}}},
          {"gain", to_string(r.options.gain)},
          {"use_forward_profile", r.options.use_forward_profile},
          {"catalog", to_json(r.catalog)},
          {"rows", std::move(rows)}};
}

inline DivergenceReport report_from_json(const Json& j) {
  io_detail::require_schema(j, kReportSchema);
  return io_detail::guarded("DivergenceReport", [&] {
    DivergenceReport r;
    r.batch_digest = j.at("batch_digest").get<std::string>();
    r.step = j.at("step").get<std::uint64_t>();
    r.config = model_config_from_json(j.at("config"));
    r.options.w_loss = j.at("weights").at("w_loss").get<double>();
    r.options.w_weight = j.at("weights").at("w_weight").get<double>();
    r.options.gain = gain_rule_from_string(j.at("gain").get<std::string>());
    r.options.use_forward_profile = j.at("use_forward_profile").get<bool>();
    r.catalog = catalog_from_json(j.at("catalog"));
    const std::size_t m = r.config.n_blocks * kLinearsPerBlock, n = r.catalog.size();
    r.layers = all_layers(r.config);
    r.cells.assign(m, std::vector<DivergenceCell>(n));
    std::size_t count = 0;
    for (const auto& row : j.at("rows")) {
      const LayerId id{row.at("block").get<std::size_t>(), linear_kind_from_string(row.at("kind").get<std::string>())};
      const std::size_t opt = row.at("option").get<std::size_t>();
      if (id.index() >= m || opt >= n) throw FormatError("report row out of range");
      auto& c = r.cells[id.index()][opt];
      c.dL = row.at("dL").get<double>();
      c.dW = row.at("dW").get<double>();
      c.q = row.at("q").get<double>();
      c.e = row.at("e").get<double>();
      c.dL_raw = row.at("dL_raw").get<double>();
      c.dW_raw = row.at("dW_raw").get<double>();
      ++count;
    }
    if (count != m * n) throw FormatError("report rows do not cover every (layer, option)");
    return r;
  });
}

// ---------------------------------------------------------------------------
// ILP

inline Json to_json(const IlpInstance& inst) {
  return {{"schema", kIlpSchema}, {"q", inst.q}, {"e", inst.e}, {"target", inst.target}, {"groups", inst.groups}};
}

inline IlpInstance ilp_instance_from_json(const Json& j) {
  io_detail::require_schema(j, kIlpSchema);
  return io_detail::guarded("IlpInstance", [&] {
    IlpInstance inst;
    inst.q = j.at("q").get<std::vector<std::vector<double>>>();
    inst.e = j.at("e").get<std::vector<std::vector<double>>>();
    inst.target = j.at("target").get<double>();
    inst.groups = j.value("groups", std::vector<std::vector<std::size_t>>{});
    inst.validate();
    return inst;
  });
}

inline Json to_json(const IlpSolution& s) {
  return {{"choice", s.choice}, {"total_q", s.total_q}, {"total_e", s.total_e}, {"optimal", s.optimal}};
}

inline IlpSolution ilp_solution_from_json(const Json& j) {
  return io_detail::guarded("IlpSolution", [&] {
    return IlpSolution{j.at("choice").get<std::vector<std::size_t>>(), j.at("total_q").get<double>(),
                       j.at("total_e").get<double>(), j.at("optimal").get<bool>()};
  });
}

// ---------------------------------------------------------------------------
// Files

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("write failed for " + path.string());
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) { write_text_file(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Checkpoints: one tensor file per parameter (and per moment) plus a sidecar.

struct CheckpointMeta {
  ModelConfig config;
  AdamWHyper adamw;
  std::uint64_t t = 0;
  std::uint64_t step = 0;
  std::uint64_t data_seed = 0;
  bool has_optimizer_state = false;
};

inline void save_checkpoint(const std::filesystem::path& dir, const Model& model, const AdamWState* opt,
                            std::uint64_t step, std::uint64_t data_seed) {
  std::filesystem::create_directories(dir);
  const auto& names = model.param_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    save_tensor(dir / (names[i] + ".snipt"), model.params()[i]);
    if (opt) {
      save_tensor(dir / ("m." + names[i] + ".snipt"), opt->m[i]);
      save_tensor(dir / ("v." + names[i] + ".snipt"), opt->v[i]);
    }
  }
  Json meta = {{"schema", kCheckpointSchema},
               {"config", to_json(model.config())},
               {"adamw", to_json(opt ? opt->hyper : AdamWHyper{})},
               {"t", opt ? opt->t : 0},
               {"step", step},
               {"data_seed", data_seed},
               {"has_optimizer_state", opt != nullptr}};
  write_json_file(dir / "checkpoint.json", meta);
}

struct Checkpoint {
  CheckpointMeta meta;
  Model model;
  std::optional<AdamWState> opt;
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  const Json j = read_json_file(dir / "checkpoint.json");
  io_detail::require_schema(j, kCheckpointSchema);
  CheckpointMeta meta = io_detail::guarded("checkpoint", [&] {
    CheckpointMeta m;
    m.config = model_config_from_json(j.at("config"));
    m.adamw = adamw_from_json(j.at("adamw"));
    m.t = j.at("t").get<std::uint64_t>();
    m.step = j.at("step").get<std::uint64_t>();
    m.data_seed = j.at("data_seed").get<std::uint64_t>();
    m.has_optimizer_state = j.at("has_optimizer_state").get<bool>();
    return m;
  });
  Model model(meta.config);
  auto& params = model.mutable_params();
  const auto names = model.param_names();
  std::optional<AdamWState> opt;
  if (meta.has_optimizer_state) opt = AdamWState{meta.adamw, meta.t, {}, {}};
  for (std::size_t i = 0; i < names.size(); ++i) {
    Tensor t = load_tensor(dir / (names[i] + ".snipt"));
    if (t.shape() != params[i].shape()) throw FormatError("checkpoint tensor " + names[i] + " has the wrong shape");
    params[i] = std::move(t);
    if (opt) {
      opt->m.push_back(load_tensor(dir / ("m." + names[i] + ".snipt")));
      opt->v.push_back(load_tensor(dir / ("v." + names[i] + ".snipt")));
      if (opt->m.back().shape() != params[i].shape() || opt->v.back().shape() != params[i].shape()) {
        throw FormatError("checkpoint moments for " + names[i] + " have the wrong shape");
      }
    }
  }
  return {meta, std::move(model), std::move(opt)};
}

}  // namespace snip
