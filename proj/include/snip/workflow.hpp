// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "snip/data.hpp"
#include "snip/divergence.hpp"
#include "snip/io.hpp"
#include "snip/model.hpp"
#include "snip/policy.hpp"
#include "snip/stats.hpp"

namespace snip {

enum class PolicyMode { kSnip, kRandom, kFp8, kFp4, kHighPrecision };

inline std::string_view to_string(PolicyMode m) {
  switch (m) {
    case PolicyMode::kSnip: return "snip";
    case PolicyMode::kRandom: return "random";
    case PolicyMode::kFp8: return "fp8";
    case PolicyMode::kFp4: return "fp4";
    case PolicyMode::kHighPrecision: return "hp";
  }
  return "?";
}

inline PolicyMode policy_mode_from_string(const std::string& s) {
  for (auto m : {PolicyMode::kSnip, PolicyMode::kRandom, PolicyMode::kFp8, PolicyMode::kFp4, PolicyMode::kHighPrecision}) {
    if (to_string(m) == s) return m;
  }
  throw InvalidArgument("unknown policy mode '" + s + "'");
}

struct RunConfig {
  ModelConfig model;
  AdamWHyper adamw{3e-3, 0.9, 0.999, 0.0, 1e-8};
  OptionCatalog catalog = default_catalog();
  PolicyMode mode = PolicyMode::kSnip;
  double target = 0.75;
  DivergenceOptions weights;
  std::size_t refresh_interval = 100;
  double injection_ratio = 1e-4;
  std::size_t injection_samples = 1;
  std::size_t groups = 1;
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  /// Identity of the Markov chain; fixed across seeds.
  std::uint64_t source_seed = 1;
  std::size_t branching = 4;
  /// Run seed: model init, data sampling and quantizer streams.
  std::uint64_t seed = 0;
  double time_limit = kDefaultTimeLimit;
  std::size_t smoothing_window = 50;
  std::string out_dir;

  void validate() const {
    model.validate();
    validate_catalog(catalog);
    if (refresh_interval < 1) throw InvalidArgument("refresh_interval must be >= 1");
    if (!(target >= 0.0 && target <= 1.0)) throw InvalidArgument("target must lie in [0, 1]");
    if (!(injection_ratio > 0.0 && injection_ratio <= kMaxInjectionRatio)) {
      throw InvalidArgument("injection_ratio must lie in (0, 1e-2]");
    }
    if (batch_size < 1 || steps < 1 || smoothing_window < 1) throw InvalidArgument("batch_size, steps, window >= 1");
    if (groups < 1 || groups > model.n_blocks) throw InvalidArgument("groups must lie in [1, n_blocks]");
  }

  std::size_t tokens_per_step() const { return batch_size * model.seq_len; }
};

inline Json to_json(const RunConfig& c) {
  return {{"schema", "snip.run/1"},
          {"model", to_json(c.model)},
          {"adamw", to_json(c.adamw)},
          {"catalog", to_json(c.catalog)},
          {"mode", to_string(c.mode)},
          {"target", c.target},
          {"w_loss", c.weights.w_loss},
          {"w_weight", c.weights.w_weight},
          {"gain", to_string(c.weights.gain)},
          {"use_forward_profile", c.weights.use_forward_profile},
          {"refresh_interval", c.refresh_interval},
          {"injection_ratio", c.injection_ratio},
          {"injection_samples", c.injection_samples},
          {"groups", c.groups},
          {"steps", c.steps},
          {"batch_size", c.batch_size},
          {"source_seed", c.source_seed},
          {"branching", c.branching},
          {"seed", c.seed},
          {"time_limit", c.time_limit},
          {"smoothing_window", c.smoothing_window},
          {"out_dir", c.out_dir}};
}

/// Missing keys keep their defaults. SNIP_SEED, when set, overrides "seed".
inline RunConfig run_config_from_json(const Json& j) {
  RunConfig c;
  io_detail::guarded("RunConfig", [&] {
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("adamw")) c.adamw = adamw_from_json(j["adamw"], c.adamw);
    if (j.contains("catalog")) c.catalog = catalog_from_json(j["catalog"]);
    if (j.contains("mode")) c.mode = policy_mode_from_string(j["mode"].get<std::string>());
    c.target = j.value("target", c.target);
    c.weights.w_loss = j.value("w_loss", c.weights.w_loss);
    c.weights.w_weight = j.value("w_weight", c.weights.w_weight);
    if (j.contains("gain")) c.weights.gain = gain_rule_from_string(j["gain"].get<std::string>());
    c.weights.use_forward_profile = j.value("use_forward_profile", c.weights.use_forward_profile);
    c.refresh_interval = j.value("refresh_interval", c.refresh_interval);
    c.injection_ratio = j.value("injection_ratio", c.injection_ratio);
    c.injection_samples = j.value("injection_samples", c.injection_samples);
    c.groups = j.value("groups", c.groups);
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.source_seed = j.value("source_seed", c.source_seed);
    c.branching = j.value("branching", c.branching);
    c.seed = j.value("seed", c.seed);
    c.time_limit = j.value("time_limit", c.time_limit);
    c.smoothing_window = j.value("smoothing_window", c.smoothing_window);
    c.out_dir = j.value("out_dir", c.out_dir);
    return 0;
  });
  if (const char* env = std::getenv("SNIP_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') throw InvalidArgument("SNIP_SEED must be a non-negative integer");
    c.seed = v;
  }
  c.model.seed = c.seed;
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Planning (Steps 1-5)

/// Steps 1-3 on one batch: three extra forward+backward passes, no update.
inline StatsBundle snapshot_stats(const Model& model, const AdamWState& opt, const Batch& batch,
                                  const OptionCatalog& catalog, double injection_ratio, std::size_t samples,
                                  const RngStream& rng, std::uint64_t step = 0) {
  const Baseline base = collect_baseline(model, opt, batch, catalog, rng.derive(1));
  StatsBundle b;
  b.step = step;
  b.batch_digest = base.batch_digest;
  b.baseline_loss = base.loss;
  b.config = model.config();
  b.tokens = batch.batch_size * batch.seq_len;
  b.adamw = opt.hyper;
  b.adamw_t = opt.t + 1;
  b.catalog = catalog;
  b.layers = base.layers;
  for (Pass p : {Pass::kBackward, Pass::kForward}) {
    const double eps = injection_epsilon(base, p, injection_ratio);
    b.profiles.push_back(run_injection(model, batch, p, eps, base, rng.derive(p == Pass::kBackward ? 2 : 3), samples));
  }
  return b;
}

struct PlanResult {
  DivergenceReport report;
  IlpSolution solution;
  PrecisionPolicy policy;
};

/// Steps 4-5: pure function of the bundle.
inline PlanResult plan_from_bundle(const StatsBundle& b, double target, std::size_t groups,
                                   const DivergenceOptions& weights, double time_limit = kDefaultTimeLimit) {
  PlanResult r;
  r.report = build_report(b, weights);
  r.solution = solve_grouped(to_instance(r.report, target, groups), time_limit);
  r.policy = to_policy(r.report, r.solution, "snip@" + std::to_string(b.step));
  return r;
}

/// Random layers go all-FP4 until the FP4 share reaches the target.
inline std::pair<PrecisionPolicy, double> random_policy(const ModelConfig& cfg, std::size_t tokens, double target,
                                                        RngStream& rng, std::string label) {
  PrecisionPolicy p = PrecisionPolicy::uniform(cfg, LayerPrecision::fp8(), std::move(label));
  std::vector<std::size_t> order(p.layers.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const double total = total_linear_flops(cfg, tokens);
  double e = 0.0;
  for (std::size_t i : order) {
    if (e >= target - detail::kEffSlack) break;
    p.layers[i] = LayerPrecision::fp4();
    e += layer_flops(LayerId::from_index(i), cfg, tokens) / total;
  }
  return {p, policy_fp4_fraction(p, cfg, tokens)};
}

// ---------------------------------------------------------------------------
// Training

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0;
  std::string policy;
  double fp4_fraction = 0.0;
  /// Sum of e over the active assignment as reported by the planner.
  double policy_sum_e = 0.0;
};

struct CycleLog {
  std::size_t step = 0;
  std::string batch_digest;
  std::uint64_t extra_forward = 0;
  std::uint64_t extra_backward = 0;
  double total_q = 0.0;
  double total_e = 0.0;
  bool optimal = true;
  std::string policy;
  std::string artifact_dir;
};

struct TrainLog {
  std::vector<StepLog> steps;
  std::vector<CycleLog> cycles;
  std::vector<std::string> warnings;

  double smoothed_loss(std::size_t window) const {
    if (steps.empty()) return 0.0;
    const std::size_t n = std::min(window, steps.size());
    double s = 0.0;
    for (std::size_t i = steps.size() - n; i < steps.size(); ++i) s += steps[i].loss;
    return s / static_cast<double>(n);
  }
};

struct TrainResult {
  TrainLog log;
  Model model;
  AdamWState opt;
  PrecisionPolicy policy;
};

namespace detail {

inline constexpr std::uint64_t kDataStream = 0xda7a;
inline constexpr std::uint64_t kStepStream = 0x57e9;
inline constexpr std::uint64_t kPlanStream = 0x91a2;

inline void write_loss_csv(std::ostream& os, const TrainLog& log) {
  os << "step,loss,policy,fp4_fraction\n";
  for (const auto& s : log.steps) {
    os << s.step << ',' << io_detail::exact(s.loss) << ',' << s.policy << ',' << io_detail::exact(s.fp4_fraction)
       << '\n';
  }
}

}  // namespace detail

inline Json to_json(const TrainLog& log) {
  Json cycles = Json::array();
  for (const auto& c : log.cycles) {
    cycles.push_back({{"step", c.step},
                      {"batch_digest", c.batch_digest},
                      {"extra_forward", c.extra_forward},
                      {"extra_backward", c.extra_backward},
                      {"total_q", c.total_q},
                      {"total_e", c.total_e},
                      {"optimal", c.optimal},
                      {"policy", c.policy},
                      {"artifact_dir", c.artifact_dir}});
  }
  return {{"schema", "snip.trainlog/1"}, {"cycles", cycles}, {"warnings", log.warnings}};
}

/// Fake-quantized training. In snip and random modes a new policy is planned
/// every refresh_interval steps on that step's batch and takes effect from
/// the next step; the initial policy is all-FP8.
inline TrainResult train(const RunConfig& cfg_in) {
  RunConfig cfg = cfg_in;
  cfg.model.seed = cfg.seed;
  cfg.validate();
  const std::filesystem::path out = cfg.out_dir;
  const bool persist = !cfg.out_dir.empty();
  if (persist) write_json_file(out / "config.json", to_json(cfg));

  Model model(cfg.model);
  AdamWState opt = AdamWState::zeros_like(model.params(), cfg.adamw);
  const MarkovSource source(cfg.source_seed, cfg.model.vocab, cfg.branching);
  RngStream data_rng(cfg.seed, detail::kDataStream);
  RngStream random_policy_rng = RngStream(cfg.seed, detail::kPlanStream).derive(0xabc);
  const std::size_t tokens = cfg.tokens_per_step();

  PrecisionPolicy active;
  double active_sum_e = 0.0;
  switch (cfg.mode) {
    case PolicyMode::kFp4:
      active = PrecisionPolicy::uniform(cfg.model, LayerPrecision::fp4(), "fp4");
      active_sum_e = policy_fp4_fraction(active, cfg.model, tokens);
      break;
    case PolicyMode::kHighPrecision: active = high_precision_policy(cfg.model); break;
    default: active = PrecisionPolicy::uniform(cfg.model, LayerPrecision::fp8(), "fp8"); break;
  }

  TrainLog log;
  // Single-slot mailbox: the planner posts here, the trainer collects at the
  // next step boundary.
  std::optional<std::future<PlanResult>> mailbox;
  std::size_t mailbox_cycle = 0;

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (mailbox) {
      PlanResult r = mailbox->get();
      mailbox.reset();
      CycleLog& c = log.cycles[mailbox_cycle];
      c.total_q = r.solution.total_q;
      c.total_e = r.solution.total_e;
      c.optimal = r.solution.optimal;
      c.policy = r.policy.label;
      if (!r.solution.optimal) log.warnings.push_back("planner hit its time limit at step " + std::to_string(c.step));
      active = std::move(r.policy);
      active_sum_e = r.solution.total_e;
    }

    const Batch batch = source.sample(cfg.batch_size, cfg.model.seq_len, data_rng);

    const bool plan_now = step % cfg.refresh_interval == 0;
    if (plan_now && cfg.mode == PolicyMode::kSnip) {
      const std::uint64_t f0 = model.passes().forward(), b0 = model.passes().backward();
      StatsBundle bundle = snapshot_stats(model, opt, batch, cfg.catalog, cfg.injection_ratio, cfg.injection_samples,
                                          RngStream(cfg.seed, detail::kPlanStream).derive(step), step);
      CycleLog c;
      c.step = step;
      c.batch_digest = bundle.batch_digest;
      c.extra_forward = model.passes().forward() - f0;
      c.extra_backward = model.passes().backward() - b0;
      if (persist) c.artifact_dir = (out / "cycles" / ("step_" + std::to_string(step))).string();
      log.cycles.push_back(c);
      mailbox_cycle = log.cycles.size() - 1;
      const std::string dir = c.artifact_dir;
      mailbox = std::async(std::launch::async, [bundle = std::move(bundle), dir, &cfg] {
        PlanResult r = plan_from_bundle(bundle, cfg.target, cfg.groups, cfg.weights, cfg.time_limit);
        if (!dir.empty()) {
          write_json_file(std::filesystem::path(dir) / "bundle.json", to_json(bundle));
          write_json_file(std::filesystem::path(dir) / "report.json", to_json(r.report));
          write_json_file(std::filesystem::path(dir) / "policy.json", to_json(r.policy));
        }
        return r;
      });
    } else if (plan_now && cfg.mode == PolicyMode::kRandom) {
      auto [p, e] = random_policy(cfg.model, tokens, cfg.target, random_policy_rng, "random@" + std::to_string(step));
      std::promise<PlanResult> ready;
      ready.set_value(PlanResult{{}, IlpSolution{{}, 0.0, e, true}, std::move(p)});
      log.cycles.push_back(CycleLog{step, batch_digest(batch), 0, 0, 0.0, e, true, "", ""});
      mailbox_cycle = log.cycles.size() - 1;
      mailbox = ready.get_future();
    }

    const RngStream step_rng = RngStream(cfg.seed, detail::kStepStream).derive(step);
    const auto fwd = model.forward(batch, active, std::nullopt, step_rng);
    const GradSet g = model.backward(fwd.cache, active, std::nullopt, step_rng);
    model.apply_adamw(opt, g);
    log.steps.push_back({step, fwd.loss, active.label, policy_fp4_fraction(active, cfg.model, tokens), active_sum_e});
  }
  if (mailbox) {
    mailbox->get();
    log.warnings.push_back("last planning cycle finished after the final step; its policy was not applied");
  }

  if (persist) {
    std::ostringstream csv;
    detail::write_loss_csv(csv, log);
    write_text_file(out / "loss.csv", csv.str());
    write_json_file(out / "policy_final.json", to_json(active));
    write_json_file(out / "train_log.json", to_json(log));
    save_checkpoint(out / "checkpoint", model, &opt, cfg.steps, cfg.seed);
  }
  return {std::move(log), std::move(model), std::move(opt), std::move(active)};
}

// ---------------------------------------------------------------------------
// Estimate evaluation

/// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double mean = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = mean;
    i = j + 1;
  }
  return r;
}

/// Pearson correlation; 0 when either side is constant.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) throw InvalidArgument("pearson needs two equal-length series, n >= 2");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n, mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) { return pearson(ranks(a), ranks(b)); }

struct EstimateRow {
  LayerId id;
  double dL_est = 0.0, dL_true = 0.0, dW_est = 0.0, dW_true = 0.0;
};

struct EstimateEval {
  std::vector<EstimateRow> rows;
  double dL_spearman = 0.0, dL_pearson = 0.0, dW_spearman = 0.0, dW_pearson = 0.0;
};

struct EvalOptions {
  /// Precision applied to the probed layer; all others run at full precision.
  LayerPrecision probe = LayerPrecision::fp4();
  std::size_t batch_size = 8;
  std::size_t branching = 4;
  std::uint64_t source_seed = 1;
  std::uint64_t seed = 0;
  double injection_ratio = 1e-4;
  std::size_t injection_samples = 1;
  DivergenceOptions weights;
};

/// For each layer, quantize it alone with `probe` and compare the estimated
/// loss and weight divergence against measured ones: the relative loss change
/// of a quantized forward pass, and the mean relative weight change after one
/// AdamW step driven by a quantized backward pass.
inline EstimateEval evaluate_estimates(const Model& model, const AdamWState& opt, const EvalOptions& o) {
  const ModelConfig& cfg = model.config();
  const MarkovSource source(o.source_seed, cfg.vocab, o.branching);
  RngStream data_rng(o.seed, detail::kDataStream ^ 0xe5a1);
  const Batch batch = source.sample(o.batch_size, cfg.seq_len, data_rng);
  const RngStream rng(o.seed, detail::kPlanStream ^ 0xe5a1);

  OptionCatalog catalog = default_catalog();
  const std::size_t probe_id = catalog.size();
  catalog.push_back({probe_id, "probe", o.probe});
  const StatsBundle bundle = snapshot_stats(model, opt, batch, catalog, o.injection_ratio, o.injection_samples, rng);
  const DivergenceReport report = build_report(bundle, o.weights);

  const auto hp = high_precision_policy(cfg);
  const RngStream qrng = rng.derive(7);
  const auto base_fwd = model.forward(batch, hp, std::nullopt, qrng);
  const double L = base_fwd.loss;
  const GradSet base_grads = model.backward(base_fwd.cache, hp, std::nullopt, qrng);
  auto step_weights = [&](const GradSet& g) {
    std::vector<Tensor> p = model.params();
    AdamWState s = opt;
    adamw_step(p, s, g.params);
    return p;
  };
  const std::vector<Tensor> w_ref = step_weights(base_grads);

  EstimateEval ev;
  std::vector<double> le, lt, we, wt;
  for (const auto& id : all_layers(cfg)) {
    EstimateRow row;
    row.id = id;
    row.dL_est = report.cells[id.index()][probe_id].dL_raw;
    row.dW_est = report.cells[id.index()][probe_id].dW_raw;
    PrecisionPolicy only = hp;
    only.layers[id.index()] = o.probe;
    row.dL_true = std::abs(model.forward(batch, only, std::nullopt, qrng).loss - L) / std::abs(L);
    const std::vector<Tensor> w_q = step_weights(model.backward(base_fwd.cache, only, std::nullopt, qrng));
    double dw = 0.0;
    for (const auto& l : all_layers(cfg)) {
      const std::size_t p = param::of_layer(l);
      dw += diff_norm(w_q[p], w_ref[p]) / std::max(frobenius_norm(w_ref[p]), kNormFloor);
    }
    row.dW_true = dw / static_cast<double>(model.num_layers());
    le.push_back(row.dL_est);
    lt.push_back(row.dL_true);
    we.push_back(row.dW_est);
    wt.push_back(row.dW_true);
    ev.rows.push_back(row);
  }
  ev.dL_spearman = spearman(le, lt);
  ev.dL_pearson = pearson(le, lt);
  ev.dW_spearman = spearman(we, wt);
  ev.dW_pearson = pearson(we, wt);
  return ev;
}

inline void write_estimates_csv(std::ostream& os, const EstimateEval& ev) {
  os << "block,kind,dL_est,dL_true,dW_est,dW_true\n";
  for (const auto& r : ev.rows) {
    os << r.id.block << ',' << to_string(r.id.kind) << ',' << io_detail::exact(r.dL_est) << ','
       << io_detail::exact(r.dL_true) << ',' << io_detail::exact(r.dW_est) << ',' << io_detail::exact(r.dW_true)
       << '\n';
  }
}

inline Json to_json(const EstimateEval& ev) {
  return {{"schema", "snip.eval/1"},
          {"dL", {{"spearman", ev.dL_spearman}, {"pearson", ev.dL_pearson}}},
          {"dW", {{"spearman", ev.dW_spearman}, {"pearson", ev.dW_pearson}}}};
}

// ---------------------------------------------------------------------------
// Run reports

inline void write_heatmap_csv(std::ostream& os, const PrecisionPolicy& p) {
  os << "block,kind,x,w,g,fp4_fraction\n";
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    const LayerId id = LayerId::from_index(i);
    const auto& l = p.layers[i];
    auto one = [](const std::optional<QuantSpec>& s) { return s ? s->format.name() : std::string("HP"); };
    os << id.block << ',' << to_string(id.kind) << ',' << one(l.x) << ',' << one(l.w) << ',' << one(l.g) << ','
       << io_detail::exact(fp4_gemm_fraction(l)) << '\n';
  }
}

struct ReportResult {
  std::vector<std::string> written;
  std::vector<std::string> missing;
};

/// Derives report/{loss_curve.csv, policy_heatmap.csv, summary.json} from a
/// run directory. Missing inputs are listed rather than fatal.
inline ReportResult make_report(const std::filesystem::path& run_dir) {
  namespace fs = std::filesystem;
  ReportResult res;
  const fs::path rep = run_dir / "report";
  std::optional<RunConfig> cfg;
  if (fs::exists(run_dir / "config.json")) {
    const Json j = read_json_file(run_dir / "config.json");
    RunConfig c;
    c.model = model_config_from_json(j.at("model"));
    c.target = j.value("target", c.target);
    c.mode = policy_mode_from_string(j.value("mode", std::string("snip")));
    c.batch_size = j.value("batch_size", c.batch_size);
    c.smoothing_window = j.value("smoothing_window", c.smoothing_window);
    cfg = c;
  } else {
    res.missing.push_back("config.json");
  }

  std::vector<double> losses, fractions;
  if (fs::exists(run_dir / "loss.csv")) {
    std::ifstream in(run_dir / "loss.csv");
    std::string line;
    std::getline(in, line);
    std::ostringstream csv;
    csv << "step,loss,fp4_fraction\n";
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      if (f.size() != 4) throw FormatError("loss.csv: malformed row '" + line + "'");
      losses.push_back(std::strtod(f[1].c_str(), nullptr));
      fractions.push_back(std::strtod(f[3].c_str(), nullptr));
      csv << f[0] << ',' << f[1] << ',' << f[3] << '\n';
    }
    write_text_file(rep / "loss_curve.csv", csv.str());
    res.written.push_back((rep / "loss_curve.csv").string());
  } else {
    res.missing.push_back("loss.csv");
  }

  std::optional<PrecisionPolicy> policy;
  if (fs::exists(run_dir / "policy_final.json")) {
    policy = policy_from_json(read_json_file(run_dir / "policy_final.json"));
    std::ostringstream csv;
    write_heatmap_csv(csv, *policy);
    write_text_file(rep / "policy_heatmap.csv", csv.str());
    res.written.push_back((rep / "policy_heatmap.csv").string());
  } else {
    res.missing.push_back("policy_final.json");
  }

  Json summary = {{"schema", "snip.summary/1"}, {"steps", losses.size()}};
  if (!losses.empty()) {
    const std::size_t window = cfg ? cfg->smoothing_window : 50;
    const std::size_t n = std::min(window, losses.size());
    summary["final_smoothed_loss"] =
        std::accumulate(losses.end() - static_cast<std::ptrdiff_t>(n), losses.end(), 0.0) / static_cast<double>(n);
    summary["mean_fp4_fraction"] = std::accumulate(fractions.begin(), fractions.end(), 0.0) / fractions.size();
  }
  if (cfg) {
    summary["mode"] = to_string(cfg->mode);
    summary["target"] = cfg->target;
  }
  if (policy && cfg) summary["final_fp4_fraction"] = policy_fp4_fraction(*policy, cfg->model, cfg->tokens_per_step());
  summary["missing"] = res.missing;
  write_json_file(rep / "summary.json", summary);
  res.written.push_back((rep / "summary.json").string());
  return res;
}

}  // namespace snip
