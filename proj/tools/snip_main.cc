// SPDX-License-Identifier: Apache-2.0
//
// snip: adaptive FP8/FP4 precision planning for a toy transformer.
//
//   snip train --config run.json
//   snip snapshot-stats --checkpoint DIR --out bundle.json
//   snip plan --bundle bundle.json --et 0.75 --groups 4 --out policy.json
//   snip eval-estimates --checkpoint DIR --out eval.csv
//   snip report --dir RUN

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "snip/io.hpp"
#include "snip/workflow.hpp"

namespace {

using namespace snip;

int cmd_train(const std::string& config_path, const std::string& out_override) {
  RunConfig cfg = run_config_from_json(read_json_file(config_path));
  if (!out_override.empty()) cfg.out_dir = out_override;
  if (cfg.out_dir.empty()) cfg.out_dir = "run";
  const TrainResult r = train(cfg);
  for (const auto& w : r.log.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  std::printf("trained %zu steps, final smoothed loss %.6f, final fp4 fraction %.4f, %zu planning cycles\n",
              r.log.steps.size(), r.log.smoothed_loss(cfg.smoothing_window), r.log.steps.back().fp4_fraction,
              r.log.cycles.size());
  std::printf("artifacts in %s\n", cfg.out_dir.c_str());
  return 0;
}

Batch checkpoint_batch(const CheckpointMeta& meta, std::size_t batch_size, std::uint64_t source_seed) {
  const MarkovSource src(source_seed, meta.config.vocab);
  RngStream rng(meta.data_seed, 0x5e1f ^ meta.step);
  return src.sample(batch_size, meta.config.seq_len, rng);
}

int cmd_snapshot(const std::string& ckpt, const std::string& out, std::size_t batch_size, std::uint64_t source_seed,
                 double ratio, std::size_t samples) {
  const Checkpoint c = load_checkpoint(ckpt);
  if (!c.opt) throw InvalidArgument("checkpoint " + ckpt + " has no optimizer state");
  const Batch batch = checkpoint_batch(c.meta, batch_size, source_seed);
  const StatsBundle b = snapshot_stats(c.model, *c.opt, batch, default_catalog(), ratio, samples,
                                       RngStream(c.meta.data_seed, 0x91a2).derive(c.meta.step), c.meta.step);
  write_json_file(out, to_json(b));
  std::printf("wrote %s (%zu layers, digest %s)\n", out.c_str(), b.layers.size(), b.batch_digest.c_str());
  return 0;
}

int cmd_plan(const std::string& bundle_path, double et, std::size_t groups, const std::string& out,
             const std::string& report_out, const std::string& heatmap_out, double w_loss, double w_weight,
             double time_limit, const std::string& gain) {
  const StatsBundle b = bundle_from_json(read_json_file(bundle_path));
  DivergenceOptions w;
  w.w_loss = w_loss;
  w.w_weight = w_weight;
  w.gain = gain_rule_from_string(gain);
  PlanResult r;
  try {
    r = plan_from_bundle(b, et, groups, w, time_limit);
  } catch (const InfeasibleError& e) {
    std::fprintf(stderr, "infeasible: %s (max achievable %.6f)\n", e.what(), e.max_achievable());
    return 3;
  }
  write_json_file(out, to_json(r.policy));
  if (!report_out.empty()) write_json_file(report_out, to_json(r.report));
  if (!heatmap_out.empty()) {
    std::ostringstream csv;
    write_heatmap_csv(csv, r.report);
    write_text_file(heatmap_out, csv.str());
  }
  std::printf("policy %s: total q %.6g, fp4 fraction %.6f%s\n", r.policy.label.c_str(), r.solution.total_q,
              r.solution.total_e, r.solution.optimal ? "" : " (time limit hit, not proven optimal)");
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& out, const std::string& json_out, EvalOptions o) {
  const Checkpoint c = load_checkpoint(ckpt);
  if (!c.opt) throw InvalidArgument("checkpoint " + ckpt + " has no optimizer state");
  const EstimateEval ev = evaluate_estimates(c.model, *c.opt, o);
  std::ostringstream csv;
  write_estimates_csv(csv, ev);
  write_text_file(out, csv.str());
  if (!json_out.empty()) write_json_file(json_out, to_json(ev));
  std::printf("dL: spearman %.4f pearson %.4f\ndW: spearman %.4f pearson %.4f\n", ev.dL_spearman, ev.dL_pearson,
              ev.dW_spearman, ev.dW_pearson);
  return 0;
}

int cmd_report(const std::string& dir) {
  const ReportResult r = make_report(dir);
  for (const auto& m : r.missing) std::fprintf(stderr, "warning: partial report, missing %s\n", m.c_str());
  for (const auto& w : r.written) std::printf("wrote %s\n", w.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive FP8/FP4 precision planning for a toy transformer"};
  app.require_subcommand(1);

  std::string config, out_dir;
  auto* train = app.add_subcommand("train", "Run fake-quantized training with periodic policy planning");
  train->add_option("--config", config, "Run configuration JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out_dir, "Output directory (overrides out_dir in the config)");

  std::string ckpt, out;
  std::size_t batch_size = 8, samples = 1;
  std::uint64_t source_seed = 1;
  double ratio = 1e-4;
  auto* snap = app.add_subcommand("snapshot-stats", "Collect planning statistics from a checkpoint");
  snap->add_option("--checkpoint", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  snap->add_option("--out", out, "Output bundle JSON")->required();
  snap->add_option("--batch-size", batch_size, "Sequences in the statistics batch");
  snap->add_option("--source-seed", source_seed, "Markov source seed used in training");
  snap->add_option("--injection-ratio", ratio, "Injection epsilon relative to the target norm");
  snap->add_option("--samples", samples, "Noise samples per injection pass");

  std::string bundle, report_out, heatmap_out, gain = "per_unit";
  double et = 0.75, w_loss = 1.0, w_weight = 1.0, time_limit = kDefaultTimeLimit;
  std::size_t groups = 1;
  auto* plan = app.add_subcommand("plan", "Solve for a precision policy from a statistics bundle");
  plan->add_option("--bundle", bundle, "Statistics bundle JSON")->required()->check(CLI::ExistingFile);
  plan->add_option("--et", et, "Target fraction of FP4 FLOPs")->check(CLI::Range(0.0, 1.0));
  plan->add_option("--groups", groups, "Pipeline stages, each meeting et/groups");
  plan->add_option("--out", out, "Output policy JSON")->required();
  plan->add_option("--report", report_out, "Also write the divergence report JSON");
  plan->add_option("--heatmap", heatmap_out, "Also write the layer x option q heatmap CSV");
  plan->add_option("--w-loss", w_loss, "Weight of the loss divergence");
  plan->add_option("--w-weight", w_weight, "Weight of the weight divergence");
  plan->add_option("--time-limit", time_limit, "Solver time limit in seconds");
  plan->add_option("--gain", gain, "Cross-layer gain rule")->check(CLI::IsMember({"per_unit", "ratio"}));

  EvalOptions eval_opts;
  std::string eval_json;
  auto* eval = app.add_subcommand("eval-estimates", "Compare divergence estimates with measured per-layer effects");
  eval->add_option("--checkpoint", ckpt, "Checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--out", out, "Output CSV")->required();
  eval->add_option("--json", eval_json, "Also write correlations as JSON");
  eval->add_option("--batch-size", eval_opts.batch_size, "Sequences in the evaluation batch");
  eval->add_option("--source-seed", eval_opts.source_seed, "Markov source seed used in training");
  eval->add_option("--seed", eval_opts.seed, "Evaluation seed");

  std::string run_dir;
  auto* report = app.add_subcommand("report", "Summarize a run directory into CSV and JSON");
  report->add_option("--dir", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(config, out_dir);
    if (*snap) return cmd_snapshot(ckpt, out, batch_size, source_seed, ratio, samples);
    if (*plan) return cmd_plan(bundle, et, groups, out, report_out, heatmap_out, w_loss, w_weight, time_limit, gain);
    if (*eval) return cmd_eval(ckpt, out, eval_json, eval_opts);
    if (*report) return cmd_report(run_dir);
  } catch (const InfeasibleError& e) {
    std::fprintf(stderr, "infeasible: %s (max achievable %.6f)\n", e.what(), e.max_achievable());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
