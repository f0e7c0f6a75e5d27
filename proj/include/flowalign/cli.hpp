#pragma once

// Command-line front end.  Each subcommand is one pipeline stage that reads
// declared files from the run directory, writes its own artifacts and a
// manifest under manifests/<stage>.json.
//
// Exit codes: 0 success, 1 runtime or validation failure, 2 usage error.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <ostream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "flowalign/ablation.hpp"
#include "flowalign/config.hpp"
#include "flowalign/error.hpp"
#include "flowalign/pipeline.hpp"
#include "flowalign/report.hpp"

namespace flowalign::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

inline constexpr const char* kOutEnv = "FLOWALIGN_OUT";

struct Override {
  std::string section, key, value;
};

// Options shared by every subcommand plus the per-subcommand ones that map
// straight onto config keys.
struct Invocation {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;
  std::vector<Override> overrides;
  bool print_effective = false;

  // subcommand-specific
  bool emit_gt = false;
  std::string model = "base";
  std::string name;
  bool guided = false;
  bool trace = false;
  std::string sample_a, sample_b = "base";
  std::size_t max_cells = 0;
  std::string report_csv;
  std::string report_hash;
};

namespace detail {

inline void bind(CLI::App* app, std::vector<Override>& ov, const std::string& flag, const std::string& section,
                 const std::string& key, const std::string& help) {
  app->add_option_function<std::string>(
      flag, [&ov, section, key](const std::string& v) { ov.push_back({section, key, v}); }, help);
}

inline Override parse_set(const std::string& s) {
  const auto eq = s.find('=');
  const auto dot = s.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("--set expects section.key=value, got '" + s + "'");
  }
  return {cfgio::trim(s.substr(0, dot)), cfgio::trim(s.substr(dot + 1, eq - dot - 1)), cfgio::trim(s.substr(eq + 1))};
}

// Precedence, lowest first: defaults, config file, FLOWALIGN_OUT, --set,
// subcommand flags, --out.
inline RunConfig resolve_config(const Invocation& inv) {
  RunConfig cfg = inv.config_path.empty() ? RunConfig{} : load_config(inv.config_path);
  if (const char* env = std::getenv(kOutEnv); env != nullptr && *env != '\0') cfg.out_dir = env;
  for (const auto& s : inv.sets) {
    const auto o = parse_set(s);
    set_config_value(cfg, o.section, o.key, o.value);
  }
  for (const auto& o : inv.overrides) set_config_value(cfg, o.section, o.key, o.value);
  if (!inv.out_dir.empty()) cfg.out_dir = inv.out_dir;
  cfg.sync();
  cfg.validate();
  return cfg;
}

inline const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return "config";
  if (dynamic_cast<const InputError*>(&e)) return "input";
  if (dynamic_cast<const IoError*>(&e)) return "io";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const DomainError*>(&e)) return "domain";
  if (dynamic_cast<const Error*>(&e)) return "error";
  return "internal";
}

inline std::string ckpt_meta_stage(const std::string& stage, const RunConfig& cfg) { return stage + "@" + hex64(config_hash(cfg)); }

inline void announce(std::ostream& out, const std::string& stage, const std::string& manifest) {
  out << nlohmann::json{{"stage", stage}, {"status", "ok"}, {"manifest", manifest}}.dump() << "\n";
}

// A sample name resolves to samples_<name>.jsonl in the run directory unless
// it already names an existing file.
inline std::string sample_path(const Layout& l, const std::string& name) {
  if (std::filesystem::exists(name) && std::filesystem::is_regular_file(name)) return name;
  return l.samples(name);
}

// "base" is the pretrained flow, a method name is its aligned checkpoint,
// anything else is taken as a path.
inline std::pair<std::string, std::string> model_path(const Layout& l, const std::string& model) {
  if (model == "base") return {l.flow(), "train-flow"};
  for (const char* m : {"sft", "rwr", "dpo"}) {
    if (model == m) return {l.aligned(m), "align --method " + model};
  }
  return {model, "a checkpoint path"};
}

inline std::string metrics_row(const std::string& metric, const std::string& dim, const std::string& mode, double v,
                               std::uint64_t seed) {
  return metric + "," + dim + "," + mode + "," + cfgio::fmt_double(v) + "," + std::to_string(seed) + "\n";
}

}  // namespace detail

// ---- stages ----

inline void run_gen_data(const RunConfig& cfg, const Invocation& inv, std::ostream& out) {
  const Layout l{cfg.out_dir};
  std::filesystem::create_directories(l.dir);
  StageRecorder rec(l, cfg, "gen-data");
  const auto g = gen_data(cfg);
  write_corpus(l.corpus(), g.corpus);
  rec.output(l.corpus());
  rec.write(l.pairs(), encode_dataset(g.pairs, inv.emit_gt));
  rec.param("corpus_size", std::to_string(cfg.corpus_size));
  rec.param("n_pairs", std::to_string(cfg.n_pairs));
  rec.param("emit_gt", inv.emit_gt ? "true" : "false");
  detail::announce(out, "gen-data", rec.finish());
}

inline void run_train_flow(const RunConfig& cfg, std::ostream& out) {
  const Layout l{cfg.out_dir};
  require_artifact(l.corpus(), "gen-data");
  StageRecorder rec(l, cfg, "train-flow");
  rec.input(l.corpus());
  const auto res = pretrain_flow(cfg, read_corpus(l.corpus()));
  rec.write(l.flow(), encode_checkpoint(res.net.to_checkpoint({{"stage", detail::ckpt_meta_stage("train-flow", cfg)}})));
  rec.write(l.flow_curve(), encode_curve(res.curve));
  rec.param("steps", std::to_string(cfg.flow.steps));
  rec.param("final_loss", res.curve.empty() ? "nan" : cfgio::fmt_double(res.curve.back().loss));
  detail::announce(out, "train-flow", rec.finish());
}

inline void run_train_reward(const RunConfig& cfg, std::ostream& out) {
  const Layout l{cfg.out_dir};
  require_artifact(l.pairs(), "gen-data");
  StageRecorder rec(l, cfg, "train-reward");
  rec.input(l.pairs());
  const auto data = read_dataset(l.pairs());
  const auto rm = fit_reward(cfg, data);
  rec.write(l.reward(), encode_checkpoint(reward_model_checkpoint(rm, {{"stage", detail::ckpt_meta_stage("train-reward", cfg)}})));

  const auto ev = evaluate_reward(rm.net, data, cfg.heldout_classes);
  const auto split = split_by_condition(data.records, cfg.heldout_classes);
  const std::string mode = pref_mode_name(cfg.reward.mode);
  std::string csv = "metric,dimension,mode,value,seed\n";
  for (std::size_t d = 0; d < kNumDims; ++d) {
    const auto cal = tie_calibration(clean_deltas(rm.net, split.validation, d), labels_of(split.validation, d));
    csv += detail::metrics_row("acc_without_ties", kDimNames[d], mode, ev.acc_without_ties[d], cfg.seed);
    csv += detail::metrics_row("acc_with_ties", kDimNames[d], mode, ev.acc_with_ties[d], cfg.seed);
    csv += detail::metrics_row("tie_abs_delta", kDimNames[d], mode, ev.tie_abs_delta[d], cfg.seed);
    csv += detail::metrics_row("tie_tau", kDimNames[d], mode, cal.tau, cfg.seed);
    csv += detail::metrics_row("acc3", kDimNames[d], mode, cal.acc3, cfg.seed);
  }
  rec.write(l.reward_metrics(), csv);

  RelabelStats stats;
  const auto relabeled = relabel_pairs(rm, data, cfg.relabel_weights, &stats);
  bool has_gt = false;
  for (const auto& r : data.records) has_gt = has_gt || r.gt_a.has_value();
  rec.write(l.relabeled(), encode_dataset(relabeled, has_gt));
  rec.param("relabel.kept", std::to_string(stats.kept));
  rec.param("relabel.dropped", std::to_string(stats.dropped));
  rec.param("relabel.flip_fraction", cfgio::fmt_double(stats.flip_fraction()));
  detail::announce(out, "train-reward", rec.finish());
}

inline constexpr std::array<double, 5> kNoisyEvalTimes{0.0, 0.2, 0.5, 0.8, 1.0};

inline void run_train_noisy_reward(const RunConfig& cfg, std::ostream& out) {
  const Layout l{cfg.out_dir};
  require_artifact(l.pairs(), "gen-data");
  StageRecorder rec(l, cfg, "train-noisy-reward");
  rec.input(l.pairs());
  const auto data = read_dataset(l.pairs());
  const auto net = fit_noisy_reward(cfg, data);
  rec.write(l.noisy_reward(), encode_checkpoint(net.to_checkpoint({{"stage", detail::ckpt_meta_stage("train-noisy-reward", cfg)}})));
  std::string csv = "metric,dimension,mode,value,seed\n";
  const auto noise_seed = derive_seed(stage_seed(cfg.seed, "train-noisy-reward"), "eval-noise");
  for (const double t : kNoisyEvalTimes) {
    const auto acc = noisy_accuracy(net, data, cfg.heldout_classes, t, noise_seed);
    for (std::size_t d = 0; d < kNumDims; ++d) {
      csv += detail::metrics_row("acc_without_ties@t=" + cfgio::fmt_double(t), kDimNames[d], "noisy", acc[d], cfg.seed);
    }
  }
  rec.write(l.at("noisy_reward_metrics.csv"), csv);
  detail::announce(out, "train-noisy-reward", rec.finish());
}

inline void run_align_stage(const RunConfig& cfg, std::ostream& out) {
  const Layout l{cfg.out_dir};
  require_artifact(l.relabeled(), "train-reward");
  require_artifact(l.flow(), "train-flow");
  const std::string method = align_method_name(cfg.align.method);
  StageRecorder rec(l, cfg, "align-" + method);
  rec.input(l.flow());
  rec.input(l.relabeled());
  const auto data = read_dataset(l.relabeled());
  if (!data.header.relabeled) throw InputError(l.relabeled() + " is not a reward-relabeled dataset");
  const auto base = VelocityNet::from_checkpoint(load_checkpoint(l.flow()));
  const auto res = run_align(cfg, base, data);
  rec.write(l.aligned(method), encode_checkpoint(res.net.to_checkpoint({{"stage", detail::ckpt_meta_stage("align", cfg)},
                                                                        {"method", method}})));
  rec.write(l.align_curve(method), encode_curve(res.curve));
  rec.param("method", method);
  if (cfg.align.method == AlignMethod::dpo) {
    rec.param("beta", cfgio::fmt_double(cfg.align.dpo.beta));
    rec.param("beta_schedule", beta_schedule_name(cfg.align.dpo.schedule));
  }
  detail::announce(out, "align-" + method, rec.finish());
}

inline void run_sample(const RunConfig& cfg, const Invocation& inv, std::ostream& out) {
  const Layout l{cfg.out_dir};
  const auto [model, producer] = detail::model_path(l, inv.model);
  require_artifact(model, producer);
  if (inv.trace && !inv.guided) throw ConfigError("--trace needs --guided");
  const auto name = !inv.name.empty() ? inv.name : inv.guided ? "guided" : inv.model;
  if (name.find_first_of("/\\") != std::string::npos) throw ConfigError("sample name '" + name + "' must not contain a path separator");

  StageRecorder rec(l, cfg, "sample-" + name);
  rec.input(model);
  const auto net = VelocityNet::from_checkpoint(load_checkpoint(model));
  const auto keys = eval_prompt_keys(cfg);
  const auto schedule = eval_schedule(cfg);
  rec.param("steps", std::to_string(cfg.eval.sample_steps));
  rec.param("cfg_scale", cfgio::fmt_double(cfg.eval.cfg_scale));
  SampleSet set;
  if (inv.guided) {
    require_artifact(l.noisy_reward(), "train-noisy-reward");
    rec.input(l.noisy_reward());
    const auto noisy = NoisyRewardNet::from_checkpoint(load_checkpoint(l.noisy_reward()));
    const auto spec = guidance_spec(cfg);
    std::vector<std::pair<std::size_t, std::vector<GuidanceStep>>> traces;
    set.keys = keys;
    for (std::size_t i = 0; i < keys.size(); ++i) {
      auto g = nrg_sample(net, noisy, spec, schedule, keys[i].cond, keys[i].seed);
      set.samples.push_back(std::move(g.sample));
      if (inv.trace) traces.emplace_back(i, std::move(g.trace));
    }
    if (inv.trace) rec.write(l.trace(name), encode_trace(traces));
    rec.param("guide.weights", format_weights(spec.weights));
    rec.param("guide.w_scale", cfgio::fmt_double(spec.w_scale));
    rec.param("guide.form", guidance_form_name(spec.form));
  } else {
    set = sample_policy(net, keys, schedule, cfg.eval.cfg_scale);
  }
  rec.write(l.samples(name), encode_samples(set));
  detail::announce(out, "sample-" + name, rec.finish());
}

inline void run_eval(const RunConfig& cfg, const Invocation& inv, std::ostream& out) {
  const Layout l{cfg.out_dir};
  if (inv.sample_a.empty()) throw ConfigError("eval needs --a");
  const auto pa = detail::sample_path(l, inv.sample_a);
  const auto pb = detail::sample_path(l, inv.sample_b);
  require_artifact(pa, "sample");
  require_artifact(pb, "sample");
  require_artifact(l.reward(), "train-reward");
  const auto stem_of = [](const std::string& p) {
    auto s = std::filesystem::path(p).stem().string();
    return s.rfind("samples_", 0) == 0 ? s.substr(8) : s;
  };
  const auto a_name = stem_of(pa), b_name = stem_of(pb);
  const auto name = inv.name.empty() ? a_name + "_vs_" + b_name : inv.name;

  StageRecorder rec(l, cfg, "eval-" + name);
  rec.input(pa);
  rec.input(pb);
  rec.input(l.reward());
  const auto a = read_samples(pa);
  const auto b = read_samples(pb);
  const auto rm = reward_model_from_checkpoint(load_checkpoint(l.reward()));

  Report report;
  report.config_hash = hex64(config_hash(cfg));
  append_win_rows(report.rows, "eval", a_name, cfg.seed, win_rate(a, b, rm, cfg.eval.weights));
  append_score_rows(report.rows, "eval", a_name, "gt_mean", cfg.seed, gt_mean(cfg.toy, a));
  append_score_rows(report.rows, "eval", b_name, "gt_mean", cfg.seed, gt_mean(cfg.toy, b));
  const auto paths = report_paths(l.dir.string(), "eval_" + name);
  emit_report(report, paths);
  rec.output(paths.csv);
  rec.output(paths.svg);
  detail::announce(out, "eval-" + name, rec.finish());
}

inline void run_ablate(const RunConfig& cfg, const Invocation& inv, std::ostream& out) {
  const Layout l{cfg.out_dir};
  std::filesystem::create_directories(l.dir);
  auto spec = ablation_spec_from(cfg);
  spec.max_new_cells = inv.max_cells;
  const std::string axis = axis_name(spec.axis);
  StageRecorder rec(l, cfg, "ablate-" + axis);
  const auto outcome = run_ablation(spec, cfg, l.ledger(axis));
  rec.output(l.ledger(axis));
  rec.param("axis", axis);
  rec.param("grid", cfgio::join(spec.grid, ',', [](const std::string& s) { return s; }));
  rec.param("computed", std::to_string(outcome.computed));
  rec.param("reused", std::to_string(outcome.reused));
  rec.param("complete", outcome.complete ? "true" : "false");
  if (outcome.complete) {
    const auto paths = report_paths(l.dir.string(), "ablation_" + axis);
    emit_report(outcome.report, paths);
    rec.output(paths.csv);
    rec.output(paths.svg);
  }
  detail::announce(out, "ablate-" + axis, rec.finish());
}

// Re-renders the JSON summary and SVG of an existing report CSV.
inline void run_report(const Invocation& inv, std::ostream& out) {
  require_artifact(inv.report_csv, "eval or ablate");
  auto report = report_from_csv(read_file(inv.report_csv));
  const std::filesystem::path csv(inv.report_csv);
  const auto json_path = (csv.parent_path() / (csv.stem().string() + ".json")).string();
  report.config_hash = inv.report_hash;
  if (report.config_hash.empty() && std::filesystem::exists(json_path)) {
    try {
      report.config_hash = nlohmann::json::parse(read_file(json_path)).value("config_hash", "");
    } catch (const nlohmann::json::exception&) {
      report.config_hash.clear();
    }
  }
  if (report.config_hash.empty()) report.config_hash = "unknown";
  if (report.empty()) throw InputError("report " + inv.report_csv + " has no rows");
  write_text_atomic(json_path, report_to_json(report, utc_timestamp()).dump(2) + "\n");
  const auto svg = (csv.parent_path() / (csv.stem().string() + ".svg")).string();
  write_text_atomic(svg, report_to_svg(report));
  out << nlohmann::json{{"stage", "report"}, {"status", "ok"}, {"json", json_path}, {"svg", svg}}.dump() << "\n";
}

// ---- entry points ----

inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Preference alignment of rectified-flow models on a toy video world", "flowalign"};
  app.fallthrough();
  app.require_subcommand(0, 1);
  app.set_version_flag("--version", kVersion);

  Invocation inv;
  app.add_option("--config", inv.config_path, "INI or JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", inv.out_dir, "output directory (overrides config and FLOWALIGN_OUT)");
  app.add_option("--set", inv.sets, "override one key, section.key=value (repeatable)");
  app.add_flag("--print-effective", inv.print_effective, "print the effective config");
  detail::bind(&app, inv.overrides, "--seed", "global", "seed", "global seed");

  auto* gen = app.add_subcommand("gen-data", "generate the pretraining corpus and the preference pairs");
  gen->add_flag("--emit-gt", inv.emit_gt, "include ground-truth scores in pairs.jsonl");

  auto* flow = app.add_subcommand("train-flow", "pretrain the conditional velocity field");
  detail::bind(flow, inv.overrides, "--steps", "flow", "steps", "optimizer steps");

  auto* rew = app.add_subcommand("train-reward", "train the reward model and relabel the pairs");
  detail::bind(rew, inv.overrides, "--mode", "reward", "mode", "regression, bt or btt");
  detail::bind(rew, inv.overrides, "--data-fraction", "reward", "data_fraction", "fraction of training pairs");

  auto* noisy = app.add_subcommand("train-noisy-reward", "train the noise-conditioned reward for guidance");

  auto* align = app.add_subcommand("align", "fine-tune the pretrained flow on relabeled pairs");
  detail::bind(align, inv.overrides, "--method", "align", "method", "sft, rwr or dpo");
  detail::bind(align, inv.overrides, "--beta", "align", "beta", "DPO strength");
  detail::bind(align, inv.overrides, "--schedule", "align", "beta_schedule", "constant or quadratic");

  auto* sample = app.add_subcommand("sample", "draw samples for the held-out prompts");
  sample->add_option("--model", inv.model, "base, sft, rwr, dpo or a checkpoint path");
  sample->add_option("--name", inv.name, "output name (samples_<name>.jsonl)");
  sample->add_flag("--guided", inv.guided, "steer with the noisy reward");
  sample->add_flag("--trace", inv.trace, "write the per-step guidance trace");
  detail::bind(sample, inv.overrides, "--weights", "guide", "weights", "guidance weights vq:mq:ta");
  detail::bind(sample, inv.overrides, "--w-scale", "guide", "w_scale", "guidance strength");
  detail::bind(sample, inv.overrides, "--factor-cap", "guide", "factor_cap", "cap on t/(1-t)");
  detail::bind(sample, inv.overrides, "--form", "guide", "form", "shift or mix");
  detail::bind(sample, inv.overrides, "--cfg-scale", "eval", "cfg_scale", "classifier-free guidance scale");
  detail::bind(sample, inv.overrides, "--steps", "eval", "sample_steps", "Euler steps");

  auto* eval = app.add_subcommand("eval", "paired win rates of two sample sets");
  eval->add_option("--a", inv.sample_a, "candidate samples (name or path)")->required();
  eval->add_option("--b", inv.sample_b, "baseline samples (name or path)");
  eval->add_option("--name", inv.name, "report name (eval_<name>.*)");
  detail::bind(eval, inv.overrides, "--weights", "eval", "weights", "scalarization weights vq:mq:ta");

  auto* abl = app.add_subcommand("ablate", "run a resumable grid x seeds ablation");
  detail::bind(abl, inv.overrides, "--axis", "ablate", "axis", "ablation axis");
  detail::bind(abl, inv.overrides, "--grid", "ablate", "grid", "comma-separated settings");
  detail::bind(abl, inv.overrides, "--seeds", "ablate", "seeds", "comma-separated seeds");
  abl->add_option("--max-cells", inv.max_cells, "stop after this many new cells (0 = all)");

  auto* rep = app.add_subcommand("report", "re-render JSON and SVG from a report CSV");
  rep->add_option("--csv", inv.report_csv, "report CSV")->required();
  rep->add_option("--config-hash", inv.report_hash, "config hash to embed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (rep->parsed()) {
      run_report(inv, out);
      return kExitOk;
    }
    const auto cfg = detail::resolve_config(inv);
    if (inv.print_effective) out << print_effective(cfg);
    if (gen->parsed()) run_gen_data(cfg, inv, out);
    else if (flow->parsed()) run_train_flow(cfg, out);
    else if (rew->parsed()) run_train_reward(cfg, out);
    else if (noisy->parsed()) run_train_noisy_reward(cfg, out);
    else if (align->parsed()) run_align_stage(cfg, out);
    else if (sample->parsed()) run_sample(cfg, inv, out);
    else if (eval->parsed()) run_eval(cfg, inv, out);
    else if (abl->parsed()) run_ablate(cfg, inv, out);
    else if (!inv.print_effective) {
      err << app.help();
      return kExitUsage;
    }
    return kExitOk;
  } catch (const std::exception& e) {
    nlohmann::json j = {{"error", {{"kind", detail::error_kind(e)}, {"message", e.what()}}}};
    if (const auto* io = dynamic_cast<const IoError*>(&e)) j["error"]["path"] = io->path();
    err << j.dump() << "\n";
    return kExitFailure;
  }
}

inline int dispatch(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("flowalign");
  for (const auto& a : args) argv.push_back(a.c_str());
  return dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace flowalign::cli
