#pragma once

// Stage functions shared by the CLI, the ablation runner and the tests, the
// on-disk layout of a run directory, and per-stage manifests.
//
// Seeding: every stage draws from derive_seed(global_seed, stage_name), so a
// stage can be re-run alone and still reproduce its artifact bit for bit.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowalign/align.hpp"
#include "flowalign/bench.hpp"
#include "flowalign/checkpoint.hpp"
#include "flowalign/config.hpp"
#include "flowalign/error.hpp"
#include "flowalign/flow.hpp"
#include "flowalign/guide.hpp"
#include "flowalign/report.hpp"
#include "flowalign/reward.hpp"
#include "flowalign/rng.hpp"
#include "flowalign/toyworld.hpp"

namespace flowalign {

inline constexpr const char* kVersion = "0.1.0";

inline std::uint64_t stage_seed(std::uint64_t global_seed, std::string_view stage) {
  return derive_seed(global_seed, stage);
}

// ---- in-memory stages ----

struct GenData {
  std::vector<Trajectory> corpus;
  PrefDataset pairs;
};

inline GenData gen_data(const RunConfig& cfg) {
  const auto s = stage_seed(cfg.seed, "gen-data");
  const KnobDistribution knobs;
  GenData g;
  g.corpus = build_corpus(cfg.toy, knobs, cfg.corpus_size, derive_seed(s, "corpus"));
  const auto cuts = likert_breakpoints(cfg.toy, g.corpus);
  g.pairs = build_pref_dataset(cfg.n_pairs, cfg.toy, knobs, cfg.annotator, cuts, derive_seed(s, "pairs"));
  return g;
}

inline FlowTrainResult pretrain_flow(const RunConfig& cfg, std::span<const Trajectory> corpus) {
  std::vector<Vec> x;
  std::vector<int> c;
  x.reserve(corpus.size());
  c.reserve(corpus.size());
  for (const auto& t : corpus) {
    x.push_back(t.frames);
    c.push_back(t.condition_class);
  }
  auto fc = cfg.flow;
  fc.seed = stage_seed(cfg.seed, "train-flow");
  return train_flow(x, c, cfg.toy.n_classes, fc);
}

inline RewardModel fit_reward(const RunConfig& cfg, const PrefDataset& data) {
  auto rc = cfg.reward;
  rc.validation_classes = cfg.heldout_classes;
  rc.seed = stage_seed(cfg.seed, "train-reward");
  return train_reward(data, rc);
}

inline NoisyRewardNet fit_noisy_reward(const RunConfig& cfg, const PrefDataset& data) {
  auto nc = cfg.noisy;
  nc.validation_classes = cfg.heldout_classes;
  nc.seed = stage_seed(cfg.seed, "train-noisy-reward");
  return train_noisy_reward(data, nc);
}

inline AlignResult run_align(const RunConfig& cfg, const VelocityNet& base, const PrefDataset& relabeled) {
  auto ac = cfg.align;
  ac.heldout_classes = cfg.heldout_classes;
  ac.seed = stage_seed(cfg.seed, "align");
  return align_train(base, relabeled, ac);
}

inline std::vector<SampleKey> eval_prompt_keys(const RunConfig& cfg) {
  return eval_keys(cfg.heldout_classes, cfg.eval.n_prompts, cfg.eval.seeds_per_prompt, stage_seed(cfg.seed, "eval"));
}

inline FlowSchedule eval_schedule(const RunConfig& cfg) { return FlowSchedule::uniform(cfg.eval.sample_steps); }

// Guided sampling shares the evaluation CFG scale so that w_scale = 0
// reproduces unguided samples exactly.
inline GuidanceSpec guidance_spec(const RunConfig& cfg) {
  auto g = cfg.guide;
  g.cfg_scale = cfg.eval.cfg_scale;
  g.validate();
  return g;
}

// Mean toy ground-truth score of a sample set, per dimension.
inline Scores gt_mean(const ToyConfig& toy, const SampleSet& s) {
  if (s.size() == 0) throw InputError("ground-truth mean of an empty sample set");
  Scores m{};
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto g = gt_rewards(toy, Trajectory{s.samples[i], s.keys[i].cond});
    for (std::size_t d = 0; d < kNumDims; ++d) m[d] += g[d];
  }
  for (auto& v : m) v /= static_cast<double>(s.size());
  return m;
}

// Report rows for a paired win-rate comparison.
inline void append_win_rows(std::vector<ReportRow>& rows, const std::string& axis, const std::string& setting,
                            std::uint64_t seed, const WinRateResult& wr) {
  for (std::size_t d = 0; d < kNumDims; ++d) {
    rows.push_back({axis, setting, "win_rate", kDimNames[d], seed, wr.per_dim[d].value, wr.per_dim[d].ci_low,
                    wr.per_dim[d].ci_high});
  }
  rows.push_back({axis, setting, "win_rate", "overall", seed, wr.overall.value, wr.overall.ci_low, wr.overall.ci_high});
}

inline void append_score_rows(std::vector<ReportRow>& rows, const std::string& axis, const std::string& setting,
                              const std::string& metric, std::uint64_t seed, const Scores& s) {
  for (std::size_t d = 0; d < kNumDims; ++d) rows.push_back({axis, setting, metric, kDimNames[d], seed, s[d], s[d], s[d]});
}

// Held-out preference metrics of a clean reward model.
struct RewardEval {
  Scores acc_without_ties{};
  Scores acc_with_ties{};
  Scores tie_abs_delta{};  // mean |r(A) - r(B)| over tie-labelled pairs; NaN when none
};

inline RewardEval evaluate_reward(const RewardNet& net, const PrefDataset& data, const std::vector<int>& heldout) {
  const auto split = split_by_condition(data.records, heldout);
  if (split.validation.empty()) throw InputError("no held-out pairs to evaluate on");
  RewardEval ev;
  for (std::size_t d = 0; d < kNumDims; ++d) {
    const auto deltas = clean_deltas(net, split.validation, d);
    const auto labels = labels_of(split.validation, d);
    ev.acc_without_ties[d] = pairwise_accuracy(deltas, labels, AccuracyMode::without_ties);
    ev.acc_with_ties[d] = pairwise_accuracy(deltas, labels, AccuracyMode::with_ties);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      if (labels[i] == Label::Tie) {
        sum += std::abs(deltas[i]);
        ++n;
      }
    }
    ev.tie_abs_delta[d] = n ? sum / static_cast<double>(n) : std::nan("");
  }
  return ev;
}

// Ties-excluded held-out accuracy of the noisy reward at a fixed t.
inline Scores noisy_accuracy(const NoisyRewardNet& net, const PrefDataset& data, const std::vector<int>& heldout,
                             double t, std::uint64_t seed) {
  const auto split = split_by_condition(data.records, heldout);
  if (split.validation.empty()) throw InputError("no held-out pairs to evaluate on");
  Scores acc{};
  for (std::size_t d = 0; d < kNumDims; ++d) {
    acc[d] = pairwise_accuracy(noisy_deltas(net, split.validation, d, t, seed), labels_of(split.validation, d),
                               AccuracyMode::without_ties);
  }
  return acc;
}

// ---- checkpoints with metadata ----

inline Checkpoint reward_model_checkpoint(const RewardModel& rm, std::map<std::string, std::string> meta = {}) {
  for (std::size_t d = 0; d < kNumDims; ++d) {
    meta[std::string("stats.mean.") + kDimNames[d]] = cfgio::fmt_double(rm.stats.mean[d]);
    meta[std::string("stats.std.") + kDimNames[d]] = cfgio::fmt_double(rm.stats.stddev[d]);
  }
  return rm.net.to_checkpoint(std::move(meta));
}

inline RewardModel reward_model_from_checkpoint(const Checkpoint& ckpt) {
  RewardModel rm{RewardNet::from_checkpoint(ckpt), {}};
  for (std::size_t d = 0; d < kNumDims; ++d) {
    const auto km = std::string("stats.mean.") + kDimNames[d];
    const auto ks = std::string("stats.std.") + kDimNames[d];
    if (!ckpt.meta.count(km) || !ckpt.meta.count(ks)) throw InputError("reward checkpoint lacks score statistics");
    rm.stats.mean[d] = cfgio::parse_double(km, ckpt.meta.at(km));
    rm.stats.stddev[d] = cfgio::parse_double(ks, ckpt.meta.at(ks));
  }
  return rm;
}

// ---- sample dumps: one {"condition", "seed", "frames"} object per line ----

inline std::string encode_samples(const SampleSet& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    nlohmann::json j;
    j["condition"] = s.keys[i].cond;
    j["seed"] = s.keys[i].seed;
    j["frames"] = s.samples[i];
    out += j.dump() + "\n";
  }
  return out;
}

inline SampleSet read_samples(const std::string& path) {
  const auto text = read_file(path);
  SampleSet s;
  std::size_t lineno = 0, start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      s.keys.push_back({j.at("condition").get<int>(), j.at("seed").get<std::uint64_t>()});
      s.samples.push_back(j.at("frames").get<Vec>());
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (s.size() == 0) throw InputError("sample file " + path + " is empty");
  return s;
}

inline std::string encode_curve(std::span<const CurveRow> curve) {
  std::string out = "step,loss,grad_norm\n";
  for (const auto& r : curve) {
    out += std::to_string(r.step) + "," + cfgio::fmt_double(r.loss) + "," + cfgio::fmt_double(r.grad_norm) + "\n";
  }
  return out;
}

inline std::string encode_trace(const std::vector<std::pair<std::size_t, std::vector<GuidanceStep>>>& traces) {
  std::string out = "sample,t,reward,grad_norm,factor\n";
  for (const auto& [i, tr] : traces) {
    for (const auto& s : tr) {
      out += std::to_string(i) + "," + cfgio::fmt_double(s.t) + "," + cfgio::fmt_double(s.reward) + "," +
             cfgio::fmt_double(s.grad_norm) + "," + cfgio::fmt_double(s.factor) + "\n";
    }
  }
  return out;
}

// ---- run directory layout ----

struct Layout {
  std::filesystem::path dir;

  std::string at(const std::string& name) const { return (dir / name).string(); }
  std::string corpus() const { return at("corpus.jsonl"); }
  std::string pairs() const { return at("pairs.jsonl"); }
  std::string flow() const { return at("flow.ckpt"); }
  std::string flow_curve() const { return at("flow_curve.csv"); }
  std::string reward() const { return at("reward.ckpt"); }
  std::string reward_metrics() const { return at("reward_metrics.csv"); }
  std::string relabeled() const { return at("pairs_relabeled.jsonl"); }
  std::string noisy_reward() const { return at("noisy_reward.ckpt"); }
  std::string aligned(const std::string& method) const { return at("aligned_" + method + ".ckpt"); }
  std::string align_curve(const std::string& method) const { return at("align_" + method + "_curve.csv"); }
  std::string samples(const std::string& name) const { return at("samples_" + name + ".jsonl"); }
  std::string trace(const std::string& name) const { return at("trace_" + name + ".csv"); }
  std::string manifest(const std::string& stage) const { return (dir / "manifests" / (stage + ".json")).string(); }
  std::string ledger(const std::string& axis) const { return at("ablation_" + axis + ".ledger.jsonl"); }
};

inline std::string file_checksum(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

inline void require_artifact(const std::string& path, const std::string& producer) {
  if (!std::filesystem::exists(path)) {
    throw InputError("missing artifact " + path + " (produced by '" + producer + "')");
  }
}

// Everything needed to reproduce one stage's outputs.  Paths are stored
// relative to the run directory so two run directories compare equal.
struct Manifest {
  std::string stage;
  std::string config_hash;
  std::uint64_t global_seed = 0;
  std::uint64_t stage_seed = 0;
  std::map<std::string, std::string> params;
  std::map<std::string, std::string> inputs;   // path -> checksum
  std::map<std::string, std::string> outputs;  // path -> checksum
};

inline std::string relative_name(const Layout& l, const std::string& path) {
  const auto rel = std::filesystem::path(path).lexically_relative(l.dir);
  return rel.empty() || rel.string().rfind("..", 0) == 0 ? path : rel.generic_string();
}

inline nlohmann::json manifest_json(const Manifest& m) {
  nlohmann::json j;
  j["stage"] = m.stage;
  j["config_hash"] = m.config_hash;
  j["seeds"] = {{"global", m.global_seed}, {"stage", m.stage_seed}};
  j["params"] = m.params;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["versions"] = {{"flowalign", kVersion},
                   {"dataset_schema", 1},
                   {"checkpoint_format", kCheckpointVersion},
                   {"compiler", __VERSION__}};
  return j;
}

class StageRecorder {
 public:
  StageRecorder(const Layout& layout, const RunConfig& cfg, std::string stage)
      : layout_(layout), m_{stage, hex64(config_hash(cfg)), cfg.seed, stage_seed(cfg.seed, stage), {}, {}, {}} {}

  void input(const std::string& path) { m_.inputs[relative_name(layout_, path)] = file_checksum(path); }
  void output(const std::string& path) { m_.outputs[relative_name(layout_, path)] = file_checksum(path); }
  void param(const std::string& k, const std::string& v) { m_.params[k] = v; }

  // Writes a text artifact atomically and records it.
  void write(const std::string& path, const std::string& bytes) {
    write_text_atomic(path, bytes);
    output(path);
  }

  const Manifest& manifest() const { return m_; }

  std::string finish() {
    const auto path = layout_.manifest(m_.stage);
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    write_text_atomic(path, manifest_json(m_).dump(2) + "\n");
    return path;
  }

 private:
  const Layout& layout_;
  Manifest m_;
};

// ---- lazily computed per-seed artifacts for experiments ----

// Holds one seed's data, reward models, pretrained flow and baseline samples
// so that several experiment cells can share them.  Not thread-safe.
class SeedLab {
 public:
  explicit SeedLab(RunConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.sync();
    cfg_.validate();
  }

  const RunConfig& config() const { return cfg_; }

  const GenData& data() {
    if (!data_) data_ = gen_data(cfg_);
    return *data_;
  }

  const RewardModel& reward(PrefMode mode, double fraction) {
    const auto key = std::string(pref_mode_name(mode)) + "@" + cfgio::fmt_double(fraction);
    auto it = rewards_.find(key);
    if (it == rewards_.end()) {
      auto c = cfg_;
      c.reward.mode = mode;
      c.reward.data_fraction = fraction;
      it = rewards_.emplace(key, fit_reward(c, data().pairs)).first;
    }
    return it->second;
  }

  const RewardModel& reward() { return reward(cfg_.reward.mode, cfg_.reward.data_fraction); }

  const PrefDataset& relabeled() {
    if (!relabeled_) relabeled_ = relabel_pairs(reward(), data().pairs, cfg_.relabel_weights, &relabel_stats_);
    return *relabeled_;
  }

  const RelabelStats& relabel_stats() {
    relabeled();
    return relabel_stats_;
  }

  const FlowTrainResult& flow() {
    if (!flow_) flow_ = pretrain_flow(cfg_, data().corpus);
    return *flow_;
  }

  const NoisyRewardNet& noisy() {
    if (!noisy_) noisy_ = fit_noisy_reward(cfg_, data().pairs);
    return *noisy_;
  }

  const std::vector<SampleKey>& keys() {
    if (keys_.empty()) keys_ = eval_prompt_keys(cfg_);
    return keys_;
  }

  const SampleSet& base_samples() {
    if (!base_) base_ = sample_policy(flow().net, keys(), eval_schedule(cfg_), cfg_.eval.cfg_scale);
    return *base_;
  }

  AlignResult align(const AlignConfig& ac) {
    auto c = cfg_;
    c.align = ac;
    return run_align(c, flow().net, relabeled());
  }

  SampleSet policy_samples(const VelocityNet& net) {
    return sample_policy(net, keys(), eval_schedule(cfg_), cfg_.eval.cfg_scale);
  }

  SampleSet guided_samples(const GuidanceSpec& spec) {
    return sample_guided(flow().net, noisy(), spec, keys(), eval_schedule(cfg_));
  }

  WinRateResult versus_base(const SampleSet& s) { return win_rate(s, base_samples(), reward(), cfg_.eval.weights); }

 private:
  RunConfig cfg_;
  std::optional<GenData> data_;
  std::map<std::string, RewardModel> rewards_;
  std::optional<PrefDataset> relabeled_;
  RelabelStats relabel_stats_{};
  std::optional<FlowTrainResult> flow_;
  std::optional<NoisyRewardNet> noisy_;
  std::vector<SampleKey> keys_;
  std::optional<SampleSet> base_;
};

}  // namespace flowalign
