#pragma once

// Grid x seeds ablations over one axis.  Each completed (setting, seed) cell
// is appended to a JSONL ledger rewritten by atomic rename, so an interrupted
// run resumes where it stopped and ends with the same report.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowalign/config.hpp"
#include "flowalign/error.hpp"
#include "flowalign/pipeline.hpp"
#include "flowalign/report.hpp"

namespace flowalign {

enum class AblationAxis : std::uint8_t { beta_schedule, beta_value, rm_mode, data_fraction, guidance_weights, w_scale };

inline const char* axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::beta_schedule: return "beta_schedule";
    case AblationAxis::beta_value: return "beta_value";
    case AblationAxis::rm_mode: return "rm_mode";
    case AblationAxis::data_fraction: return "data_fraction";
    case AblationAxis::guidance_weights: return "guidance_weights";
    case AblationAxis::w_scale: return "w_scale";
  }
  return "?";
}

inline AblationAxis parse_axis(const std::string& s) {
  for (auto a : {AblationAxis::beta_schedule, AblationAxis::beta_value, AblationAxis::rm_mode,
                 AblationAxis::data_fraction, AblationAxis::guidance_weights, AblationAxis::w_scale}) {
    if (s == axis_name(a)) return a;
  }
  throw ConfigError("unknown ablation axis '" + s + "'");
}

struct AblationSpec {
  AblationAxis axis = AblationAxis::beta_schedule;
  std::vector<std::string> grid;
  std::vector<std::uint64_t> seeds;
  std::size_t max_new_cells = 0;  // stop after this many freshly computed cells; 0 = no limit

  void validate() const {
    if (grid.empty()) throw ConfigError("ablation grid is empty");
    if (seeds.empty()) throw ConfigError("ablation seed list is empty");
  }
};

inline AblationSpec ablation_spec_from(const RunConfig& cfg) {
  return {parse_axis(cfg.ablate.axis), cfg.ablate.grid, cfg.ablate.seeds, 0};
}

namespace detail {

// "schedule" or "schedule@beta"; "mode" or "mode@fraction".
inline std::pair<std::string, std::optional<double>> split_at(const std::string& s) {
  const auto at = s.find('@');
  if (at == std::string::npos) return {s, std::nullopt};
  return {s.substr(0, at), cfgio::parse_double("ablation setting", s.substr(at + 1))};
}

// Applies one grid setting to a copy of the base config.
inline RunConfig apply_setting(const RunConfig& base, AblationAxis axis, const std::string& setting) {
  RunConfig c = base;
  switch (axis) {
    case AblationAxis::beta_schedule: {
      const auto [sched, beta] = split_at(setting);
      c.align.dpo.schedule = parse_beta_schedule(sched);
      if (beta) c.align.dpo.beta = *beta;
      break;
    }
    case AblationAxis::beta_value: c.align.dpo.beta = cfgio::parse_double("beta_value", setting); break;
    case AblationAxis::rm_mode: {
      const auto [mode, frac] = split_at(setting);
      c.reward.mode = parse_pref_mode(mode);
      if (frac) c.reward.data_fraction = *frac;
      break;
    }
    case AblationAxis::data_fraction:
      c.reward.data_fraction = cfgio::parse_double("data_fraction", setting);
      break;
    case AblationAxis::guidance_weights: c.guide.weights = parse_weights(setting); break;
    case AblationAxis::w_scale: c.guide.w_scale = cfgio::parse_double("w_scale", setting); break;
  }
  c.validate();
  return c;
}

inline void check_consistency(const RunConfig& base, AblationAxis axis) {
  const bool beta_axis = axis == AblationAxis::beta_schedule || axis == AblationAxis::beta_value;
  if (beta_axis && base.align.method != AlignMethod::dpo) {
    throw ConfigError(std::string("axis ") + axis_name(axis) + " needs align.method = dpo");
  }
  if (axis == AblationAxis::guidance_weights && base.guide.w_scale == 0.0) {
    throw ConfigError("axis guidance_weights is a no-op with guide.w_scale = 0");
  }
}

inline std::vector<ReportRow> run_cell(SeedLab& lab, AblationAxis axis, const std::string& setting,
                                       std::uint64_t seed) {
  const auto c = apply_setting(lab.config(), axis, setting);
  const std::string ax = axis_name(axis);
  std::vector<ReportRow> rows;
  switch (axis) {
    case AblationAxis::beta_schedule:
    case AblationAxis::beta_value: {
      const auto aligned = lab.align(c.align);
      const auto samples = lab.policy_samples(aligned.net);
      append_win_rows(rows, ax, setting, seed, lab.versus_base(samples));
      append_score_rows(rows, ax, setting, "gt_mean", seed, gt_mean(c.toy, samples));
      break;
    }
    case AblationAxis::rm_mode:
    case AblationAxis::data_fraction: {
      const auto& rm = lab.reward(c.reward.mode, c.reward.data_fraction);
      const auto ev = evaluate_reward(rm.net, lab.data().pairs, c.heldout_classes);
      append_score_rows(rows, ax, setting, "acc_without_ties", seed, ev.acc_without_ties);
      append_score_rows(rows, ax, setting, "acc_with_ties", seed, ev.acc_with_ties);
      append_score_rows(rows, ax, setting, "tie_abs_delta", seed, ev.tie_abs_delta);
      break;
    }
    case AblationAxis::guidance_weights:
    case AblationAxis::w_scale: {
      const auto samples = lab.guided_samples(guidance_spec(c));
      append_win_rows(rows, ax, setting, seed, lab.versus_base(samples));
      Scores rm_mean{};
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto s = lab.reward().net.scores(samples.samples[i], samples.keys[i].cond);
        for (std::size_t d = 0; d < kNumDims; ++d) rm_mean[d] += s[d] / static_cast<double>(samples.size());
      }
      append_score_rows(rows, ax, setting, "rm_mean", seed, rm_mean);
      append_score_rows(rows, ax, setting, "gt_mean", seed, gt_mean(c.toy, samples));
      break;
    }
  }
  return rows;
}

inline nlohmann::json row_json(const ReportRow& r) {
  return {{"axis", r.axis},         {"setting", r.setting}, {"metric", r.metric}, {"dimension", r.dimension},
          {"seed", r.seed},         {"value", r.value},     {"ci_low", r.ci_low}, {"ci_high", r.ci_high}};
}

inline ReportRow row_from_json(const nlohmann::json& j) {
  auto num = [](const nlohmann::json& v) { return v.is_null() ? std::nan("") : v.get<double>(); };
  return {j.at("axis").get<std::string>(), j.at("setting").get<std::string>(), j.at("metric").get<std::string>(),
          j.at("dimension").get<std::string>(), j.at("seed").get<std::uint64_t>(), num(j.at("value")),
          num(j.at("ci_low")), num(j.at("ci_high"))};
}

inline std::string cell_key(const std::string& setting, std::uint64_t seed) {
  return setting + "|" + std::to_string(seed);
}

}  // namespace detail

struct AblationLedger {
  nlohmann::json header;
  std::map<std::string, std::vector<ReportRow>> cells;
  std::vector<std::string> order;  // completion order, kept so rewrites are stable

  static AblationLedger load(const std::string& path) {
    AblationLedger l;
    if (!std::filesystem::exists(path)) return l;
    const auto text = read_file(path);
    std::size_t start = 0, lineno = 0;
    while (start < text.size()) {
      auto end = text.find('\n', start);
      if (end == std::string::npos) end = text.size();
      const auto line = text.substr(start, end - start);
      start = end + 1;
      ++lineno;
      if (line.empty()) continue;
      try {
        auto j = nlohmann::json::parse(line);
        if (lineno == 1) {
          l.header = std::move(j);
          continue;
        }
        std::vector<ReportRow> rows;
        for (const auto& r : j.at("rows")) rows.push_back(detail::row_from_json(r));
        const auto key = j.at("cell").get<std::string>();
        if (!l.cells.count(key)) l.order.push_back(key);
        l.cells[key] = std::move(rows);
      } catch (const nlohmann::json::exception& e) {
        throw IoError(path, "ledger line " + std::to_string(lineno) + ": " + e.what());
      }
    }
    return l;
  }

  std::string encode() const {
    std::string out = header.dump() + "\n";
    for (const auto& key : order) {
      nlohmann::json j;
      j["cell"] = key;
      j["rows"] = nlohmann::json::array();
      for (const auto& r : cells.at(key)) j["rows"].push_back(detail::row_json(r));
      out += j.dump() + "\n";
    }
    return out;
  }
};

struct AblationOutcome {
  Report report;
  std::size_t computed = 0;  // cells run in this call
  std::size_t reused = 0;    // cells taken from the ledger
  bool complete = false;
};

// Runs every (setting, seed) cell not already in the ledger.  Cells sharing a
// seed share that seed's data, reward model and pretrained flow, so settings
// are compared on identical inputs.
inline AblationOutcome run_ablation(const AblationSpec& spec, const RunConfig& base, const std::string& ledger_path) {
  spec.validate();
  RunConfig b = base;
  b.sync();
  b.validate();
  detail::check_consistency(b, spec.axis);
  for (const auto& s : spec.grid) detail::apply_setting(b, spec.axis, s);

  nlohmann::json header = {{"axis", axis_name(spec.axis)},
                           {"config_hash", hex64(config_hash(b))},
                           {"grid", spec.grid},
                           {"seeds", spec.seeds}};
  auto ledger = AblationLedger::load(ledger_path);
  if (!ledger.header.is_null() && ledger.header != header) {
    throw ConfigError("ledger " + ledger_path + " belongs to a different ablation (axis, grid, seeds or config differ)");
  }
  ledger.header = header;

  AblationOutcome out;
  out.report.config_hash = hex64(config_hash(b));
  bool stopped = false;
  for (const auto seed : spec.seeds) {
    std::unique_ptr<SeedLab> lab;
    for (const auto& setting : spec.grid) {
      const auto key = detail::cell_key(setting, seed);
      if (ledger.cells.count(key)) {
        ++out.reused;
        continue;
      }
      if (spec.max_new_cells != 0 && out.computed >= spec.max_new_cells) {
        stopped = true;
        break;
      }
      if (!lab) {
        RunConfig c = b;
        c.seed = seed;
        lab = std::make_unique<SeedLab>(c);
      }
      ledger.cells[key] = detail::run_cell(*lab, spec.axis, setting, seed);
      ledger.order.push_back(key);
      write_text_atomic(ledger_path, ledger.encode());
      ++out.computed;
    }
    if (stopped) break;
  }
  // Rows in grid-major, seed-minor order regardless of completion order.
  out.complete = true;
  for (const auto& setting : spec.grid) {
    for (const auto seed : spec.seeds) {
      const auto it = ledger.cells.find(detail::cell_key(setting, seed));
      if (it == ledger.cells.end()) {
        out.complete = false;
        continue;
      }
      out.report.rows.insert(out.report.rows.end(), it->second.begin(), it->second.end());
    }
  }
  return out;
}

}  // namespace flowalign
