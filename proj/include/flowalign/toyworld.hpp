#pragma once

// Synthetic "video" domain: a trajectory is T frames on the plane that should
// trace a smooth arc on the unit circle ending at the angle of its condition
// class.  Three closed-form scores stand in for visual quality (radial
// fidelity), motion quality (smoothness) and text alignment (end angle).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowalign/error.hpp"
#include "flowalign/rng.hpp"

namespace flowalign {

inline constexpr std::size_t kNumDims = 3;
enum Dim : std::size_t { kVq = 0, kMq = 1, kTa = 2 };
inline constexpr std::array<const char*, kNumDims> kDimNames{"vq", "mq", "ta"};

using Scores = std::array<double, kNumDims>;

struct ToyConfig {
  std::size_t frames = 16;
  std::size_t dims = 2;
  std::size_t n_classes = 8;
  double arc_span = 0.4;  // radians swept by a perfect trajectory

  std::size_t sample_dim() const { return frames * dims; }

  void validate() const {
    if (frames < 3) throw ConfigError("trajectories need at least 3 frames");
    if (dims != 2) throw ConfigError("the toy domain is planar: dims must be 2");
    if (n_classes < 1) throw ConfigError("need at least one condition class");
    if (!(arc_span >= 0.0)) throw ConfigError("arc_span must be non-negative");
  }

  double target_angle(int cls) const {
    return 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(n_classes);
  }
};

struct Trajectory {
  std::vector<double> frames;  // frame-major, frames * dims
  int condition_class = 0;

  bool operator==(const Trajectory&) const = default;
};

struct QualityKnobs {
  double radial_noise = 0.0;
  double jitter = 0.0;
  double angle_error = 0.0;
};

// Wraps to (-pi, pi].
inline double wrap_angle(double a) {
  const double two_pi = 2.0 * std::numbers::pi;
  a = std::fmod(a + std::numbers::pi, two_pi);
  if (a < 0.0) a += two_pi;
  a -= std::numbers::pi;
  return a == -std::numbers::pi ? std::numbers::pi : a;
}

// Knob semantics:
//   radial_noise  every frame sits at radius 1 + s * radial_noise, s a random sign
//                 (always outward when radial_noise >= 1)
//   jitter        iid N(0, jitter^2) angular noise on all frames but the last
//   angle_error   the arc ends at target +/- angle_error (random sign)
// The rng stream is consumed identically for every knob setting.
inline Trajectory sample_trajectory(const ToyConfig& cfg, int cls, const QualityKnobs& knobs, Rng& rng) {
  if (knobs.radial_noise < 0.0 || knobs.jitter < 0.0 || knobs.angle_error < 0.0) {
    throw ConfigError("quality knobs must be non-negative");
  }
  const double end_sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
  const double radial_sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
  const double end_angle = cfg.target_angle(cls) + end_sign * knobs.angle_error;
  const double radius = 1.0 + (knobs.radial_noise >= 1.0 ? 1.0 : radial_sign) * knobs.radial_noise;
  Trajectory traj;
  traj.condition_class = cls;
  traj.frames.resize(cfg.sample_dim());
  const double last = static_cast<double>(cfg.frames - 1);
  for (std::size_t i = 0; i < cfg.frames; ++i) {
    double phi = end_angle - cfg.arc_span * (last - static_cast<double>(i)) / last;
    const double z = standard_normal(rng);
    if (i + 1 < cfg.frames) phi += knobs.jitter * z;
    traj.frames[2 * i] = radius * std::cos(phi);
    traj.frames[2 * i + 1] = radius * std::sin(phi);
  }
  return traj;
}

using GtReward = Scores;

inline GtReward gt_rewards(const ToyConfig& cfg, const Trajectory& traj) {
  require_same_size(traj.frames.size(), cfg.sample_dim(), "trajectory size");
  const auto& f = traj.frames;
  const std::size_t n = cfg.frames;
  double vq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = std::hypot(f[2 * i], f[2 * i + 1]) - 1.0;
    vq += dev * dev;
  }
  double mq = 0.0;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double ax = f[2 * (i + 1)] - 2.0 * f[2 * i] + f[2 * (i - 1)];
    const double ay = f[2 * (i + 1) + 1] - 2.0 * f[2 * i + 1] + f[2 * (i - 1) + 1];
    mq += ax * ax + ay * ay;
  }
  const double end = std::atan2(f[2 * (n - 1) + 1], f[2 * (n - 1)]);
  const double err = wrap_angle(end - cfg.target_angle(traj.condition_class));
  return {-vq / static_cast<double>(n), -mq / static_cast<double>(n - 2), -err * err};
}

enum class Label : std::uint8_t { AWins = 0, BWins = 1, Tie = 2 };

inline const char* label_name(Label l) {
  switch (l) {
    case Label::AWins: return "A";
    case Label::BWins: return "B";
    case Label::Tie: return "tie";
  }
  return "?";
}

inline Label parse_label(const std::string& s) {
  if (s == "A") return Label::AWins;
  if (s == "B") return Label::BWins;
  if (s == "tie") return Label::Tie;
  throw InputError("unknown preference label '" + s + "'");
}

inline Label mirror(Label l) {
  return l == Label::AWins ? Label::BWins : (l == Label::BWins ? Label::AWins : Label::Tie);
}

struct AnnotatorModel {
  double tie_band = 0.05;
  double flip_temperature = 0.1;

  void validate() const {
    if (!(tie_band >= 0.0)) throw ConfigError("tie_band must be >= 0");
    if (!(flip_temperature > 0.0)) throw ConfigError("flip_temperature must be > 0");
  }
};

// Per dimension, four ascending cut points mapping a score to 1..5.
using LikertBreakpoints = std::array<std::array<double, 4>, kNumDims>;

inline int likert_score(double score, const std::array<double, 4>& cuts) {
  int level = 1;
  for (double c : cuts) {
    if (score >= c) ++level;
  }
  return std::clamp(level, 1, 5);
}

struct Annotation {
  std::array<Label, kNumDims> labels{};
  std::array<std::array<int, 2>, kNumDims> likert{};  // [dim][side]
};

inline double logistic(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Annotation annotate_pair(const GtReward& a, const GtReward& b, const AnnotatorModel& annotator,
                                const LikertBreakpoints& cuts, Rng& rng) {
  annotator.validate();
  Annotation out;
  for (std::size_t d = 0; d < kNumDims; ++d) {
    const double delta = a[d] - b[d];
    const double u = uniform01(rng);
    if (std::abs(delta) <= annotator.tie_band) {
      out.labels[d] = Label::Tie;
    } else {
      out.labels[d] = u < logistic(delta / annotator.flip_temperature) ? Label::AWins : Label::BWins;
    }
    out.likert[d] = {likert_score(a[d], cuts[d]), likert_score(b[d], cuts[d])};
  }
  return out;
}

// Quality spectrum: each knob independently picks a tier (tier 0 is perfect)
// and is then spread by a uniform factor in [1 - spread, 1 + spread].
struct KnobDistribution {
  std::array<double, 5> tier_probs{0.3, 0.175, 0.175, 0.175, 0.175};
  std::array<double, 5> radial_levels{0.0, 0.3, 0.6, 0.9, 1.2};
  std::array<double, 5> jitter_levels{0.0, 0.08, 0.16, 0.24, 0.32};
  std::array<double, 5> angle_levels{0.0, 0.35, 0.7, 1.05, 1.4};
  double spread = 0.2;

  QualityKnobs draw(Rng& rng) const {
    std::discrete_distribution<int> tier(tier_probs.begin(), tier_probs.end());
    auto one = [&](const std::array<double, 5>& levels) {
      const double base = levels[static_cast<std::size_t>(tier(rng))];
      const double f = 1.0 + spread * (2.0 * uniform01(rng) - 1.0);
      return base * f;
    };
    QualityKnobs k;
    k.radial_noise = one(radial_levels);
    k.jitter = one(jitter_levels);
    k.angle_error = one(angle_levels);
    return k;
  }
};

inline std::vector<Trajectory> build_corpus(const ToyConfig& cfg, const KnobDistribution& knobs, std::size_t n,
                                            std::uint64_t seed) {
  cfg.validate();
  std::vector<Trajectory> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(derive_seed(seed, i));
    const int cls = std::uniform_int_distribution<int>(0, static_cast<int>(cfg.n_classes) - 1)(rng);
    out.push_back(sample_trajectory(cfg, cls, knobs.draw(rng), rng));
  }
  return out;
}

// Quintile cut points of each dimension's score over a corpus.
inline LikertBreakpoints likert_breakpoints(const ToyConfig& cfg, std::span<const Trajectory> corpus) {
  if (corpus.empty()) throw InputError("cannot derive Likert breakpoints from an empty corpus");
  LikertBreakpoints cuts{};
  for (std::size_t d = 0; d < kNumDims; ++d) {
    std::vector<double> s;
    s.reserve(corpus.size());
    for (const auto& t : corpus) s.push_back(gt_rewards(cfg, t)[d]);
    std::sort(s.begin(), s.end());
    for (std::size_t q = 0; q < 4; ++q) {
      const auto idx = static_cast<std::size_t>(std::floor(static_cast<double>((q + 1) * s.size()) / 5.0));
      cuts[d][q] = s[std::min(idx, s.size() - 1)];
    }
  }
  return cuts;
}

struct RelabelInfo {
  bool chosen_is_a = true;
  double overall_a = 0.0;
  double overall_b = 0.0;
  std::array<Label, kNumDims> orig_labels{};

  bool operator==(const RelabelInfo&) const = default;
};

struct PreferenceRecord {
  int condition_class = 0;
  Trajectory sample_a;
  Trajectory sample_b;
  std::array<Label, kNumDims> labels{};
  std::array<std::array<int, 2>, kNumDims> likert{};
  std::optional<GtReward> gt_a;
  std::optional<GtReward> gt_b;
  std::optional<RelabelInfo> relabel;

  bool operator==(const PreferenceRecord&) const = default;
};

struct DatasetHeader {
  int schema_version = 1;
  ToyConfig toy;
  AnnotatorModel annotator;
  LikertBreakpoints breakpoints{};
  bool relabeled = false;
};

struct PrefDataset {
  DatasetHeader header;
  std::vector<PreferenceRecord> records;
};

inline PrefDataset build_pref_dataset(std::size_t n_pairs, const ToyConfig& cfg, const KnobDistribution& knobs,
                                      const AnnotatorModel& annotator, const LikertBreakpoints& cuts,
                                      std::uint64_t seed, bool keep_gt = true) {
  if (n_pairs < 1) throw InputError("preference dataset needs at least one pair");
  cfg.validate();
  annotator.validate();
  PrefDataset ds;
  ds.header.toy = cfg;
  ds.header.annotator = annotator;
  ds.header.breakpoints = cuts;
  ds.records.reserve(n_pairs);
  for (std::size_t i = 0; i < n_pairs; ++i) {
    Rng rng = make_rng(derive_seed(seed, i));
    PreferenceRecord rec;
    rec.condition_class = std::uniform_int_distribution<int>(0, static_cast<int>(cfg.n_classes) - 1)(rng);
    rec.sample_a = sample_trajectory(cfg, rec.condition_class, knobs.draw(rng), rng);
    rec.sample_b = sample_trajectory(cfg, rec.condition_class, knobs.draw(rng), rng);
    const auto ga = gt_rewards(cfg, rec.sample_a);
    const auto gb = gt_rewards(cfg, rec.sample_b);
    const auto ann = annotate_pair(ga, gb, annotator, cuts, rng);
    rec.labels = ann.labels;
    rec.likert = ann.likert;
    if (keep_gt) {
      rec.gt_a = ga;
      rec.gt_b = gb;
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

// ---- line-delimited JSON serialization ----

namespace detail {

inline nlohmann::json labels_json(const std::array<Label, kNumDims>& labels) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t d = 0; d < kNumDims; ++d) j[kDimNames[d]] = label_name(labels[d]);
  return j;
}

inline std::array<Label, kNumDims> labels_from_json(const nlohmann::json& j) {
  std::array<Label, kNumDims> out{};
  for (std::size_t d = 0; d < kNumDims; ++d) out[d] = parse_label(j.at(kDimNames[d]).get<std::string>());
  return out;
}

inline nlohmann::json scores_json(const Scores& s) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t d = 0; d < kNumDims; ++d) j[kDimNames[d]] = s[d];
  return j;
}

inline Scores scores_from_json(const nlohmann::json& j) {
  Scores s{};
  for (std::size_t d = 0; d < kNumDims; ++d) s[d] = j.at(kDimNames[d]).get<double>();
  return s;
}

}  // namespace detail

inline nlohmann::json header_to_json(const DatasetHeader& h) {
  nlohmann::json bp = nlohmann::json::object();
  for (std::size_t d = 0; d < kNumDims; ++d) bp[kDimNames[d]] = h.breakpoints[d];
  return {{"schema_version", h.schema_version},
          {"T", h.toy.frames},
          {"D", h.toy.dims},
          {"K", h.toy.n_classes},
          {"arc_span", h.toy.arc_span},
          {"tie_band", h.annotator.tie_band},
          {"temperature", h.annotator.flip_temperature},
          {"breakpoints", bp},
          {"relabeled", h.relabeled}};
}

inline DatasetHeader header_from_json(const nlohmann::json& j) {
  DatasetHeader h;
  h.schema_version = j.at("schema_version").get<int>();
  if (h.schema_version != 1) throw InputError("unsupported dataset schema " + std::to_string(h.schema_version));
  h.toy.frames = j.at("T").get<std::size_t>();
  h.toy.dims = j.at("D").get<std::size_t>();
  h.toy.n_classes = j.at("K").get<std::size_t>();
  h.toy.arc_span = j.at("arc_span").get<double>();
  h.annotator.tie_band = j.at("tie_band").get<double>();
  h.annotator.flip_temperature = j.at("temperature").get<double>();
  for (std::size_t d = 0; d < kNumDims; ++d) h.breakpoints[d] = j.at("breakpoints").at(kDimNames[d]).get<std::array<double, 4>>();
  h.relabeled = j.value("relabeled", false);
  return h;
}

inline nlohmann::json record_to_json(const PreferenceRecord& r, bool emit_gt) {
  nlohmann::json likert = nlohmann::json::object();
  for (std::size_t d = 0; d < kNumDims; ++d) likert[kDimNames[d]] = r.likert[d];
  nlohmann::json j = {{"cond", r.condition_class},
                      {"a_frames", r.sample_a.frames},
                      {"b_frames", r.sample_b.frames},
                      {"labels", detail::labels_json(r.labels)},
                      {"likert", likert}};
  if (emit_gt && r.gt_a && r.gt_b) {
    j["gt"] = {{"a", detail::scores_json(*r.gt_a)}, {"b", detail::scores_json(*r.gt_b)}};
  }
  if (r.relabel) {
    j["relabel"] = {{"chosen", r.relabel->chosen_is_a ? "A" : "B"},
                    {"overall_a", r.relabel->overall_a},
                    {"overall_b", r.relabel->overall_b},
                    {"orig_labels", detail::labels_json(r.relabel->orig_labels)}};
  }
  return j;
}

inline PreferenceRecord record_from_json(const nlohmann::json& j, const ToyConfig& cfg) {
  PreferenceRecord r;
  r.condition_class = j.at("cond").get<int>();
  if (r.condition_class < 0 || static_cast<std::size_t>(r.condition_class) >= cfg.n_classes) {
    throw InputError("record condition out of range");
  }
  r.sample_a = {j.at("a_frames").get<std::vector<double>>(), r.condition_class};
  r.sample_b = {j.at("b_frames").get<std::vector<double>>(), r.condition_class};
  require_same_size(r.sample_a.frames.size(), cfg.sample_dim(), "record a_frames length");
  require_same_size(r.sample_b.frames.size(), cfg.sample_dim(), "record b_frames length");
  r.labels = detail::labels_from_json(j.at("labels"));
  for (std::size_t d = 0; d < kNumDims; ++d) {
    r.likert[d] = j.at("likert").at(kDimNames[d]).get<std::array<int, 2>>();
    for (int v : r.likert[d]) {
      if (v < 1 || v > 5) throw InputError("Likert score outside 1..5");
    }
  }
  if (j.contains("gt")) {
    r.gt_a = detail::scores_from_json(j.at("gt").at("a"));
    r.gt_b = detail::scores_from_json(j.at("gt").at("b"));
  }
  if (j.contains("relabel")) {
    const auto& rl = j.at("relabel");
    RelabelInfo info;
    info.chosen_is_a = rl.at("chosen").get<std::string>() == "A";
    info.overall_a = rl.at("overall_a").get<double>();
    info.overall_b = rl.at("overall_b").get<double>();
    info.orig_labels = detail::labels_from_json(rl.at("orig_labels"));
    r.relabel = info;
  }
  return r;
}

inline std::string encode_dataset(const PrefDataset& ds, bool emit_gt) {
  std::string out = header_to_json(ds.header).dump() + "\n";
  for (const auto& r : ds.records) out += record_to_json(r, emit_gt).dump() + "\n";
  return out;
}

inline void write_dataset(const std::string& path, const PrefDataset& ds, bool emit_gt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out << encode_dataset(ds, emit_gt);
  if (!out) throw IoError(path, "write failed");
}

inline PrefDataset read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  PrefDataset ds;
  std::string line;
  std::size_t lineno = 0;
  try {
    if (!std::getline(in, line)) throw IoError(path, "missing dataset header");
    ++lineno;
    ds.header = header_from_json(nlohmann::json::parse(line));
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      ds.records.push_back(record_from_json(nlohmann::json::parse(line), ds.header.toy));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path, "line " + std::to_string(lineno) + ": " + e.what());
  } catch (const InputError& e) {
    throw IoError(path, "line " + std::to_string(lineno) + ": " + e.what());
  } catch (const ShapeError& e) {
    throw IoError(path, "line " + std::to_string(lineno) + ": " + e.what());
  }
  return ds;
}

// Pretraining corpus: one {"cond":..,"frames":[..]} object per line.
inline void write_corpus(const std::string& path, std::span<const Trajectory> corpus) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  for (const auto& t : corpus) out << nlohmann::json{{"cond", t.condition_class}, {"frames", t.frames}}.dump() << "\n";
  if (!out) throw IoError(path, "write failed");
}

inline std::vector<Trajectory> read_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::vector<Trajectory> out;
  std::string line;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("frames").get<std::vector<double>>(), j.at("cond").get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path, e.what());
  }
  return out;
}

}  // namespace flowalign
