#pragma once

// Run configuration: a flat, sectioned key=value file (INI style) or the
// equivalent JSON object of sections.  Every tunable of every stage lives in
// one table of fields, which drives parsing, validation and printing.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowalign/align.hpp"
#include "flowalign/checkpoint.hpp"
#include "flowalign/error.hpp"
#include "flowalign/flow.hpp"
#include "flowalign/guide.hpp"
#include "flowalign/reward.hpp"
#include "flowalign/rng.hpp"
#include "flowalign/toyworld.hpp"

namespace flowalign {

struct EvalConfig {
  std::size_t n_prompts = 256;
  std::size_t seeds_per_prompt = 1;
  std::size_t sample_steps = 50;
  double cfg_scale = 1.0;
  RewardWeights weights{};
};

struct AblationDefaults {
  std::string axis = "beta_schedule";
  std::vector<std::string> grid{"constant@2", "quadratic@2"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";
  std::vector<int> heldout_classes{3, 7};

  ToyConfig toy{};
  AnnotatorModel annotator{};
  std::size_t corpus_size = 20000;
  std::size_t n_pairs = 20000;

  FlowTrainConfig flow{};
  RewardTrainConfig reward{};
  NoisyRewardTrainConfig noisy{};
  AlignConfig align{};
  RewardWeights relabel_weights{};
  GuidanceSpec guide{};
  EvalConfig eval{};
  AblationDefaults ablate{};

  // Copies the shared settings (held-out classes) into the per-module configs.
  void sync() {
    reward.validation_classes = heldout_classes;
    noisy.validation_classes = heldout_classes;
    align.heldout_classes = heldout_classes;
  }

  void validate() const;
};

namespace cfgio {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

// Shortest text that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
  }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': integer out of range '" + v + "'");
  }
}

template <typename T, typename F>
std::string join(const std::vector<T>& xs, char sep, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += f(xs[i]);
  }
  return out;
}

inline std::string fmt_widths(const std::vector<std::size_t>& v) {
  return join(v, ',', [](std::size_t x) { return std::to_string(x); });
}

inline std::vector<std::size_t> parse_widths(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& p : split(v, ',')) {
    const auto w = parse_uint(key, p);
    if (w == 0) throw ConfigError("key '" + key + "': widths must be positive");
    out.push_back(static_cast<std::size_t>(w));
  }
  if (out.empty()) throw ConfigError("key '" + key + "': empty width list");
  return out;
}

inline std::vector<int> parse_classes(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (trim(v).empty()) return out;
  for (const auto& p : split(v, ',')) out.push_back(static_cast<int>(parse_uint(key, p)));
  return out;
}

}  // namespace cfgio

// "a:b:c" with every part >= 0 and the parts summing to 1.
inline RewardWeights parse_weights(const std::string& s) {
  const auto parts = cfgio::split(s, ':');
  if (parts.size() != kNumDims) throw ConfigError("weights must be vq:mq:ta, got '" + s + "'");
  RewardWeights w;
  for (std::size_t d = 0; d < kNumDims; ++d) w.w[d] = cfgio::parse_double("weights", parts[d]);
  w.validate();
  return w;
}

inline std::string format_weights(const RewardWeights& w) {
  return cfgio::fmt_double(w.w[0]) + ":" + cfgio::fmt_double(w.w[1]) + ":" + cfgio::fmt_double(w.w[2]);
}

struct ConfigField {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;

  std::string name() const { return section + "." + key; }
};

// The field table.  Order here is the order of --print-effective output.
inline const std::vector<ConfigField>& config_fields() {
  using cfgio::fmt_double;
  using cfgio::parse_double;
  using cfgio::parse_uint;
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto dbl = [&f](std::string sec, std::string key, std::function<double&(RunConfig&)> ref) {
      const std::string name = sec + "." + key;
      f.push_back({sec, key, [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
                   [ref, name](RunConfig& c, const std::string& v) { ref(c) = parse_double(name, v); }});
    };
    auto size = [&f](std::string sec, std::string key, std::function<std::size_t&(RunConfig&)> ref) {
      const std::string name = sec + "." + key;
      f.push_back({sec, key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
                   [ref, name](RunConfig& c, const std::string& v) {
                     ref(c) = static_cast<std::size_t>(parse_uint(name, v));
                   }});
    };
    auto u64 = [&f](std::string sec, std::string key, std::function<std::uint64_t&(RunConfig&)> ref) {
      const std::string name = sec + "." + key;
      f.push_back({sec, key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
                   [ref, name](RunConfig& c, const std::string& v) { ref(c) = parse_uint(name, v); }});
    };
    auto str = [&f](std::string sec, std::string key, std::function<std::string(const RunConfig&)> get,
                    std::function<void(RunConfig&, const std::string&)> set) {
      f.push_back({sec, key, std::move(get), std::move(set)});
    };

    u64("global", "seed", [](RunConfig& c) -> std::uint64_t& { return c.seed; });
    str("global", "out_dir", [](const RunConfig& c) { return c.out_dir; },
        [](RunConfig& c, const std::string& v) { c.out_dir = v; });
    str("global", "heldout_classes",
        [](const RunConfig& c) { return cfgio::join(c.heldout_classes, ',', [](int x) { return std::to_string(x); }); },
        [](RunConfig& c, const std::string& v) { c.heldout_classes = cfgio::parse_classes("global.heldout_classes", v); });

    size("toy", "frames", [](RunConfig& c) -> std::size_t& { return c.toy.frames; });
    size("toy", "dims", [](RunConfig& c) -> std::size_t& { return c.toy.dims; });
    size("toy", "n_classes", [](RunConfig& c) -> std::size_t& { return c.toy.n_classes; });
    dbl("toy", "arc_span", [](RunConfig& c) -> double& { return c.toy.arc_span; });
    dbl("toy", "tie_band", [](RunConfig& c) -> double& { return c.annotator.tie_band; });
    dbl("toy", "flip_temperature", [](RunConfig& c) -> double& { return c.annotator.flip_temperature; });
    size("toy", "corpus_size", [](RunConfig& c) -> std::size_t& { return c.corpus_size; });
    size("toy", "n_pairs", [](RunConfig& c) -> std::size_t& { return c.n_pairs; });

    str("flow", "hidden", [](const RunConfig& c) { return cfgio::fmt_widths(c.flow.hidden); },
        [](RunConfig& c, const std::string& v) { c.flow.hidden = cfgio::parse_widths("flow.hidden", v); });
    str("flow", "activation", [](const RunConfig& c) { return std::string(activation_name(c.flow.activation)); },
        [](RunConfig& c, const std::string& v) { c.flow.activation = parse_activation(v); });
    dbl("flow", "lr", [](RunConfig& c) -> double& { return c.flow.lr; });
    size("flow", "batch_size", [](RunConfig& c) -> std::size_t& { return c.flow.batch_size; });
    size("flow", "steps", [](RunConfig& c) -> std::size_t& { return c.flow.steps; });
    dbl("flow", "cond_dropout", [](RunConfig& c) -> double& { return c.flow.cond_dropout; });

    str("reward", "mode", [](const RunConfig& c) { return std::string(pref_mode_name(c.reward.mode)); },
        [](RunConfig& c, const std::string& v) { c.reward.mode = parse_pref_mode(v); });
    str("reward", "hidden", [](const RunConfig& c) { return cfgio::fmt_widths(c.reward.hidden); },
        [](RunConfig& c, const std::string& v) { c.reward.hidden = cfgio::parse_widths("reward.hidden", v); });
    str("reward", "activation", [](const RunConfig& c) { return std::string(activation_name(c.reward.activation)); },
        [](RunConfig& c, const std::string& v) { c.reward.activation = parse_activation(v); });
    dbl("reward", "lr", [](RunConfig& c) -> double& { return c.reward.lr; });
    size("reward", "epochs", [](RunConfig& c) -> std::size_t& { return c.reward.epochs; });
    size("reward", "batch_size", [](RunConfig& c) -> std::size_t& { return c.reward.batch_size; });
    dbl("reward", "theta", [](RunConfig& c) -> double& { return c.reward.theta; });
    dbl("reward", "data_fraction", [](RunConfig& c) -> double& { return c.reward.data_fraction; });

    str("noisy_reward", "hidden", [](const RunConfig& c) { return cfgio::fmt_widths(c.noisy.hidden); },
        [](RunConfig& c, const std::string& v) { c.noisy.hidden = cfgio::parse_widths("noisy_reward.hidden", v); });
    str("noisy_reward", "activation",
        [](const RunConfig& c) { return std::string(activation_name(c.noisy.activation)); },
        [](RunConfig& c, const std::string& v) { c.noisy.activation = parse_activation(v); });
    dbl("noisy_reward", "lr", [](RunConfig& c) -> double& { return c.noisy.lr; });
    size("noisy_reward", "epochs", [](RunConfig& c) -> std::size_t& { return c.noisy.epochs; });
    size("noisy_reward", "batch_size", [](RunConfig& c) -> std::size_t& { return c.noisy.batch_size; });

    str("align", "method", [](const RunConfig& c) { return std::string(align_method_name(c.align.method)); },
        [](RunConfig& c, const std::string& v) { c.align.method = parse_align_method(v); });
    dbl("align", "beta", [](RunConfig& c) -> double& { return c.align.dpo.beta; });
    str("align", "beta_schedule",
        [](const RunConfig& c) { return std::string(beta_schedule_name(c.align.dpo.schedule)); },
        [](RunConfig& c, const std::string& v) { c.align.dpo.schedule = parse_beta_schedule(v); });
    dbl("align", "lr", [](RunConfig& c) -> double& { return c.align.lr; });
    size("align", "batch_size", [](RunConfig& c) -> std::size_t& { return c.align.batch_size; });
    size("align", "epochs", [](RunConfig& c) -> std::size_t& { return c.align.epochs; });
    size("align", "max_steps", [](RunConfig& c) -> std::size_t& { return c.align.max_steps; });
    dbl("align", "grad_clip", [](RunConfig& c) -> double& { return c.align.grad_clip; });
    str("align", "relabel_weights", [](const RunConfig& c) { return format_weights(c.relabel_weights); },
        [](RunConfig& c, const std::string& v) { c.relabel_weights = parse_weights(v); });

    str("guide", "weights", [](const RunConfig& c) { return format_weights(c.guide.weights); },
        [](RunConfig& c, const std::string& v) { c.guide.weights = parse_weights(v); });
    dbl("guide", "w_scale", [](RunConfig& c) -> double& { return c.guide.w_scale; });
    dbl("guide", "factor_cap", [](RunConfig& c) -> double& { return c.guide.factor_cap; });
    str("guide", "form", [](const RunConfig& c) { return std::string(guidance_form_name(c.guide.form)); },
        [](RunConfig& c, const std::string& v) { c.guide.form = parse_guidance_form(v); });

    size("eval", "n_prompts", [](RunConfig& c) -> std::size_t& { return c.eval.n_prompts; });
    size("eval", "seeds_per_prompt", [](RunConfig& c) -> std::size_t& { return c.eval.seeds_per_prompt; });
    size("eval", "sample_steps", [](RunConfig& c) -> std::size_t& { return c.eval.sample_steps; });
    dbl("eval", "cfg_scale", [](RunConfig& c) -> double& { return c.eval.cfg_scale; });
    str("eval", "weights", [](const RunConfig& c) { return format_weights(c.eval.weights); },
        [](RunConfig& c, const std::string& v) { c.eval.weights = parse_weights(v); });

    str("ablate", "axis", [](const RunConfig& c) { return c.ablate.axis; },
        [](RunConfig& c, const std::string& v) { c.ablate.axis = v; });
    str("ablate", "grid", [](const RunConfig& c) { return cfgio::join(c.ablate.grid, ',', [](const std::string& s) { return s; }); },
        [](RunConfig& c, const std::string& v) { c.ablate.grid = cfgio::split(v, ','); });
    str("ablate", "seeds",
        [](const RunConfig& c) {
          return cfgio::join(c.ablate.seeds, ',', [](std::uint64_t s) { return std::to_string(s); });
        },
        [](RunConfig& c, const std::string& v) {
          c.ablate.seeds.clear();
          for (const auto& p : cfgio::split(v, ',')) c.ablate.seeds.push_back(cfgio::parse_uint("ablate.seeds", p));
        });
    return f;
  }();
  return fields;
}

inline const ConfigField* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : config_fields()) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

inline void set_config_value(RunConfig& cfg, const std::string& section, const std::string& key,
                             const std::string& value) {
  const auto* f = find_field(section, key);
  if (!f) throw ConfigError("unknown config key '" + section + "." + key + "'");
  f->set(cfg, value);
}

inline void RunConfig::validate() const {
  toy.validate();
  annotator.validate();
  if (corpus_size == 0) throw ConfigError("toy.corpus_size must be positive");
  if (n_pairs == 0) throw ConfigError("toy.n_pairs must be positive");
  if (heldout_classes.empty()) throw ConfigError("global.heldout_classes must not be empty");
  for (int c : heldout_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= toy.n_classes) {
      throw ConfigError("held-out class " + std::to_string(c) + " outside [0, n_classes)");
    }
  }
  if (heldout_classes.size() >= toy.n_classes) throw ConfigError("every class is held out; nothing left to train on");
  if (out_dir.empty()) throw ConfigError("global.out_dir must not be empty");
  if (flow.batch_size == 0 || reward.batch_size == 0 || noisy.batch_size == 0 || align.batch_size == 0) {
    throw ConfigError("batch sizes must be positive");
  }
  if (!(flow.lr > 0.0 && reward.lr > 0.0 && noisy.lr > 0.0 && align.lr > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (!(flow.cond_dropout >= 0.0 && flow.cond_dropout < 1.0)) throw ConfigError("flow.cond_dropout must lie in [0, 1)");
  if (!(reward.theta > 1.0)) throw ConfigError("reward.theta must exceed 1");
  if (!(reward.data_fraction > 0.0 && reward.data_fraction <= 1.0)) {
    throw ConfigError("reward.data_fraction must lie in (0, 1]");
  }
  if (!(align.dpo.beta > 0.0)) throw ConfigError("align.beta must be positive");
  if (!(align.grad_clip >= 0.0)) throw ConfigError("align.grad_clip must be >= 0");
  relabel_weights.validate();
  guide.validate();
  eval.weights.validate();
  if (eval.n_prompts == 0 || eval.seeds_per_prompt == 0) throw ConfigError("evaluation needs prompts and seeds");
  if (eval.sample_steps < 2) throw ConfigError("eval.sample_steps must be >= 2");
  if (ablate.grid.empty() || ablate.seeds.empty()) throw ConfigError("ablation grid and seeds must be non-empty");
}

// ---- reading ----

inline RunConfig parse_ini(const std::string& text, const std::string& origin = "<config>") {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto s = cfgio::trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    const auto where = origin + ":" + std::to_string(lineno);
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where + ": malformed section header");
      section = cfgio::trim(s.substr(1, s.size() - 2));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any section");
    const auto key = cfgio::trim(s.substr(0, eq));
    try {
      set_config_value(cfg, section, key, cfgio::trim(s.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  cfg.sync();
  return cfg;
}

inline std::string json_scalar_text(const nlohmann::json& v, const std::string& name) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_unsigned()) return std::to_string(v.get<std::uint64_t>());
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  if (v.is_number_float()) return cfgio::fmt_double(v.get<double>());
  if (v.is_array()) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (i) out += ',';
      out += json_scalar_text(v[i], name);
    }
    return out;
  }
  throw ConfigError("key '" + name + "': unsupported JSON value");
}

inline RunConfig parse_json_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid JSON config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("JSON config must be an object of sections");
  RunConfig cfg;
  for (const auto& [section, body] : j.items()) {
    if (!body.is_object()) throw ConfigError("JSON config section '" + section + "' must be an object");
    for (const auto& [key, value] : body.items()) {
      set_config_value(cfg, section, key, json_scalar_text(value, section + "." + key));
    }
  }
  cfg.sync();
  return cfg;
}

// Parses, defaults and cross-checks a config file.  JSON is detected by a
// leading '{'.
inline RunConfig load_config(const std::string& path) {
  const auto text = read_file(path);
  const auto first = cfgio::trim(text);
  RunConfig cfg = (!first.empty() && first.front() == '{') ? parse_json_config(text) : parse_ini(text, path);
  cfg.validate();
  return cfg;
}

// ---- printing ----

inline std::string print_effective(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& f : config_fields()) {
    if (f.section != section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(cfg) + "\n";
  }
  return out;
}

inline bool same_effective(const RunConfig& a, const RunConfig& b) { return print_effective(a) == print_effective(b); }

// Content hash of the effective config.  The output location is not content,
// so it is blanked before hashing.
inline std::uint64_t config_hash(RunConfig cfg) {
  cfg.out_dir = "-";
  return fnv1a64(print_effective(cfg));
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace flowalign
