#pragma once

// Paired evaluation: samples from two models are generated with identical
// (condition, seed) keys and compared by a reward model, ties credited 0.5.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "flowalign/error.hpp"
#include "flowalign/flow.hpp"
#include "flowalign/guide.hpp"
#include "flowalign/reward.hpp"
#include "flowalign/rng.hpp"
#include "flowalign/toyworld.hpp"

namespace flowalign {

struct SampleKey {
  int cond = 0;
  std::uint64_t seed = 0;

  bool operator==(const SampleKey&) const = default;
};

struct SampleSet {
  std::vector<SampleKey> keys;
  std::vector<Vec> samples;

  std::size_t size() const { return keys.size(); }
};

// n_prompts prompts cycling through the given classes, seeds_per_prompt
// samples each; seeds are derived from (seed, prompt, replicate).
inline std::vector<SampleKey> eval_keys(const std::vector<int>& classes, std::size_t n_prompts,
                                        std::size_t seeds_per_prompt, std::uint64_t seed) {
  if (classes.empty() || n_prompts == 0 || seeds_per_prompt == 0) throw InputError("empty evaluation prompt set");
  std::vector<SampleKey> keys;
  for (std::size_t p = 0; p < n_prompts; ++p) {
    for (std::size_t s = 0; s < seeds_per_prompt; ++s) {
      keys.push_back({classes[p % classes.size()], derive_seed(derive_seed(seed, p), s)});
    }
  }
  return keys;
}

template <typename Sampler>
SampleSet draw_samples(const std::vector<SampleKey>& keys, Sampler&& sampler) {
  SampleSet set;
  set.keys = keys;
  set.samples.reserve(keys.size());
  for (const auto& k : keys) set.samples.push_back(sampler(k.cond, k.seed));
  return set;
}

inline SampleSet sample_policy(const VelocityNet& net, const std::vector<SampleKey>& keys,
                               const FlowSchedule& schedule, double cfg_scale) {
  return draw_samples(keys, [&](int c, std::uint64_t s) { return euler_sample(net, c, schedule, cfg_scale, s); });
}

inline SampleSet sample_guided(const VelocityNet& net, const NoisyRewardNet& noisy, const GuidanceSpec& spec,
                               const std::vector<SampleKey>& keys, const FlowSchedule& schedule) {
  return draw_samples(keys, [&](int c, std::uint64_t s) { return nrg_sample(net, noisy, spec, schedule, c, s).sample; });
}

struct Proportion {
  double value = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

// Wilson score interval at 95%.
inline Proportion wilson(double successes, std::size_t n) {
  if (n == 0) throw InputError("proportion of zero trials");
  const double z = 1.959963984540054;
  const double nn = static_cast<double>(n);
  const double p = successes / nn;
  const double denom = 1.0 + z * z / nn;
  const double center = (p + z * z / (2.0 * nn)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z * z / (4.0 * nn * nn)) / denom;
  return {p, std::max(0.0, center - half), std::min(1.0, center + half)};
}

struct WinRateResult {
  std::array<Proportion, kNumDims> per_dim{};
  Proportion overall{};
  std::size_t n_prompts = 0;
  std::vector<std::uint64_t> seeds;
};

using Scorer = std::function<Scores(std::span<const double>, int)>;

inline WinRateResult win_rate(const SampleSet& a, const SampleSet& b, const Scorer& scorer, const ScoreStats& stats,
                              const RewardWeights& weights) {
  if (a.size() == 0) throw InputError("win rate over an empty prompt set");
  if (a.keys != b.keys) throw InputError("win rate requires identical (condition, seed) keys on both sides");
  std::array<double, kNumDims> wins{};
  double overall = 0.0;
  auto credit = [](double x, double y) { return x > y ? 1.0 : (x == y ? 0.5 : 0.0); };
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto sa = scorer(a.samples[i], a.keys[i].cond);
    const auto sb = scorer(b.samples[i], b.keys[i].cond);
    for (std::size_t d = 0; d < kNumDims; ++d) wins[d] += credit(sa[d], sb[d]);
    overall += credit(normalize_scores(sa, stats, weights).overall, normalize_scores(sb, stats, weights).overall);
  }
  WinRateResult res;
  for (std::size_t d = 0; d < kNumDims; ++d) res.per_dim[d] = wilson(wins[d], a.size());
  res.overall = wilson(overall, a.size());
  res.n_prompts = a.size();
  for (const auto& k : a.keys) res.seeds.push_back(k.seed);
  return res;
}

inline WinRateResult win_rate(const SampleSet& a, const SampleSet& b, const RewardModel& rm,
                              const RewardWeights& weights = {}) {
  return win_rate(a, b, [&](std::span<const double> x, int c) { return rm.net.scores(x, c); }, rm.stats, weights);
}

struct RelabelStats {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  std::size_t unanimous = 0;  // kept pairs whose non-tie labels all agree
  std::size_t flips = 0;      // unanimous pairs whose orientation was reversed

  double flip_fraction() const { return unanimous == 0 ? 0.0 : static_cast<double>(flips) / unanimous; }
};

// Re-orients every pair by the scalarized, normalized reward; pairs with equal
// scores are dropped.  Original labels stay in the relabel provenance block.
inline PrefDataset relabel_pairs(const Scorer& scorer, const ScoreStats& stats, const PrefDataset& data,
                                 const RewardWeights& weights, RelabelStats* stats_out = nullptr) {
  weights.validate();
  PrefDataset out;
  out.header = data.header;
  out.header.relabeled = true;
  RelabelStats rs;
  for (const auto& r : data.records) {
    const double oa = normalize_scores(scorer(r.sample_a.frames, r.condition_class), stats, weights).overall;
    const double ob = normalize_scores(scorer(r.sample_b.frames, r.condition_class), stats, weights).overall;
    if (oa == ob) {
      ++rs.dropped;
      continue;
    }
    PreferenceRecord rec = r;
    const auto& orig = r.relabel ? r.relabel->orig_labels : r.labels;
    rec.relabel = RelabelInfo{oa > ob, oa, ob, orig};
    ++rs.kept;
    const bool any_a = std::any_of(orig.begin(), orig.end(), [](Label l) { return l == Label::AWins; });
    const bool any_b = std::any_of(orig.begin(), orig.end(), [](Label l) { return l == Label::BWins; });
    if (any_a != any_b) {
      ++rs.unanimous;
      if (any_a != (oa > ob)) ++rs.flips;
    }
    out.records.push_back(std::move(rec));
  }
  if (stats_out) *stats_out = rs;
  return out;
}

inline PrefDataset relabel_pairs(const RewardModel& rm, const PrefDataset& data, const RewardWeights& weights,
                                 RelabelStats* stats_out = nullptr) {
  return relabel_pairs([&](std::span<const double> x, int c) { return rm.net.scores(x, c); }, rm.stats, data, weights,
                       stats_out);
}

}  // namespace flowalign
