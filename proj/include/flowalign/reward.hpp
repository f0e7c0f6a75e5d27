#pragma once

// Reward models learned from pairwise preferences.
//
// RewardNet keeps the condition-free quality scores (vq, mq) on a trunk that
// never sees the condition, and the alignment score (ta) on a trunk that
// does; each trunk's linear output layer is its score head.  NoisyRewardNet
// scores interpolants x_t at any time t and exposes input gradients for
// guidance.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "flowalign/checkpoint.hpp"
#include "flowalign/error.hpp"
#include "flowalign/flow.hpp"
#include "flowalign/netcore.hpp"
#include "flowalign/rng.hpp"
#include "flowalign/toyworld.hpp"

namespace flowalign {

// Condition features seen by reward models: position of the class on the
// unit circle.  Unlike a one-hot code this carries over to classes that never
// appear in reward training.
inline constexpr std::size_t kPromptEmbeddingDim = 2;

inline void prompt_embedding(int cls, std::size_t n_classes, std::span<double> out) {
  if (cls < 0 || static_cast<std::size_t>(cls) >= n_classes) {
    throw DomainError("condition class " + std::to_string(cls) + " out of range");
  }
  const double angle = 2.0 * std::numbers::pi * cls / static_cast<double>(n_classes);
  out[0] = std::cos(angle);
  out[1] = std::sin(angle);
}

class RewardNet {
 public:
  struct Cache {
    ForwardCache free;
    ForwardCache aware;
    Vec aware_in;
  };

  RewardNet() = default;

  RewardNet(Net ctx_free, Net ctx_aware, std::size_t sample_dim, std::size_t n_classes)
      : free_(std::move(ctx_free)), aware_(std::move(ctx_aware)), sample_dim_(sample_dim), n_classes_(n_classes) {
    require_same_size(free_.input_dim(), sample_dim_, "context-free trunk input width");
    require_same_size(free_.output_dim(), 2, "context-free trunk output width");
    require_same_size(aware_.input_dim(), sample_dim_ + kPromptEmbeddingDim, "context-aware trunk input width");
    require_same_size(aware_.output_dim(), 1, "context-aware trunk output width");
  }

  static RewardNet create(std::size_t sample_dim, std::size_t n_classes, const std::vector<std::size_t>& hidden,
                          Activation act, std::uint64_t seed) {
    NetSpec fs{{sample_dim}, act, derive_seed(seed, "rm-free")};
    fs.layer_widths.insert(fs.layer_widths.end(), hidden.begin(), hidden.end());
    fs.layer_widths.push_back(2);
    NetSpec as{{sample_dim + kPromptEmbeddingDim}, act, derive_seed(seed, "rm-aware")};
    as.layer_widths.insert(as.layer_widths.end(), hidden.begin(), hidden.end());
    as.layer_widths.push_back(1);
    return RewardNet(net_init(fs), net_init(as), sample_dim, n_classes);
  }

  std::size_t sample_dim() const noexcept { return sample_dim_; }
  std::size_t n_classes() const noexcept { return n_classes_; }
  const Net& ctx_free() const noexcept { return free_; }
  const Net& ctx_aware() const noexcept { return aware_; }
  std::size_t param_count() const noexcept { return free_.param_count() + aware_.param_count(); }

  // Flat view: context-free parameters followed by context-aware ones.
  Vec flat_params() const {
    Vec p(free_.params().begin(), free_.params().end());
    p.insert(p.end(), aware_.params().begin(), aware_.params().end());
    return p;
  }

  void set_flat_params(std::span<const double> p) {
    require_same_size(p.size(), param_count(), "reward parameter vector");
    std::copy(p.begin(), p.begin() + free_.param_count(), free_.mutable_params().begin());
    std::copy(p.begin() + free_.param_count(), p.end(), aware_.mutable_params().begin());
  }

  Scores forward(std::span<const double> x, int cls, Cache& cache) const {
    require_same_size(x.size(), sample_dim_, "reward input width");
    forward_into(free_, x, cache.free);
    cache.aware_in.assign(x.begin(), x.end());
    cache.aware_in.resize(sample_dim_ + kPromptEmbeddingDim);
    prompt_embedding(cls, n_classes_, std::span<double>(cache.aware_in).subspan(sample_dim_));
    forward_into(aware_, cache.aware_in, cache.aware);
    const auto f = cache.free.output();
    return {f[0], f[1], cache.aware.output()[0]};
  }

  Scores scores(std::span<const double> x, int cls) const {
    Cache c;
    return forward(x, cls, c);
  }

  // Accumulates d(upstream . scores)/d(params) into the flat gradient buffer
  // and, when input_grad is non-empty, writes d/dx.
  void backward(const Cache& cache, const Scores& upstream, std::span<double> flat_grad,
                std::span<double> input_grad = {}) const {
    require_same_size(flat_grad.size(), param_count(), "reward gradient buffer");
    const std::array<double, 2> up_free{upstream[kVq], upstream[kMq]};
    const std::array<double, 1> up_aware{upstream[kTa]};
    Vec g_free_in, g_aware_in;
    if (!input_grad.empty()) {
      g_free_in.assign(sample_dim_, 0.0);
      g_aware_in.assign(sample_dim_ + kPromptEmbeddingDim, 0.0);
    }
    backward_into(free_, cache.free, up_free, flat_grad.first(free_.param_count()), g_free_in);
    backward_into(aware_, cache.aware, up_aware, flat_grad.subspan(free_.param_count()), g_aware_in);
    if (!input_grad.empty()) {
      require_same_size(input_grad.size(), sample_dim_, "reward input gradient buffer");
      for (std::size_t i = 0; i < sample_dim_; ++i) input_grad[i] = g_free_in[i] + g_aware_in[i];
    }
  }

  Vec input_gradient(std::span<const double> x, int cls, const Scores& weights) const {
    Cache c;
    forward(x, cls, c);
    Vec scratch(param_count(), 0.0);
    Vec g(sample_dim_, 0.0);
    backward(c, weights, scratch, g);
    return g;
  }

  Checkpoint to_checkpoint(std::map<std::string, std::string> meta = {}) const {
    meta["kind"] = "reward";
    meta["role"] = "clean";
    meta["sample_dim"] = std::to_string(sample_dim_);
    meta["n_classes"] = std::to_string(n_classes_);
    return Checkpoint{std::move(meta), {free_, aware_}};
  }

  static RewardNet from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.meta.count("role") == 0 || ckpt.meta.at("role") != "clean" || ckpt.nets.size() != 2) {
      throw InputError("checkpoint does not hold a clean reward net");
    }
    return RewardNet(ckpt.nets[0], ckpt.nets[1], std::stoul(ckpt.meta.at("sample_dim")),
                     std::stoul(ckpt.meta.at("n_classes")));
  }

 private:
  Net free_;
  Net aware_;
  std::size_t sample_dim_ = 0;
  std::size_t n_classes_ = 0;
};

// r(x_t, t, y) over [x_t | time embedding | prompt embedding], one output per dimension.
class NoisyRewardNet {
 public:
  NoisyRewardNet() = default;

  NoisyRewardNet(Net net, std::size_t sample_dim, std::size_t n_classes)
      : net_(std::move(net)), sample_dim_(sample_dim), n_classes_(n_classes) {
    require_same_size(net_.input_dim(), input_dim(sample_dim), "noisy reward input width");
    require_same_size(net_.output_dim(), kNumDims, "noisy reward output width");
  }

  static std::size_t input_dim(std::size_t sample_dim) { return sample_dim + kTimeEmbeddingDim + kPromptEmbeddingDim; }

  static NoisyRewardNet create(std::size_t sample_dim, std::size_t n_classes, const std::vector<std::size_t>& hidden,
                               Activation act, std::uint64_t seed) {
    NetSpec spec{{input_dim(sample_dim)}, act, derive_seed(seed, "noisy-rm")};
    spec.layer_widths.insert(spec.layer_widths.end(), hidden.begin(), hidden.end());
    spec.layer_widths.push_back(kNumDims);
    return NoisyRewardNet(net_init(spec), sample_dim, n_classes);
  }

  std::size_t sample_dim() const noexcept { return sample_dim_; }
  std::size_t n_classes() const noexcept { return n_classes_; }
  const Net& net() const noexcept { return net_; }
  Net& net() noexcept { return net_; }

  void build_input(std::span<const double> x_t, double t, int cls, Vec& out) const {
    require_same_size(x_t.size(), sample_dim_, "noisy reward sample width");
    out.resize(net_.input_dim());
    std::copy(x_t.begin(), x_t.end(), out.begin());
    auto rest = std::span<double>(out).subspan(sample_dim_);
    time_embedding(t, rest.first(kTimeEmbeddingDim));
    prompt_embedding(cls, n_classes_, rest.subspan(kTimeEmbeddingDim));
  }

  Scores scores(std::span<const double> x_t, double t, int cls) const {
    Vec in;
    build_input(x_t, t, cls, in);
    const auto o = net_forward(net_, in);
    return {o[0], o[1], o[2]};
  }

  struct ValueGrad {
    double value = 0.0;
    Vec grad;  // d value / d x_t; time and condition features are held constant
  };

  ValueGrad weighted_reward(std::span<const double> x_t, double t, int cls, const Scores& weights) const {
    Vec in;
    build_input(x_t, t, cls, in);
    ForwardCache cache;
    forward_into(net_, in, cache);
    ValueGrad out;
    const auto o = cache.output();
    for (std::size_t d = 0; d < kNumDims; ++d) out.value += weights[d] * o[d];
    Vec g(net_.input_dim(), 0.0);
    input_gradient_into(net_, cache, weights, g);
    out.grad.assign(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(sample_dim_));
    return out;
  }

  Checkpoint to_checkpoint(std::map<std::string, std::string> meta = {}) const {
    meta["kind"] = "reward";
    meta["role"] = "noisy";
    meta["sample_dim"] = std::to_string(sample_dim_);
    meta["n_classes"] = std::to_string(n_classes_);
    return Checkpoint{std::move(meta), {net_}};
  }

  static NoisyRewardNet from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.meta.count("role") == 0 || ckpt.meta.at("role") != "noisy" || ckpt.nets.size() != 1) {
      throw InputError("checkpoint does not hold a noisy reward net");
    }
    return NoisyRewardNet(ckpt.nets[0], std::stoul(ckpt.meta.at("sample_dim")), std::stoul(ckpt.meta.at("n_classes")));
  }

 private:
  Net net_;
  std::size_t sample_dim_ = 0;
  std::size_t n_classes_ = 0;
};

// ---- preference likelihoods ----

struct BttProbs {
  double p_a = 0.0;
  double p_b = 0.0;
  double p_tie = 0.0;
  double log_a = 0.0;
  double log_b = 0.0;
  double log_tie = 0.0;
};

inline double log_add_exp(double a, double b) {
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

inline double log_sigmoid(double x) { return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); }

// Rao-Kupper tie model, normalized form:
//   pA   = e^rA / (e^rA + th e^rB)
//   pB   = e^rB / (th e^rA + e^rB)
//   pTie = (th^2 - 1) e^rA e^rB / ((e^rA + th e^rB)(th e^rA + e^rB))
inline BttProbs btt_prob(double r_a, double r_b, double theta) {
  if (!(theta > 1.0)) throw ConfigError("BTT theta must exceed 1");
  const double lt = std::log(theta);
  const double log_d1 = log_add_exp(r_a, lt + r_b);
  const double log_d2 = log_add_exp(lt + r_a, r_b);
  BttProbs p;
  p.log_a = r_a - log_d1;
  p.log_b = r_b - log_d2;
  // log(theta^2 - 1) written to stay accurate as theta -> 1+
  p.log_tie = std::log(theta - 1.0) + std::log(theta + 1.0) + r_a + r_b - log_d1 - log_d2;
  p.p_a = std::exp(p.log_a);
  p.p_b = std::exp(p.log_b);
  p.p_tie = std::exp(p.log_tie);
  return p;
}

enum class PrefMode : std::uint8_t { regression = 0, bt = 1, btt = 2 };

inline const char* pref_mode_name(PrefMode m) {
  switch (m) {
    case PrefMode::regression: return "regression";
    case PrefMode::bt: return "bt";
    case PrefMode::btt: return "btt";
  }
  return "?";
}

inline PrefMode parse_pref_mode(const std::string& s) {
  if (s == "regression") return PrefMode::regression;
  if (s == "bt") return PrefMode::bt;
  if (s == "btt") return PrefMode::btt;
  throw ConfigError("unknown reward mode '" + s + "'");
}

struct PairScores {
  Scores a{};
  Scores b{};
  std::array<Label, kNumDims> labels{};
  std::array<std::array<int, 2>, kNumDims> likert{};
  std::array<bool, kNumDims> active{true, true, true};
};

struct ScoreLossGrad {
  double loss = 0.0;
  std::vector<Scores> grad_a;
  std::vector<Scores> grad_b;
};

// Loss on already-computed scores, summed over active dimensions and averaged
// over the batch.  Regression averages over the 2N scored samples.
inline ScoreLossGrad preference_loss_scores(PrefMode mode, std::span<const PairScores> batch, double theta = 5.0) {
  if (batch.empty()) throw InputError("empty preference batch");
  ScoreLossGrad out;
  out.grad_a.assign(batch.size(), Scores{});
  out.grad_b.assign(batch.size(), Scores{});
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  const double lt = mode == PrefMode::btt ? std::log(theta) : 0.0;
  if (mode == PrefMode::btt && !(theta > 1.0)) throw ConfigError("BTT theta must exceed 1");
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& p = batch[i];
    for (std::size_t d = 0; d < kNumDims; ++d) {
      if (!p.active[d]) continue;
      const double ra = p.a[d];
      const double rb = p.b[d];
      switch (mode) {
        case PrefMode::regression: {
          const double ea = ra - p.likert[d][0];
          const double eb = rb - p.likert[d][1];
          out.loss += 0.5 * inv_n * (ea * ea + eb * eb);
          out.grad_a[i][d] += inv_n * ea;
          out.grad_b[i][d] += inv_n * eb;
          break;
        }
        case PrefMode::bt: {
          if (p.labels[d] == Label::Tie) {
            throw InputError("bt loss received a tie label; drop ties before bt training");
          }
          const double margin = p.labels[d] == Label::AWins ? ra - rb : rb - ra;
          out.loss -= inv_n * log_sigmoid(margin);
          const double g = -inv_n * logistic(-margin);  // d loss / d margin
          const double sign = p.labels[d] == Label::AWins ? 1.0 : -1.0;
          out.grad_a[i][d] += g * sign;
          out.grad_b[i][d] -= g * sign;
          break;
        }
        case PrefMode::btt: {
          const auto probs = btt_prob(ra, rb, theta);
          const double q1 = logistic(ra - rb - lt);  // e^rA / (e^rA + th e^rB)
          const double s2 = logistic(lt + ra - rb);  // th e^rA / (th e^rA + e^rB)
          double ga = 0.0;
          double gb = 0.0;
          switch (p.labels[d]) {
            case Label::AWins:
              out.loss -= inv_n * probs.log_a;
              ga = q1 - 1.0;
              gb = 1.0 - q1;
              break;
            case Label::BWins:
              out.loss -= inv_n * probs.log_b;
              ga = s2;
              gb = -s2;
              break;
            case Label::Tie:
              out.loss -= inv_n * probs.log_tie;
              ga = q1 + s2 - 1.0;
              gb = 1.0 - q1 - s2;
              break;
          }
          out.grad_a[i][d] += inv_n * ga;
          out.grad_b[i][d] += inv_n * gb;
          break;
        }
      }
    }
  }
  if (!std::isfinite(out.loss)) throw NumericError("preference loss is non-finite");
  return out;
}

// Pair items feeding preference_loss through the network.
struct PrefItem {
  const PreferenceRecord* record = nullptr;
  std::array<bool, kNumDims> active{true, true, true};
};

inline LossGrad preference_loss(PrefMode mode, const RewardNet& net, std::span<const PrefItem> batch,
                                double theta = 5.0) {
  if (batch.empty()) throw InputError("empty preference batch");
  std::vector<PairScores> ps(batch.size());
  std::vector<RewardNet::Cache> ca(batch.size()), cb(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = *batch[i].record;
    ps[i].a = net.forward(r.sample_a.frames, r.condition_class, ca[i]);
    ps[i].b = net.forward(r.sample_b.frames, r.condition_class, cb[i]);
    ps[i].labels = r.labels;
    ps[i].likert = r.likert;
    ps[i].active = batch[i].active;
  }
  const auto sl = preference_loss_scores(mode, ps, theta);
  LossGrad out{sl.loss, Vec(net.param_count(), 0.0)};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    net.backward(ca[i], sl.grad_a[i], out.grad);
    net.backward(cb[i], sl.grad_b[i], out.grad);
  }
  return out;
}

// ---- score normalization ----

struct ScoreStats {
  Scores mean{};
  Scores stddev{1.0, 1.0, 1.0};

  void validate() const {
    for (std::size_t d = 0; d < kNumDims; ++d) {
      if (!(stddev[d] > 0.0)) throw ConfigError(std::string("score std for ") + kDimNames[d] + " must be positive");
    }
  }
};

inline ScoreStats score_stats(std::span<const Scores> scores) {
  if (scores.size() < 2) throw InputError("need at least two scores for statistics");
  ScoreStats s;
  for (std::size_t d = 0; d < kNumDims; ++d) {
    double m = 0.0;
    for (const auto& x : scores) m += x[d];
    m /= static_cast<double>(scores.size());
    double v = 0.0;
    for (const auto& x : scores) v += (x[d] - m) * (x[d] - m);
    s.mean[d] = m;
    s.stddev[d] = std::sqrt(v / static_cast<double>(scores.size() - 1));
  }
  return s;
}

struct RewardWeights {
  Scores w{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};

  void validate() const {
    double sum = 0.0;
    for (double x : w) {
      if (!(x >= 0.0)) throw ConfigError("reward weights must be non-negative");
      sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("reward weights must sum to 1 (simplex), got " + std::to_string(sum));
  }
};

struct NormalizedScores {
  Scores z{};
  double overall = 0.0;
};

inline NormalizedScores normalize_scores(const Scores& raw, const ScoreStats& stats,
                                         const RewardWeights& weights = {}) {
  stats.validate();
  NormalizedScores out;
  for (std::size_t d = 0; d < kNumDims; ++d) {
    out.z[d] = (raw[d] - stats.mean[d]) / stats.stddev[d];
    out.overall += weights.w[d] * out.z[d];
  }
  return out;
}

// ---- metrics ----

struct TieCalibration {
  double tau = 0.0;
  double acc3 = 0.0;
};

inline bool sign_correct(double delta, Label label) {
  return (delta > 0.0 && label == Label::AWins) || (delta < 0.0 && label == Label::BWins);
}

// Predict Tie when |delta| <= tau, otherwise the sign decides (delta == 0 is
// never a correct sign).  tau sweeps 0, the midpoints between consecutive
// distinct |delta| values, and +inf; the smallest maximizer is returned.
inline TieCalibration tie_calibration(std::span<const double> deltas, std::span<const Label> labels) {
  if (deltas.empty()) throw InputError("tie calibration needs at least one pair");
  require_same_size(deltas.size(), labels.size(), "tie calibration deltas/labels");
  std::vector<std::size_t> order(deltas.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return std::abs(deltas[i]) < std::abs(deltas[j]); });
  // Start with nothing predicted as tie; then absorb groups of equal |delta|.
  long correct = 0;
  for (std::size_t i = 0; i < deltas.size(); ++i) correct += sign_correct(deltas[i], labels[i]) ? 1 : 0;
  const double n = static_cast<double>(deltas.size());
  std::size_t k = 0;
  // tau = 0 absorbs exact zeros.
  while (k < order.size() && std::abs(deltas[order[k]]) == 0.0) {
    const auto i = order[k++];
    correct += (labels[i] == Label::Tie ? 1 : 0) - (sign_correct(deltas[i], labels[i]) ? 1 : 0);
  }
  TieCalibration best{0.0, static_cast<double>(correct) / n};
  while (k < order.size()) {
    const double value = std::abs(deltas[order[k]]);
    while (k < order.size() && std::abs(deltas[order[k]]) == value) {
      const auto i = order[k++];
      correct += (labels[i] == Label::Tie ? 1 : 0) - (sign_correct(deltas[i], labels[i]) ? 1 : 0);
    }
    const double tau =
        k < order.size() ? 0.5 * (value + std::abs(deltas[order[k]])) : std::numeric_limits<double>::infinity();
    const double acc = static_cast<double>(correct) / n;
    if (acc > best.acc3) best = {tau, acc};
  }
  return best;
}

enum class AccuracyMode : std::uint8_t { with_ties, without_ties };

inline double pairwise_accuracy(std::span<const double> deltas, std::span<const Label> labels, AccuracyMode mode) {
  if (deltas.empty()) throw InputError("accuracy needs at least one pair");
  require_same_size(deltas.size(), labels.size(), "accuracy deltas/labels");
  if (mode == AccuracyMode::with_ties) return tie_calibration(deltas, labels).acc3;
  std::size_t n = 0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (labels[i] == Label::Tie) continue;
    ++n;
    hit += sign_correct(deltas[i], labels[i]) ? 1 : 0;
  }
  if (n == 0) throw InputError("ties-excluded accuracy needs at least one non-tie label");
  return static_cast<double>(hit) / static_cast<double>(n);
}

// ---- training ----

struct RewardTrainConfig {
  PrefMode mode = PrefMode::btt;
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::silu;
  double lr = 2e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double theta = 5.0;
  double data_fraction = 1.0;
  std::vector<int> validation_classes{3, 7};
  std::uint64_t seed = 0;
};

struct RewardModel {
  RewardNet net;
  ScoreStats stats;
};

struct Split {
  std::vector<const PreferenceRecord*> train;
  std::vector<const PreferenceRecord*> validation;
};

inline Split split_by_condition(std::span<const PreferenceRecord> records, const std::vector<int>& validation_classes) {
  Split s;
  const std::set<int> val(validation_classes.begin(), validation_classes.end());
  for (const auto& r : records) (val.count(r.condition_class) ? s.validation : s.train).push_back(&r);
  return s;
}

inline std::vector<Scores> score_trajectories(const RewardNet& net, std::span<const PreferenceRecord* const> records) {
  std::vector<Scores> out;
  out.reserve(2 * records.size());
  for (const auto* r : records) {
    out.push_back(net.scores(r->sample_a.frames, r->condition_class));
    out.push_back(net.scores(r->sample_b.frames, r->condition_class));
  }
  return out;
}

namespace detail {

// Keeps the first ceil(fraction * n) records of a seeded permutation.
inline std::vector<const PreferenceRecord*> subsample(std::vector<const PreferenceRecord*> v, double fraction,
                                                      Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("data_fraction must lie in (0, 1]");
  std::shuffle(v.begin(), v.end(), rng);
  v.resize(static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(v.size()))));
  return v;
}

template <typename LossFn>
void run_epochs(std::vector<PrefItem>& items, std::size_t epochs, std::size_t batch_size, Rng& rng,
                AdamState& adam, Vec& params, LossFn&& loss_fn) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  const double base_lr = adam.lr;
  const std::size_t per_epoch = (items.size() + batch_size - 1) / batch_size;
  const std::size_t total = per_epoch * epochs;
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(items.begin(), items.end(), rng);
    for (std::size_t start = 0; start < items.size(); start += batch_size) {
      const auto end = std::min(items.size(), start + batch_size);
      auto lg = loss_fn(std::span<const PrefItem>(items.data() + start, end - start));
      adam.lr = cosine_lr(base_lr, step++, total);
      adam_update(adam, params, lg.grad);
    }
  }
  adam.lr = base_lr;
}

}  // namespace detail

inline RewardModel train_reward(const PrefDataset& data, const RewardTrainConfig& cfg) {
  const auto split = split_by_condition(data.records, cfg.validation_classes);
  if (split.train.empty() || split.validation.empty()) {
    throw InputError("reward training needs non-empty train and validation splits");
  }
  Rng rng = make_rng(derive_seed(cfg.seed, "reward-train"));
  const auto train = detail::subsample(split.train, cfg.data_fraction, rng);
  std::vector<PrefItem> items;
  for (const auto* r : train) {
    PrefItem it{r, {true, true, true}};
    if (cfg.mode == PrefMode::bt) {
      for (std::size_t d = 0; d < kNumDims; ++d) it.active[d] = r->labels[d] != Label::Tie;
      if (!it.active[0] && !it.active[1] && !it.active[2]) continue;
    }
    items.push_back(it);
  }
  if (items.empty()) throw InputError("no usable training pairs for mode " + std::string(pref_mode_name(cfg.mode)));
  const auto& toy = data.header.toy;
  RewardModel model{RewardNet::create(toy.sample_dim(), toy.n_classes, cfg.hidden, cfg.activation, cfg.seed), {}};
  Vec params = model.net.flat_params();
  auto adam = AdamState::for_size(params.size(), cfg.lr);
  detail::run_epochs(items, cfg.epochs, cfg.batch_size, rng, adam, params, [&](std::span<const PrefItem> b) {
    model.net.set_flat_params(params);
    return preference_loss(cfg.mode, model.net, b, cfg.theta);
  });
  model.net.set_flat_params(params);
  model.stats = score_stats(score_trajectories(model.net, split.validation));
  return model;
}

struct NoisyRewardTrainConfig {
  std::vector<std::size_t> hidden{64, 64};
  Activation activation = Activation::silu;
  double lr = 2e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::vector<int> validation_classes{3, 7};
  std::uint64_t seed = 0;
};

// BT loss on pairs noised with one shared (t, eps): x_t = (1 - t) x0 + t eps.
inline LossGrad noisy_pair_loss(const NoisyRewardNet& net, std::span<const PrefItem> batch,
                                std::span<const double> times, std::span<const Vec> noises) {
  require_same_size(times.size(), batch.size(), "noisy batch times");
  require_same_size(noises.size(), batch.size(), "noisy batch noises");
  std::vector<PairScores> ps(batch.size());
  std::vector<ForwardCache> ca(batch.size()), cb(batch.size());
  Vec in;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& r = *batch[i].record;
    const auto xa = interpolate(r.sample_a.frames, noises[i], times[i]);
    const auto xb = interpolate(r.sample_b.frames, noises[i], times[i]);
    net.build_input(xa, times[i], r.condition_class, in);
    forward_into(net.net(), in, ca[i]);
    net.build_input(xb, times[i], r.condition_class, in);
    forward_into(net.net(), in, cb[i]);
    for (std::size_t d = 0; d < kNumDims; ++d) {
      ps[i].a[d] = ca[i].output()[d];
      ps[i].b[d] = cb[i].output()[d];
    }
    ps[i].labels = r.labels;
    ps[i].active = batch[i].active;
  }
  const auto sl = preference_loss_scores(PrefMode::bt, ps);
  LossGrad out{sl.loss, Vec(net.net().param_count(), 0.0)};
  for (std::size_t i = 0; i < batch.size(); ++i) {
    backward_into(net.net(), ca[i], sl.grad_a[i], out.grad, {});
    backward_into(net.net(), cb[i], sl.grad_b[i], out.grad, {});
  }
  return out;
}

inline NoisyRewardNet train_noisy_reward(const PrefDataset& data, const NoisyRewardTrainConfig& cfg) {
  const auto split = split_by_condition(data.records, cfg.validation_classes);
  if (split.train.empty() || split.validation.empty()) {
    throw InputError("noisy reward training needs non-empty train and validation splits");
  }
  std::vector<PrefItem> items;
  for (const auto* r : split.train) {
    PrefItem it{r, {}};
    for (std::size_t d = 0; d < kNumDims; ++d) it.active[d] = r->labels[d] != Label::Tie;
    if (it.active[0] || it.active[1] || it.active[2]) items.push_back(it);
  }
  if (items.empty()) throw InputError("noisy reward training needs non-tie pairs");
  const auto& toy = data.header.toy;
  auto net = NoisyRewardNet::create(toy.sample_dim(), toy.n_classes, cfg.hidden, cfg.activation, cfg.seed);
  Rng rng = make_rng(derive_seed(cfg.seed, "noisy-reward-train"));
  auto adam = AdamState::for_size(net.net().param_count(), cfg.lr);
  std::vector<double> times;
  std::vector<Vec> noises;
  Vec params(net.net().params().begin(), net.net().params().end());
  detail::run_epochs(items, cfg.epochs, cfg.batch_size, rng, adam, params, [&](std::span<const PrefItem> b) {
    std::copy(params.begin(), params.end(), net.net().mutable_params().begin());
    times.resize(b.size());
    noises.resize(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) {
      times[i] = uniform01(rng);
      noises[i] = normal_vector(rng, toy.sample_dim());
    }
    return noisy_pair_loss(net, b, times, noises);
  });
  std::copy(params.begin(), params.end(), net.net().mutable_params().begin());
  return net;
}

// Score differences r(A) - r(B) for one dimension.
inline std::vector<double> clean_deltas(const RewardNet& net, std::span<const PreferenceRecord* const> records,
                                        std::size_t dim) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto* r : records) {
    out.push_back(net.scores(r->sample_a.frames, r->condition_class)[dim] -
                  net.scores(r->sample_b.frames, r->condition_class)[dim]);
  }
  return out;
}

// Deltas of the noisy reward at a fixed t with one shared noise draw per pair.
inline std::vector<double> noisy_deltas(const NoisyRewardNet& net, std::span<const PreferenceRecord* const> records,
                                        std::size_t dim, double t, std::uint64_t seed) {
  std::vector<double> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto* r = records[i];
    Rng rng = make_rng(derive_seed(seed, i));
    const auto eps = normal_vector(rng, r->sample_a.frames.size());
    const auto xa = interpolate(r->sample_a.frames, eps, t);
    const auto xb = interpolate(r->sample_b.frames, eps, t);
    out.push_back(net.scores(xa, t, r->condition_class)[dim] - net.scores(xb, t, r->condition_class)[dim]);
  }
  return out;
}

inline std::vector<Label> labels_of(std::span<const PreferenceRecord* const> records, std::size_t dim) {
  std::vector<Label> out;
  out.reserve(records.size());
  for (const auto* r : records) out.push_back(r->labels[dim]);
  return out;
}

}  // namespace flowalign
