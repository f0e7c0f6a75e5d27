#pragma once

// Rectified flow with the convention x_t = (1 - t) x0 + t x1: data sits at
// t = 0 and standard-normal noise at t = 1.  Sampling therefore integrates
// from t = 1 down to t = 0 with x <- x - dt * v.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "flowalign/checkpoint.hpp"
#include "flowalign/error.hpp"
#include "flowalign/netcore.hpp"
#include "flowalign/rng.hpp"

namespace flowalign {

using Vec = std::vector<double>;
using Condition = std::optional<int>;  // nullopt is the unconditional (CFG-dropped) input

struct FlowSchedule {
  std::vector<double> grid;  // strictly decreasing from 1 to 0

  std::size_t n_steps() const { return grid.empty() ? 0 : grid.size() - 1; }

  static FlowSchedule uniform(std::size_t n_steps) {
    if (n_steps < 2) throw ConfigError("flow schedule needs at least 2 steps");
    FlowSchedule s;
    s.grid.resize(n_steps + 1);
    for (std::size_t i = 0; i <= n_steps; ++i) {
      s.grid[i] = 1.0 - static_cast<double>(i) / static_cast<double>(n_steps);
    }
    s.grid.back() = 0.0;
    return s;
  }

  void validate() const {
    if (grid.size() < 3) throw ConfigError("flow schedule needs at least 2 steps");
    if (grid.front() != 1.0 || grid.back() != 0.0) throw ConfigError("flow schedule must run from 1 to 0");
    for (std::size_t i = 1; i < grid.size(); ++i) {
      if (!(grid[i] < grid[i - 1])) throw ConfigError("flow schedule must be strictly decreasing");
    }
  }
};

inline Vec interpolate(std::span<const double> x0, std::span<const double> x1, double t) {
  require_same_size(x0.size(), x1.size(), "interpolate: x0/x1 shape mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("interpolate: t outside [0, 1]");
  Vec out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = (1.0 - t) * x0[i] + t * x1[i];
  return out;
}

inline Vec target_velocity(std::span<const double> x0, std::span<const double> x1) {
  require_same_size(x0.size(), x1.size(), "target_velocity: x0/x1 shape mismatch");
  Vec v(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) v[i] = x1[i] - x0[i];
  return v;
}

// Terminal noise implied by a velocity prediction: x1 = x_t + (1 - t) v.
// For the true velocity this recovers x1 exactly, and
//   |x1 - x1_pred|^2 = (1 - t)^2 |v - v_pred|^2.
inline Vec predict_terminal_noise(std::span<const double> x_t, double t, std::span<const double> v_pred) {
  require_same_size(x_t.size(), v_pred.size(), "predict_terminal_noise: shape mismatch");
  if (!(t < 1.0)) throw DomainError("predict_terminal_noise requires t < 1");
  Vec out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) out[i] = x_t[i] + (1.0 - t) * v_pred[i];
  return out;
}

inline Vec cfg_velocity(std::span<const double> v_cond, std::span<const double> v_uncond, double scale) {
  require_same_size(v_cond.size(), v_uncond.size(), "cfg_velocity: shape mismatch");
  Vec out(v_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v_uncond[i] + scale * (v_cond[i] - v_uncond[i]);
  return out;
}

inline constexpr std::size_t kTimeEmbeddingDim = 8;

// Four frequencies (pi/2, pi, 2pi, 4pi), each as a sin/cos pair.
inline void time_embedding(double t, std::span<double> out) {
  for (std::size_t k = 0; k < 4; ++k) {
    const double w = 0.5 * std::numbers::pi * static_cast<double>(1u << k);
    out[2 * k] = std::sin(w * t);
    out[2 * k + 1] = std::cos(w * t);
  }
}

// Class conditioning: one-hot plus the class position on the unit circle,
// the toy counterpart of a prompt embedding shared between related prompts.
inline std::size_t class_embedding_dim(std::size_t n_classes) { return n_classes + 2; }

inline void class_embedding(Condition cond, std::size_t n_classes, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  if (!cond) return;
  if (*cond < 0 || static_cast<std::size_t>(*cond) >= n_classes) {
    throw DomainError("condition class " + std::to_string(*cond) + " out of range");
  }
  out[static_cast<std::size_t>(*cond)] = 1.0;
  const double angle = 2.0 * std::numbers::pi * (*cond) / static_cast<double>(n_classes);
  out[n_classes] = std::cos(angle);
  out[n_classes + 1] = std::sin(angle);
}

// v_theta(x_t, t, y) over input [x_t | time embedding | class embedding | uncond flag].
class VelocityNet {
 public:
  VelocityNet() = default;

  VelocityNet(Net net, std::size_t sample_dim, std::size_t n_classes)
      : net_(std::move(net)), sample_dim_(sample_dim), n_classes_(n_classes) {
    require_same_size(net_.input_dim(), input_dim(sample_dim, n_classes), "velocity net input width");
    require_same_size(net_.output_dim(), sample_dim, "velocity net output width");
  }

  static std::size_t input_dim(std::size_t sample_dim, std::size_t n_classes) {
    return sample_dim + kTimeEmbeddingDim + class_embedding_dim(n_classes) + 1;
  }

  static VelocityNet create(std::size_t sample_dim, std::size_t n_classes, const std::vector<std::size_t>& hidden,
                            Activation act, std::uint64_t seed) {
    NetSpec spec;
    spec.layer_widths.push_back(input_dim(sample_dim, n_classes));
    spec.layer_widths.insert(spec.layer_widths.end(), hidden.begin(), hidden.end());
    spec.layer_widths.push_back(sample_dim);
    spec.activation = act;
    spec.seed = seed;
    return VelocityNet(net_init(spec), sample_dim, n_classes);
  }

  std::size_t sample_dim() const noexcept { return sample_dim_; }
  std::size_t n_classes() const noexcept { return n_classes_; }
  const Net& net() const noexcept { return net_; }
  Net& net() noexcept { return net_; }

  void build_input(std::span<const double> x, double t, Condition cond, Vec& out) const {
    require_same_size(x.size(), sample_dim_, "velocity net sample width");
    out.resize(net_.input_dim());
    std::copy(x.begin(), x.end(), out.begin());
    auto rest = std::span<double>(out).subspan(sample_dim_);
    time_embedding(t, rest.first(kTimeEmbeddingDim));
    class_embedding(cond, n_classes_, rest.subspan(kTimeEmbeddingDim, class_embedding_dim(n_classes_)));
    out.back() = cond ? 0.0 : 1.0;
  }

  Vec velocity(std::span<const double> x, double t, Condition cond) const {
    Vec in;
    build_input(x, t, cond, in);
    return net_forward(net_, in);
  }

  Checkpoint to_checkpoint(std::map<std::string, std::string> meta = {}) const {
    meta["kind"] = "velocity";
    meta["sample_dim"] = std::to_string(sample_dim_);
    meta["n_classes"] = std::to_string(n_classes_);
    return Checkpoint{std::move(meta), {net_}};
  }

  static VelocityNet from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.meta.count("kind") == 0 || ckpt.meta.at("kind") != "velocity" || ckpt.nets.size() != 1) {
      throw InputError("checkpoint does not hold a velocity net");
    }
    return VelocityNet(ckpt.nets.front(), std::stoul(ckpt.meta.at("sample_dim")),
                       std::stoul(ckpt.meta.at("n_classes")));
  }

  bool operator==(const VelocityNet&) const = default;

 private:
  Net net_;
  std::size_t sample_dim_ = 0;
  std::size_t n_classes_ = 0;
};

struct FlowBatch {
  std::vector<Vec> x0;
  std::vector<Vec> x1;
  std::vector<double> t;
  std::vector<Condition> y;
  std::vector<Vec> x_t;
  std::vector<Vec> v_target;

  std::size_t size() const { return x0.size(); }

  void push(Vec data, Vec noise, double time, Condition cond) {
    x_t.push_back(interpolate(data, noise, time));
    v_target.push_back(target_velocity(data, noise));
    x0.push_back(std::move(data));
    x1.push_back(std::move(noise));
    t.push_back(time);
    y.push_back(cond);
  }
};

// t ~ U(0, 1), x1 ~ N(0, I); each condition is dropped with probability cond_dropout.
inline FlowBatch make_flow_batch(std::span<const Vec> data, std::span<const int> conds, Rng& rng,
                                 double cond_dropout = 0.0) {
  require_same_size(data.size(), conds.size(), "flow batch data/condition count");
  FlowBatch b;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double t = uniform01(rng);
    Vec noise = normal_vector(rng, data[i].size());
    const bool drop = cond_dropout > 0.0 && uniform01(rng) < cond_dropout;
    b.push(data[i], std::move(noise), t, drop ? Condition{} : Condition{conds[i]});
  }
  return b;
}

struct LossGrad {
  double loss = 0.0;
  Vec grad;
};

// Per sample: sum of squared velocity error over coordinates; averaged over the
// batch.  Optional per-sample weights scale each term (used by reward-weighted
// regression).
inline LossGrad weighted_velocity_loss(const VelocityNet& net, const FlowBatch& batch,
                                       std::span<const double> weights = {}) {
  if (batch.size() == 0) throw InputError("empty flow batch");
  if (!weights.empty()) require_same_size(weights.size(), batch.size(), "per-sample weight count");
  LossGrad out{0.0, Vec(net.net().param_count(), 0.0)};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Vec in;
  Vec upstream(net.sample_dim());
  ForwardCache cache;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const double w = weights.empty() ? 1.0 : weights[s];
    net.build_input(batch.x_t[s], batch.t[s], batch.y[s], in);
    forward_into(net.net(), in, cache);
    const auto pred = cache.output();
    double sq = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double r = batch.v_target[s][i] - pred[i];
      sq += r * r;
      upstream[i] = -2.0 * w * r * inv_n;
    }
    out.loss += w * sq * inv_n;
    backward_into(net.net(), cache, upstream, out.grad, {});
  }
  if (!std::isfinite(out.loss)) throw NumericError("flow loss is non-finite");
  return out;
}

inline LossGrad fm_loss(const VelocityNet& net, const FlowBatch& batch) { return weighted_velocity_loss(net, batch); }

inline Vec initial_noise(std::uint64_t seed, std::size_t dim) {
  Rng rng = make_rng(derive_seed(seed, "sample-noise"));
  return normal_vector(rng, dim);
}

// Integrates dx/dt = field(x, t) from t = 1 to t = 0 with explicit Euler.
template <typename Field>
Vec euler_integrate(Field&& field, Vec x, const FlowSchedule& schedule) {
  schedule.validate();
  for (std::size_t i = 0; i < schedule.n_steps(); ++i) {
    const double t = schedule.grid[i];
    const double dt = schedule.grid[i] - schedule.grid[i + 1];
    const Vec v = field(std::span<const double>(x), t);
    require_same_size(v.size(), x.size(), "velocity field width");
    for (std::size_t k = 0; k < x.size(); ++k) x[k] -= dt * v[k];
    for (double xk : x) {
      if (!std::isfinite(xk)) throw NumericError("sampler state non-finite at step " + std::to_string(i));
    }
  }
  return x;
}

inline Vec sample_velocity(const VelocityNet& net, std::span<const double> x, double t, Condition y, double cfg_scale) {
  Vec v = net.velocity(x, t, y);
  if (cfg_scale != 1.0) {
    const Vec v_uncond = net.velocity(x, t, std::nullopt);
    v = cfg_velocity(v, v_uncond, cfg_scale);
  }
  return v;
}

inline Vec euler_sample(const VelocityNet& net, Condition y, const FlowSchedule& schedule, double cfg_scale,
                        std::uint64_t seed) {
  auto field = [&](std::span<const double> x, double t) { return sample_velocity(net, x, t, y, cfg_scale); };
  return euler_integrate(field, initial_noise(seed, net.sample_dim()), schedule);
}

struct CurveRow {
  std::size_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct FlowTrainConfig {
  std::vector<std::size_t> hidden{128, 128};
  Activation activation = Activation::tanh;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::size_t steps = 3000;
  double cond_dropout = 0.1;
  std::uint64_t seed = 0;
};

struct FlowTrainResult {
  VelocityNet net;
  std::vector<CurveRow> curve;
};

// Flow-matching pretraining on a corpus of flattened samples.
inline FlowTrainResult train_flow(std::span<const Vec> data, std::span<const int> conds, std::size_t n_classes,
                                  const FlowTrainConfig& cfg) {
  if (data.empty()) throw InputError("empty pretraining corpus");
  require_same_size(data.size(), conds.size(), "corpus data/condition count");
  FlowTrainResult res{VelocityNet::create(data.front().size(), n_classes, cfg.hidden, cfg.activation,
                                          derive_seed(cfg.seed, "flow-init")),
                      {}};
  auto adam = AdamState::for_size(res.net.net().param_count(), cfg.lr);
  Rng rng = make_rng(derive_seed(cfg.seed, "flow-train"));
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::vector<Vec> bx(cfg.batch_size);
  std::vector<int> by(cfg.batch_size);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const auto j = pick(rng);
      bx[i] = data[j];
      by[i] = conds[j];
    }
    const auto batch = make_flow_batch(bx, by, rng, cfg.cond_dropout);
    auto lg = fm_loss(res.net, batch);
    const double gn = l2_norm(lg.grad);
    adam.lr = cosine_lr(cfg.lr, step, cfg.steps);
    adam_step(adam, res.net.net(), lg.grad);
    res.curve.push_back({step, lg.loss, gn});
  }
  adam.lr = cfg.lr;
  return res;
}

}  // namespace flowalign
