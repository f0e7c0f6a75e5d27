#pragma once

// Training-time alignment of a velocity net: supervised fine-tuning on chosen
// samples, reward-weighted velocity regression, and flow DPO against a
// frozen reference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "flowalign/error.hpp"
#include "flowalign/flow.hpp"
#include "flowalign/netcore.hpp"
#include "flowalign/reward.hpp"
#include "flowalign/rng.hpp"
#include "flowalign/toyworld.hpp"

namespace flowalign {

enum class BetaSchedule : std::uint8_t { constant = 0, quadratic = 1 };

inline const char* beta_schedule_name(BetaSchedule s) { return s == BetaSchedule::constant ? "constant" : "quadratic"; }

inline BetaSchedule parse_beta_schedule(const std::string& s) {
  if (s == "constant") return BetaSchedule::constant;
  if (s == "quadratic") return BetaSchedule::quadratic;
  throw ConfigError("unknown beta schedule '" + s + "'");
}

struct DpoConfig {
  double beta = 2.0;
  BetaSchedule schedule = BetaSchedule::constant;

  // beta_t = beta for the constant schedule, beta (1 - t)^2 for the quadratic one.
  double effective_beta(double t) const {
    if (!(beta > 0.0)) throw ConfigError("DPO beta must be positive");
    return schedule == BetaSchedule::constant ? beta : beta * (1.0 - t) * (1.0 - t);
  }
};

// One chosen/rejected pair noised with a shared (t, eps).
struct AlignPair {
  int cond = 0;
  double t = 0.0;
  Vec xt_w, xt_l;
  Vec v_w, v_l;
};

struct AlignBatch {
  std::vector<AlignPair> pairs;

  std::size_t size() const { return pairs.size(); }

  void push(std::span<const double> x0_w, std::span<const double> x0_l, int cond, double t,
            std::span<const double> noise) {
    pairs.push_back({cond, t, interpolate(x0_w, noise, t), interpolate(x0_l, noise, t), target_velocity(x0_w, noise),
                     target_velocity(x0_l, noise)});
  }
};

struct DpoLoss {
  double loss = 0.0;
  Vec grad;
  double mean_inner = 0.0;  // average argument of log-sigmoid, a training diagnostic
};

namespace detail {

inline double squared_error(std::span<const double> target, std::span<const double> pred) {
  double s = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const double r = target[i] - pred[i];
    s += r * r;
  }
  return s;
}

}  // namespace detail

// -log sigmoid(-(beta_t / 2) [(|v_w - v_th(x_w)|^2 - |v_w - v_ref(x_w)|^2)
//                             - (|v_l - v_th(x_l)|^2 - |v_l - v_ref(x_l)|^2)]),
// averaged over pairs.  Gradients flow through the policy terms only.
inline DpoLoss flow_dpo_loss(const VelocityNet& policy, const VelocityNet& ref, const AlignBatch& batch,
                             const DpoConfig& cfg) {
  if (batch.size() == 0) throw InputError("empty DPO batch");
  DpoLoss out{0.0, Vec(policy.net().param_count(), 0.0), 0.0};
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  Vec in;
  ForwardCache cw, cl;
  Vec up_w(policy.sample_dim()), up_l(policy.sample_dim());
  for (const auto& p : batch.pairs) {
    const double beta_t = cfg.effective_beta(p.t);
    policy.build_input(p.xt_w, p.t, p.cond, in);
    forward_into(policy.net(), in, cw);
    const Vec ref_w = net_forward(ref.net(), in);
    policy.build_input(p.xt_l, p.t, p.cond, in);
    forward_into(policy.net(), in, cl);
    const Vec ref_l = net_forward(ref.net(), in);
    const double diff_w = detail::squared_error(p.v_w, cw.output()) - detail::squared_error(p.v_w, ref_w);
    const double diff_l = detail::squared_error(p.v_l, cl.output()) - detail::squared_error(p.v_l, ref_l);
    const double inner = -0.5 * beta_t * (diff_w - diff_l);
    if (!std::isfinite(inner)) throw NumericError("non-finite DPO inner term");
    out.loss -= inv_n * log_sigmoid(inner);
    out.mean_inner += inv_n * inner;
    // d loss / d inner = -sigmoid(-inner); d inner / d pred_w = beta_t (v_w - pred_w)
    const double g = -logistic(-inner) * inv_n;
    if (g == 0.0 || beta_t == 0.0) continue;
    const auto pw = cw.output();
    const auto pl = cl.output();
    for (std::size_t i = 0; i < up_w.size(); ++i) {
      up_w[i] = g * beta_t * (p.v_w[i] - pw[i]);
      up_l[i] = -g * beta_t * (p.v_l[i] - pl[i]);
    }
    backward_into(policy.net(), cw, up_w, out.grad, {});
    backward_into(policy.net(), cl, up_l, out.grad, {});
  }
  return out;
}

inline constexpr double kRwrClip = 20.0;

// Mean over samples of exp(clip(r, -20, 20)) |v - v_th(x_t)|^2.
inline LossGrad flow_rwr_loss(const VelocityNet& policy, const FlowBatch& batch, std::span<const double> rewards) {
  require_same_size(rewards.size(), batch.size(), "RWR reward count");
  Vec weights(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    if (!std::isfinite(rewards[i])) throw NumericError("non-finite RWR reward at index " + std::to_string(i));
    weights[i] = std::exp(std::clamp(rewards[i], -kRwrClip, kRwrClip));
  }
  return weighted_velocity_loss(policy, batch, weights);
}

inline LossGrad sft_loss(const VelocityNet& policy, const FlowBatch& chosen) {
  if (chosen.size() == 0) throw InputError("SFT needs at least one chosen sample");
  return fm_loss(policy, chosen);
}

enum class AlignMethod : std::uint8_t { sft = 0, rwr = 1, dpo = 2 };

inline const char* align_method_name(AlignMethod m) {
  switch (m) {
    case AlignMethod::sft: return "sft";
    case AlignMethod::rwr: return "rwr";
    case AlignMethod::dpo: return "dpo";
  }
  return "?";
}

inline AlignMethod parse_align_method(const std::string& s) {
  if (s == "sft") return AlignMethod::sft;
  if (s == "rwr") return AlignMethod::rwr;
  if (s == "dpo") return AlignMethod::dpo;
  throw ConfigError("unknown alignment method '" + s + "'");
}

struct AlignConfig {
  AlignMethod method = AlignMethod::dpo;
  DpoConfig dpo{};
  double lr = 3e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: no cap beyond the epoch count
  double grad_clip = 0.0;     // 0: no clipping
  std::vector<int> heldout_classes{3, 7};
  std::uint64_t seed = 0;
};

struct AlignResult {
  VelocityNet net;
  std::vector<CurveRow> curve;
};

inline AlignResult align_train(const VelocityNet& pretrained, const PrefDataset& data, const AlignConfig& cfg) {
  if (!data.header.relabeled) {
    throw InputError("alignment requires a reward-relabeled dataset (run reward relabeling first)");
  }
  const std::set<int> heldout(cfg.heldout_classes.begin(), cfg.heldout_classes.end());
  std::vector<const PreferenceRecord*> pairs;
  for (const auto& r : data.records) {
    if (!r.relabel) throw InputError("dataset record lacks relabel information");
    if (!heldout.count(r.condition_class)) pairs.push_back(&r);
  }
  if (pairs.empty()) throw InputError("no alignment training pairs outside the held-out classes");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");

  AlignResult res{pretrained, {}};
  const VelocityNet ref = pretrained;
  auto adam = AdamState::for_size(res.net.net().param_count(), cfg.lr);
  Rng rng = make_rng(derive_seed(cfg.seed, std::string("align-") + align_method_name(cfg.method)));
  const std::size_t dim = pretrained.sample_dim();
  std::size_t step = 0;
  auto chosen = [](const PreferenceRecord& r) -> const Trajectory& {
    return r.relabel->chosen_is_a ? r.sample_a : r.sample_b;
  };
  auto rejected = [](const PreferenceRecord& r) -> const Trajectory& {
    return r.relabel->chosen_is_a ? r.sample_b : r.sample_a;
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(pairs.begin(), pairs.end(), rng);
    for (std::size_t start = 0; start < pairs.size(); start += cfg.batch_size) {
      if (cfg.max_steps != 0 && step >= cfg.max_steps) break;
      const auto end = std::min(pairs.size(), start + cfg.batch_size);
      double loss = 0.0;
      Vec grad;
      if (cfg.method == AlignMethod::dpo) {
        AlignBatch batch;
        for (std::size_t i = start; i < end; ++i) {
          const auto& r = *pairs[i];
          const double t = uniform01(rng);
          const Vec noise = normal_vector(rng, dim);
          batch.push(chosen(r).frames, rejected(r).frames, r.condition_class, t, noise);
        }
        auto dl = flow_dpo_loss(res.net, ref, batch, cfg.dpo);
        loss = dl.loss;
        grad = std::move(dl.grad);
      } else if (cfg.method == AlignMethod::sft) {
        FlowBatch batch;
        for (std::size_t i = start; i < end; ++i) {
          const auto& r = *pairs[i];
          const double t = uniform01(rng);
          batch.push(chosen(r).frames, normal_vector(rng, dim), t, r.condition_class);
        }
        auto lg = sft_loss(res.net, batch);
        loss = lg.loss;
        grad = std::move(lg.grad);
      } else {
        FlowBatch batch;
        Vec rewards;
        for (std::size_t i = start; i < end; ++i) {
          const auto& r = *pairs[i];
          for (int side = 0; side < 2; ++side) {
            const auto& traj = side == 0 ? r.sample_a : r.sample_b;
            const double t = uniform01(rng);
            batch.push(traj.frames, normal_vector(rng, dim), t, r.condition_class);
            rewards.push_back(side == 0 ? r.relabel->overall_a : r.relabel->overall_b);
          }
        }
        auto lg = flow_rwr_loss(res.net, batch, rewards);
        loss = lg.loss;
        grad = std::move(lg.grad);
      }
      const double gn = cfg.grad_clip > 0.0 ? clip_grad_norm(grad, cfg.grad_clip) : l2_norm(grad);
      adam_step(adam, res.net.net(), grad);
      res.curve.push_back({step, loss, gn});
      ++step;
    }
  }
  return res;
}

}  // namespace flowalign
