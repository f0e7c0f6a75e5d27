#pragma once

// Inference-time reward guidance for the Euler sampler.  The guided field is
//   v~ = v - w * min(t / (1 - t), cap) * grad_x r(x_t, t, y)
// applied after classifier-free guidance and skipped at t = 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "flowalign/error.hpp"
#include "flowalign/flow.hpp"
#include "flowalign/reward.hpp"

namespace flowalign {

enum class GuidanceForm : std::uint8_t { shift = 0, mix = 1 };

inline const char* guidance_form_name(GuidanceForm f) { return f == GuidanceForm::shift ? "shift" : "mix"; }

inline GuidanceForm parse_guidance_form(const std::string& s) {
  if (s == "shift") return GuidanceForm::shift;
  if (s == "mix") return GuidanceForm::mix;
  throw ConfigError("unknown guidance form '" + s + "'");
}

struct GuidanceSpec {
  RewardWeights weights{};
  double w_scale = 0.1;
  double cfg_scale = 1.0;
  double factor_cap = 20.0;
  GuidanceForm form = GuidanceForm::shift;

  void validate() const {
    weights.validate();
    if (!(w_scale >= 0.0)) throw ConfigError("guidance w_scale must be >= 0");
    if (!(factor_cap > 0.0)) throw ConfigError("guidance factor_cap must be > 0");
  }
};

inline double guidance_factor(double t, double factor_cap) { return std::min(t / (1.0 - t), factor_cap); }

inline Vec guided_velocity(std::span<const double> v, std::span<const double> grad_r, double t, double w_scale,
                           double factor_cap) {
  require_same_size(v.size(), grad_r.size(), "guided_velocity: shape mismatch");
  if (!(t >= 0.0 && t < 1.0)) throw DomainError("guided_velocity requires t in [0, 1)");
  const double k = w_scale * guidance_factor(t, factor_cap);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - k * grad_r[i];
  return out;
}

// Convex combination of the model field and the reward-tilted score field,
//   (1 - w) v + w [x_t / (t - 1) + t / (t - 1) grad_r].
// Experimental: it targets p^(1-w) exp(r)^w rather than p exp(r)^w.
inline Vec guided_velocity_mix(std::span<const double> v, std::span<const double> x_t, std::span<const double> grad_r,
                               double t, double w_scale) {
  require_same_size(v.size(), grad_r.size(), "guided_velocity_mix: shape mismatch");
  require_same_size(v.size(), x_t.size(), "guided_velocity_mix: shape mismatch");
  if (!(t >= 0.0 && t < 1.0)) throw DomainError("guided_velocity_mix requires t in [0, 1)");
  const double a = 1.0 / (t - 1.0);
  const double b = t / (t - 1.0);
  Vec out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = (1.0 - w_scale) * v[i] + w_scale * (a * x_t[i] + b * grad_r[i]);
  return out;
}

struct GuidanceStep {
  double t = 0.0;
  double reward = 0.0;
  double grad_norm = 0.0;
  double factor = 0.0;
};

struct GuidedSample {
  Vec sample;
  std::vector<GuidanceStep> trace;
};

// Euler loop with reward guidance.  reward_fn(x, t) returns {value, d value / d x}.
template <typename VelocityFn, typename RewardFn>
GuidedSample guided_integrate(VelocityFn&& velocity, RewardFn&& reward_fn, Vec x, const FlowSchedule& schedule,
                              const GuidanceSpec& spec) {
  schedule.validate();
  GuidedSample out;
  for (std::size_t i = 0; i < schedule.n_steps(); ++i) {
    const double t = schedule.grid[i];
    const double dt = schedule.grid[i] - schedule.grid[i + 1];
    Vec v = velocity(std::span<const double>(x), t);
    if (t != 1.0) {
      const auto rg = reward_fn(std::span<const double>(x), t);
      const double gn = l2_norm(rg.grad);
      if (!std::isfinite(gn)) throw NumericError("non-finite reward gradient at step " + std::to_string(i));
      const double factor = spec.form == GuidanceForm::shift ? guidance_factor(t, spec.factor_cap) : t / (1.0 - t);
      out.trace.push_back({t, rg.value, gn, factor});
      if (spec.w_scale != 0.0) {
        v = spec.form == GuidanceForm::shift ? guided_velocity(v, rg.grad, t, spec.w_scale, spec.factor_cap)
                                             : guided_velocity_mix(v, x, rg.grad, t, spec.w_scale);
      }
    }
    for (std::size_t k = 0; k < x.size(); ++k) x[k] -= dt * v[k];
    for (double xk : x) {
      if (!std::isfinite(xk)) throw NumericError("sampler state non-finite at step " + std::to_string(i));
    }
  }
  out.sample = std::move(x);
  return out;
}

inline GuidedSample nrg_sample(const VelocityNet& policy, const NoisyRewardNet& noisy_rm, const GuidanceSpec& spec,
                               const FlowSchedule& schedule, int cond, std::uint64_t seed) {
  spec.validate();
  auto velocity = [&](std::span<const double> x, double t) {
    return sample_velocity(policy, x, t, cond, spec.cfg_scale);
  };
  auto reward = [&](std::span<const double> x, double t) {
    return noisy_rm.weighted_reward(x, t, cond, spec.weights.w);
  };
  return guided_integrate(velocity, reward, initial_noise(seed, policy.sample_dim()), schedule, spec);
}

}  // namespace flowalign
