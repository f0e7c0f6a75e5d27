#pragma once

// Small fully-connected networks with hand-written reverse mode, Adam, and a
// central-difference gradient checker.
//
// Parameter layout (portable across checkpoints): layer-major; within a layer
// the weight matrix comes first in row-major [out][in] order, then the bias.
// Hidden layers apply the activation, the output layer is linear.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "flowalign/error.hpp"
#include "flowalign/rng.hpp"

namespace flowalign {

enum class Activation : std::uint8_t { tanh = 0, relu = 1, silu = 2 };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::silu: return "silu";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "silu") return Activation::silu;
  throw ConfigError("unknown activation '" + s + "'");
}

struct NetSpec {
  std::vector<std::size_t> layer_widths;
  Activation activation = Activation::tanh;
  std::uint64_t seed = 0;

  bool operator==(const NetSpec&) const = default;
};

inline void validate(const NetSpec& spec) {
  if (spec.layer_widths.size() < 2) {
    throw ConfigError("net spec needs at least 2 layer widths, got " +
                      std::to_string(spec.layer_widths.size()));
  }
  for (auto w : spec.layer_widths) {
    if (w < 1) throw ConfigError("layer widths must be >= 1");
  }
  if (static_cast<std::uint8_t>(spec.activation) > 2) throw ConfigError("bad activation id");
}

inline std::size_t analytic_param_count(const NetSpec& spec) {
  std::size_t n = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
    n += spec.layer_widths[l] * spec.layer_widths[l + 1] + spec.layer_widths[l + 1];
  }
  return n;
}

class Net {
 public:
  Net() = default;

  Net(NetSpec spec, std::vector<double> params) : spec_(std::move(spec)), params_(std::move(params)) {
    validate(spec_);
    if (params_.size() != analytic_param_count(spec_)) {
      throw ShapeError("parameter vector has " + std::to_string(params_.size()) + " entries, spec implies " +
                       std::to_string(analytic_param_count(spec_)));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (!std::isfinite(params_[i])) throw NumericError("non-finite parameter at index " + std::to_string(i));
    }
    build_offsets();
  }

  const NetSpec& spec() const noexcept { return spec_; }
  std::span<const double> params() const noexcept { return params_; }
  std::span<double> mutable_params() noexcept { return params_; }
  std::size_t param_count() const noexcept { return params_.size(); }
  std::size_t input_dim() const noexcept { return spec_.layer_widths.front(); }
  std::size_t output_dim() const noexcept { return spec_.layer_widths.back(); }
  std::size_t layer_count() const noexcept { return spec_.layer_widths.size() - 1; }

  // Offset of layer l's weight block; its bias follows at weight_offset + out*in.
  std::size_t weight_offset(std::size_t layer) const noexcept { return offsets_[layer]; }

  bool operator==(const Net& o) const { return spec_ == o.spec_ && params_ == o.params_; }

 private:
  void build_offsets() {
    offsets_.clear();
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < spec_.layer_widths.size(); ++l) {
      offsets_.push_back(off);
      off += spec_.layer_widths[l] * spec_.layer_widths[l + 1] + spec_.layer_widths[l + 1];
    }
  }

  NetSpec spec_;
  std::vector<double> params_;
  std::vector<std::size_t> offsets_;
};

inline Net net_init(const NetSpec& spec) {
  validate(spec);
  std::vector<double> params(analytic_param_count(spec), 0.0);
  Rng rng = make_rng(spec.seed);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_widths.size(); ++l) {
    const std::size_t in = spec.layer_widths[l];
    const std::size_t out = spec.layer_widths[l + 1];
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = 0; i < in * out; ++i) params[off + i] = dist(rng);
    off += in * out + out;  // biases stay zero
  }
  return Net(spec, std::move(params));
}

namespace detail {

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::tanh: return std::tanh(x);
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::silu: return x / (1.0 + std::exp(-x));
  }
  return x;
}

// Derivative expressed through the pre-activation and the activation value.
inline double activate_grad(Activation a, double pre, double post) {
  switch (a) {
    case Activation::tanh: return 1.0 - post * post;
    case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
    case Activation::silu: {
      const double s = 1.0 / (1.0 + std::exp(-pre));
      return s + pre * s * (1.0 - s);
    }
  }
  return 1.0;
}

}  // namespace detail

// Activations kept from a forward pass so backward can run without recompute.
struct ForwardCache {
  std::vector<std::vector<double>> pre;   // per layer, before activation
  std::vector<std::vector<double>> post;  // post[0] is the input, post[l+1] the output of layer l

  std::span<const double> output() const { return post.back(); }
};

inline void forward_into(const Net& net, std::span<const double> input, ForwardCache& cache) {
  require_same_size(input.size(), net.input_dim(), "net input width mismatch");
  const auto& widths = net.spec().layer_widths;
  const std::size_t layers = net.layer_count();
  cache.pre.resize(layers);
  cache.post.resize(layers + 1);
  cache.post[0].assign(input.begin(), input.end());
  const auto params = net.params();
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    const double* w = params.data() + net.weight_offset(l);
    const double* b = w + in * out;
    const double* x = cache.post[l].data();
    auto& pre = cache.pre[l];
    auto& post = cache.post[l + 1];
    pre.resize(out);
    post.resize(out);
    const bool hidden = l + 1 < layers;
    for (std::size_t o = 0; o < out; ++o) {
      const double* row = w + o * in;
      double acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
      pre[o] = acc;
      post[o] = hidden ? detail::activate(net.spec().activation, acc) : acc;
    }
  }
}

inline std::vector<double> net_forward(const Net& net, std::span<const double> input) {
  ForwardCache cache;
  forward_into(net, input, cache);
  return cache.post.back();
}

// Reverse pass of upstream^T * output.  param_grad is accumulated into (so a
// batch can share one buffer); input_grad is overwritten when non-empty.
inline void backward_into(const Net& net, const ForwardCache& cache, std::span<const double> upstream,
                          std::span<double> param_grad, std::span<double> input_grad) {
  require_same_size(upstream.size(), net.output_dim(), "upstream width mismatch");
  require_same_size(param_grad.size(), net.param_count(), "param gradient buffer mismatch");
  if (!input_grad.empty()) require_same_size(input_grad.size(), net.input_dim(), "input gradient buffer mismatch");
  const auto& widths = net.spec().layer_widths;
  const auto params = net.params();
  std::vector<double> delta(upstream.begin(), upstream.end());
  std::vector<double> prev;
  for (std::size_t l = net.layer_count(); l-- > 0;) {
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    const std::size_t off = net.weight_offset(l);
    const double* w = params.data() + off;
    double* gw = param_grad.data() + off;
    double* gb = gw + in * out;
    const double* x = cache.post[l].data();
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      gb[o] += d;
      if (d == 0.0) continue;
      double* grow = gw + o * in;
      for (std::size_t i = 0; i < in; ++i) grow[i] += d * x[i];
    }
    if (l == 0 && input_grad.empty()) break;
    prev.assign(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* row = w + o * in;
      for (std::size_t i = 0; i < in; ++i) prev[i] += row[i] * d;
    }
    if (l == 0) {
      std::copy(prev.begin(), prev.end(), input_grad.begin());
      break;
    }
    const auto& pre = cache.pre[l - 1];
    const auto& post = cache.post[l];
    for (std::size_t i = 0; i < in; ++i) prev[i] *= detail::activate_grad(net.spec().activation, pre[i], post[i]);
    delta.swap(prev);
  }
}

// Input-only reverse pass; skips parameter-gradient accumulation.
inline void input_gradient_into(const Net& net, const ForwardCache& cache, std::span<const double> upstream,
                                std::span<double> input_grad) {
  require_same_size(upstream.size(), net.output_dim(), "upstream width mismatch");
  require_same_size(input_grad.size(), net.input_dim(), "input gradient buffer mismatch");
  const auto& widths = net.spec().layer_widths;
  const auto params = net.params();
  std::vector<double> delta(upstream.begin(), upstream.end());
  std::vector<double> prev;
  for (std::size_t l = net.layer_count(); l-- > 0;) {
    const std::size_t in = widths[l];
    const std::size_t out = widths[l + 1];
    const double* w = params.data() + net.weight_offset(l);
    prev.assign(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* row = w + o * in;
      for (std::size_t i = 0; i < in; ++i) prev[i] += row[i] * d;
    }
    if (l == 0) break;
    const auto& pre = cache.pre[l - 1];
    const auto& post = cache.post[l];
    for (std::size_t i = 0; i < in; ++i) prev[i] *= detail::activate_grad(net.spec().activation, pre[i], post[i]);
    delta.swap(prev);
  }
  std::copy(prev.begin(), prev.end(), input_grad.begin());
}

struct NetGrads {
  std::vector<double> param_grad;
  std::vector<double> input_grad;
};

inline NetGrads net_grads(const Net& net, std::span<const double> input, std::span<const double> upstream) {
  ForwardCache cache;
  forward_into(net, input, cache);
  NetGrads g{std::vector<double>(net.param_count(), 0.0), std::vector<double>(net.input_dim(), 0.0)};
  backward_into(net, cache, upstream, g.param_grad, g.input_grad);
  return g;
}

// Cosine decay from base to zero over total steps.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_size(std::size_t n, double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                            double eps = 1e-8) {
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) {
      throw ConfigError("adam betas must lie in (0, 1)");
    }
    if (!(lr > 0.0)) throw ConfigError("adam learning rate must be positive");
    return AdamState{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0), 0, lr, beta1, beta2, eps};
  }
};

inline void adam_update(AdamState& state, std::span<double> params, std::span<const double> grad) {
  require_same_size(grad.size(), params.size(), "adam gradient length");
  require_same_size(state.m.size(), params.size(), "adam state length");
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) throw NumericError("non-finite gradient at index " + std::to_string(i));
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < grad.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

inline void adam_step(AdamState& state, Net& net, std::span<const double> grad) {
  adam_update(state, net.mutable_params(), grad);
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// Rescales grad in place so its norm is at most max_norm; returns the norm before clipping.
inline double clip_grad_norm(std::span<double> grad, double max_norm) {
  const double n = l2_norm(grad);
  if (max_norm > 0.0 && n > max_norm) {
    const double s = max_norm / n;
    for (auto& g : grad) g *= s;
  }
  return n;
}

using ScalarFn = std::function<double(std::span<const double>)>;
using GradFn = std::function<std::vector<double>(std::span<const double>)>;

// Worst entrywise |analytic - numeric| / max(|analytic|, |numeric|, 1e-4).
// The floor keeps round-off on near-zero entries from dominating.
inline double finite_diff_check(const ScalarFn& f, const GradFn& grad, std::span<const double> x, double h) {
  if (!(h > 0.0)) throw DomainError("finite difference step must be positive");
  const double f0 = f(x);
  if (!std::isfinite(f0)) throw NumericError("objective is non-finite at the check point");
  const auto analytic = grad(x);
  require_same_size(analytic.size(), x.size(), "analytic gradient length");
  std::vector<double> probe(x.begin(), x.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("objective is non-finite near coordinate " + std::to_string(i));
    }
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace flowalign
