#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "flowalign/flow.hpp"
#include "test_util.hpp"

using namespace flowalign;

namespace {

// Marginal velocity of rectified flow between N(0, 1) data and N(0, 1) noise.
// Every trajectory keeps x_t / sqrt((1-t)^2 + t^2) constant, so the exact
// terminal sample equals the starting noise.
Vec gaussian_field(std::span<const double> x, double t) {
  const double var = (1.0 - t) * (1.0 - t) + t * t;
  return {(2.0 * t - 1.0) * x[0] / var};
}

double euler_gaussian(double x1, std::size_t steps) {
  return euler_integrate(gaussian_field, Vec{x1}, FlowSchedule::uniform(steps))[0];
}

VelocityNet random_velocity_net(std::size_t dim, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  auto net = VelocityNet::create(dim, classes, {6}, Activation::tanh, seed);
  testutil::randomize(net.net(), g);
  return net;
}

}  // namespace

TEST(Interpolate, EndpointsAndMidpoint) {
  const Vec x0{0.0, 0.0}, x1{2.0, 4.0};
  EXPECT_EQ(interpolate(x0, x1, 0.0), x0);
  EXPECT_EQ(interpolate(x0, x1, 1.0), x1);
  EXPECT_EQ(interpolate(x0, x1, 0.5), (Vec{1.0, 2.0}));
  EXPECT_THROW(interpolate(x0, x1, 1.5), DomainError);
  EXPECT_THROW(interpolate(x0, Vec{1.0}, 0.5), ShapeError);
}

TEST(TargetVelocity, ArithmeticAndAntisymmetry) {
  EXPECT_EQ(target_velocity(Vec{1.0, 1.0}, Vec{3.0, 0.0}), (Vec{2.0, -1.0}));
  EXPECT_EQ(target_velocity(Vec{1.5}, Vec{1.5}), (Vec{0.0}));
  EXPECT_EQ(target_velocity(Vec{3.0, 0.0}, Vec{1.0, 1.0}), (Vec{-2.0, 1.0}));
}

TEST(TerminalNoise, OneDimensionalHandCase) {
  const auto pred = predict_terminal_noise(Vec{1.0}, 0.5, Vec{3.0});
  EXPECT_DOUBLE_EQ(pred[0], 2.5);
  // |x1 - pred|^2 = 0.25 = (1 - t)^2 |v - v_pred|^2 with v = 2
  EXPECT_DOUBLE_EQ((2.0 - pred[0]) * (2.0 - pred[0]), 0.25 * (2.0 - 3.0) * (2.0 - 3.0));
}

TEST(TerminalNoise, TrueVelocityRecoversNoise) {
  const Vec x0{0.3, -1.2}, x1{1.5, 0.25};
  const double t = 0.375;
  EXPECT_EQ(predict_terminal_noise(interpolate(x0, x1, t), t, target_velocity(x0, x1)), x1);
}

TEST(TerminalNoise, IdentityHoldsOnRandomTuples) {
  std::mt19937_64 g(17);
  std::uniform_real_distribution<double> ut(0.0, 0.999);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const auto x0 = testutil::random_vec(g, 5), x1 = testutil::random_vec(g, 5), vp = testutil::random_vec(g, 5);
    const double t = ut(g);
    const auto v = target_velocity(x0, x1);
    const auto pred = predict_terminal_noise(interpolate(x0, x1, t), t, vp);
    double lhs = 0.0, rhs = 0.0;
    for (int i = 0; i < 5; ++i) {
      lhs += (x1[i] - pred[i]) * (x1[i] - pred[i]);
      rhs += (v[i] - vp[i]) * (v[i] - vp[i]);
    }
    rhs *= (1.0 - t) * (1.0 - t);
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(std::abs(rhs), 1e-300));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Cfg, ScaleEndpointsAndExtrapolation) {
  const Vec c{1.0, 0.0}, u{0.0, 0.0};
  EXPECT_EQ(cfg_velocity(c, u, 1.0), c);
  EXPECT_EQ(cfg_velocity(c, u, 0.0), u);
  EXPECT_EQ(cfg_velocity(c, u, 2.0), (Vec{2.0, 0.0}));
}

TEST(FmLoss, ZeroOutputNetSingleSample) {
  auto net = VelocityNet::create(2, 1, {3}, Activation::tanh, 0);
  for (auto& p : net.net().mutable_params()) p = 0.0;
  FlowBatch b;
  b.push(Vec{0.0, 0.0}, Vec{1.0, 1.0}, 0.3, 0);
  EXPECT_DOUBLE_EQ(fm_loss(net, b).loss, 2.0);
}

TEST(FmLoss, ExactPredictionGivesZeroLoss) {
  // A net with zero weights outputs its last-layer bias; set it to v_target.
  auto net = VelocityNet::create(2, 1, {3}, Activation::tanh, 0);
  auto p = net.net().mutable_params();
  std::fill(p.begin(), p.end(), 0.0);
  p[p.size() - 2] = 1.0;
  p[p.size() - 1] = -0.5;
  FlowBatch b;
  b.push(Vec{0.0, 1.0}, Vec{1.0, 0.5}, 0.7, 0);
  EXPECT_EQ(fm_loss(net, b).loss, 0.0);
}

TEST(FmLoss, GradientMatchesFiniteDifferences) {
  auto net = random_velocity_net(3, 2, 21);
  Rng rng = make_rng(5);
  std::vector<Vec> data{{0.1, 0.2, 0.3}, {-1.0, 0.5, 0.0}, {0.7, 0.7, -0.2}};
  const std::vector<int> conds{0, 1, 1};
  const auto batch = make_flow_batch(data, conds, rng, 0.5);
  auto f = [&](std::span<const double> p) {
    auto n = net;
    std::copy(p.begin(), p.end(), n.net().mutable_params().begin());
    return fm_loss(n, batch).loss;
  };
  auto gfn = [&](std::span<const double> p) {
    auto n = net;
    std::copy(p.begin(), p.end(), n.net().mutable_params().begin());
    return fm_loss(n, batch).grad;
  };
  const Vec p0(net.net().params().begin(), net.net().params().end());
  EXPECT_LT(finite_diff_check(f, gfn, p0, 1e-5), 1e-4);
}

TEST(EulerSample, ZeroFieldReturnsInitialNoise) {
  auto net = VelocityNet::create(4, 2, {3}, Activation::tanh, 0);
  for (auto& p : net.net().mutable_params()) p = 0.0;
  EXPECT_EQ(euler_sample(net, 1, FlowSchedule::uniform(10), 1.0, 77), initial_noise(77, 4));
}

TEST(EulerSample, ConstantFieldIntegratesExactly) {
  const Vec c{0.5, -2.0};
  auto field = [&](std::span<const double>, double) { return c; };
  const Vec x1{1.0, 1.0};
  const auto x0 = euler_integrate(field, x1, FlowSchedule::uniform(7));
  EXPECT_NEAR(x0[0], 0.5, 1e-14);
  EXPECT_NEAR(x0[1], 3.0, 1e-14);
}

TEST(EulerSample, SameSeedIsBitIdentical) {
  const auto net = random_velocity_net(4, 3, 8);
  const auto s = FlowSchedule::uniform(12);
  EXPECT_EQ(euler_sample(net, 2, s, 1.5, 4), euler_sample(net, 2, s, 1.5, 4));
  EXPECT_NE(euler_sample(net, 2, s, 1.5, 4), euler_sample(net, 2, s, 1.5, 5));
}

TEST(GaussianField, MatchesFinerReference) {
  for (double x1 : {-2.5, -0.7, 0.3, 1.9}) {
    // Global error is about 1.16 |x1| dt, so 5000 steps keeps |x1| < 3 inside 1e-3.
    EXPECT_NEAR(euler_gaussian(x1, 5000), euler_gaussian(x1, 50000), 1e-3) << "x1=" << x1;
    EXPECT_NEAR(euler_gaussian(x1, 50000), x1, 1e-3) << "exact terminal sample is the noise itself";
  }
}

TEST(GaussianField, FirstOrderConvergence) {
  const double x1 = 1.3;
  for (std::size_t n : {50u, 100u, 200u}) {
    const double e1 = std::abs(euler_gaussian(x1, n) - x1);
    const double e2 = std::abs(euler_gaussian(x1, 2 * n) - x1);
    const double ratio = e1 / e2;
    EXPECT_GE(ratio, 1.5) << "n=" << n;
    EXPECT_LE(ratio, 2.5) << "n=" << n;
  }
}

TEST(GaussianField, TerminalMomentsMatchStandardNormal) {
  std::mt19937_64 g(2024);
  std::normal_distribution<double> nd;
  const auto sched = FlowSchedule::uniform(200);
  double s = 0.0, ss = 0.0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const double x = euler_integrate(gaussian_field, Vec{nd(g)}, sched)[0];
    s += x;
    ss += x * x;
  }
  const double mean = s / n, var = ss / n - mean * mean;
  EXPECT_LT(std::abs(mean), 0.05);
  EXPECT_LT(std::abs(var - 1.0), 0.05);
}

TEST(Schedule, ValidatesShape) {
  EXPECT_THROW(FlowSchedule::uniform(1), ConfigError);
  FlowSchedule bad{{1.0, 0.6, 0.7, 0.0}};
  EXPECT_THROW(bad.validate(), ConfigError);
  FlowSchedule short_end{{1.0, 0.5, 0.1}};
  EXPECT_THROW(short_end.validate(), ConfigError);
  EXPECT_NO_THROW(FlowSchedule::uniform(3).validate());
}

TEST(VelocityNet, CheckpointRoundTrip) {
  const auto net = random_velocity_net(4, 3, 12);
  EXPECT_EQ(VelocityNet::from_checkpoint(net.to_checkpoint()), net);
}

TEST(VelocityNet, RejectsOutOfRangeClass) {
  const auto net = random_velocity_net(2, 3, 1);
  EXPECT_THROW(net.velocity(Vec{0.0, 0.0}, 0.5, 3), DomainError);
}

TEST(TrainFlow, LossDecreasesAndIsDeterministic) {
  std::mt19937_64 g(9);
  std::vector<Vec> data;
  std::vector<int> conds;
  for (int i = 0; i < 256; ++i) {
    const int c = i % 2;
    data.push_back({c ? 2.0 : -2.0, 0.1 * testutil::random_vec(g, 1)[0]});
    conds.push_back(c);
  }
  FlowTrainConfig cfg;
  cfg.hidden = {16};
  cfg.steps = 300;
  cfg.seed = 3;
  const auto a = train_flow(data, conds, 2, cfg);
  const auto b = train_flow(data, conds, 2, cfg);
  EXPECT_EQ(a.net, b.net);
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 30; ++i) {
    head += a.curve[i].loss;
    tail += a.curve[a.curve.size() - 1 - i].loss;
  }
  EXPECT_LT(tail, head);
}
