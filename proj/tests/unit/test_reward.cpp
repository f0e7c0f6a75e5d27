#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "flowalign/reward.hpp"
#include "test_util.hpp"

using namespace flowalign;

namespace {

// Exhaustive oracle: evaluate three-class accuracy at every candidate
// threshold (each |delta| and +inf) independently of the sweep.
double brute_force_acc3(const std::vector<double>& d, const std::vector<Label>& l) {
  std::vector<double> cands{0.0, std::numeric_limits<double>::infinity()};
  for (double x : d) cands.push_back(std::abs(x));
  double best = 0.0;
  for (double tau : cands) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      Label pred = std::abs(d[i]) <= tau ? Label::Tie : (d[i] > 0 ? Label::AWins : Label::BWins);
      hit += pred == l[i];
    }
    best = std::max(best, static_cast<double>(hit) / static_cast<double>(d.size()));
  }
  return best;
}

PreferenceRecord random_record(std::mt19937_64& g, std::size_t dim, int cls) {
  PreferenceRecord r;
  r.condition_class = cls;
  r.sample_a = {testutil::random_vec(g, dim), cls};
  r.sample_b = {testutil::random_vec(g, dim), cls};
  std::uniform_int_distribution<int> lab(0, 2), lik(1, 5);
  for (std::size_t d = 0; d < kNumDims; ++d) {
    r.labels[d] = static_cast<Label>(lab(g));
    r.likert[d] = {lik(g), lik(g)};
  }
  return r;
}

RewardNet random_reward_net(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  auto net = RewardNet::create(4, 3, {5}, Activation::silu, seed);
  auto p = net.flat_params();
  for (auto& x : p) x = std::normal_distribution<double>(0.0, 0.5)(g);
  net.set_flat_params(p);
  return net;
}

}  // namespace

TEST(Btt, ProbabilitiesNormalizeOverGrid) {
  for (double theta : {1.001, 2.0, 5.0, 50.0}) {
    for (double ra = -50.0; ra <= 50.0; ra += 2.5) {
      for (double rb = -50.0; rb <= 50.0; rb += 2.5) {
        const auto p = btt_prob(ra, rb, theta);
        ASSERT_NEAR(p.p_a + p.p_b + p.p_tie, 1.0, 1e-9) << ra << " " << rb << " " << theta;
      }
    }
  }
}

TEST(Btt, EqualScoresClosedForm) {
  const auto p = btt_prob(0.7, 0.7, 5.0);
  EXPECT_NEAR(p.p_tie, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(p.p_a, 1.0 / 6.0, 1e-12);
  EXPECT_NEAR(p.p_b, 1.0 / 6.0, 1e-12);
  const auto q = btt_prob(-3.0, -3.0, 17.0);
  EXPECT_DOUBLE_EQ(q.p_a, q.p_b);
}

TEST(Btt, LargeMarginLimit) {
  const auto p = btt_prob(60.0, 0.0, 5.0);
  EXPECT_NEAR(p.p_a, 1.0, 1e-12);
  EXPECT_LT(p.p_b, 1e-20);
  EXPECT_LT(p.p_tie, 1e-20);
  EXPECT_THROW(btt_prob(0.0, 0.0, 1.0), ConfigError);
}

TEST(PreferenceLoss, BtEqualScoresIsLn2) {
  PairScores p;
  p.labels = {Label::AWins, Label::BWins, Label::AWins};
  p.a = p.b = {0.3, -0.1, 1.0};
  EXPECT_NEAR(preference_loss_scores(PrefMode::bt, std::vector<PairScores>{p}).loss, 3.0 * std::log(2.0), 1e-15);
}

TEST(PreferenceLoss, BttObservedTieAtEqualScores) {
  PairScores p;
  p.labels = {Label::Tie, Label::Tie, Label::Tie};
  p.active = {true, false, false};
  EXPECT_NEAR(preference_loss_scores(PrefMode::btt, std::vector<PairScores>{p}, 5.0).loss, -std::log(2.0 / 3.0), 1e-15);
  EXPECT_NEAR(-std::log(2.0 / 3.0), 0.4055, 5e-5);
}

TEST(PreferenceLoss, RegressionPerfectPredictionIsZero) {
  PairScores p;
  p.likert = {{{1, 5}, {2, 2}, {4, 3}}};
  p.a = {1.0, 2.0, 4.0};
  p.b = {5.0, 2.0, 3.0};
  EXPECT_EQ(preference_loss_scores(PrefMode::regression, std::vector<PairScores>{p}).loss, 0.0);
}

TEST(PreferenceLoss, BtRejectsTies) {
  PairScores p;
  p.labels = {Label::Tie, Label::AWins, Label::AWins};
  EXPECT_THROW(preference_loss_scores(PrefMode::bt, std::vector<PairScores>{p}), InputError);
}

class PrefLossFd : public ::testing::TestWithParam<PrefMode> {};

TEST_P(PrefLossFd, NetworkGradientMatchesFiniteDifferences) {
  const auto mode = GetParam();
  std::mt19937_64 g(31);
  std::vector<PreferenceRecord> recs;
  for (int i = 0; i < 6; ++i) recs.push_back(random_record(g, 4, i % 3));
  if (mode == PrefMode::bt) {
    for (auto& r : recs) {
      for (auto& l : r.labels) l = l == Label::Tie ? Label::AWins : l;
    }
  }
  std::vector<PrefItem> items;
  for (const auto& r : recs) items.push_back({&r, {true, true, true}});
  auto net = random_reward_net(3);
  auto f = [&](std::span<const double> p) {
    auto n = net;
    n.set_flat_params(p);
    return preference_loss(mode, n, items).loss;
  };
  auto gfn = [&](std::span<const double> p) {
    auto n = net;
    n.set_flat_params(p);
    return preference_loss(mode, n, items).grad;
  };
  EXPECT_LT(finite_diff_check(f, gfn, net.flat_params(), 1e-5), 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllModes, PrefLossFd, ::testing::Values(PrefMode::regression, PrefMode::bt, PrefMode::btt));

TEST(RewardNet, InputGradientMatchesFiniteDifferences) {
  const auto net = random_reward_net(8);
  std::mt19937_64 g(2);
  const Scores w{0.2, 0.5, 0.3};
  auto f = [&](std::span<const double> x) {
    const auto s = net.scores(x, 1);
    return w[0] * s[0] + w[1] * s[1] + w[2] * s[2];
  };
  auto gfn = [&](std::span<const double> x) { return net.input_gradient(x, 1, w); };
  EXPECT_LT(finite_diff_check(f, gfn, testutil::random_vec(g, 4), 1e-5), 1e-4);
}

TEST(RewardNet, QualityScoresIgnoreCondition) {
  const auto net = random_reward_net(4);
  std::mt19937_64 g(6);
  for (int k = 0; k < 20; ++k) {
    const auto x = testutil::random_vec(g, 4);
    const auto s0 = net.scores(x, 0);
    for (int c = 1; c < 3; ++c) {
      const auto s = net.scores(x, c);
      EXPECT_EQ(s[kVq], s0[kVq]);
      EXPECT_EQ(s[kMq], s0[kMq]);
    }
  }
}

TEST(NoisyReward, InputGradientMatchesFiniteDifferences) {
  std::mt19937_64 g(12);
  auto net = NoisyRewardNet::create(4, 3, {6}, Activation::tanh, 1);
  testutil::randomize(net.net(), g);
  const Scores w{0.0, 0.3, 0.7};
  auto f = [&](std::span<const double> x) { return net.weighted_reward(x, 0.4, 2, w).value; };
  auto gfn = [&](std::span<const double> x) { return net.weighted_reward(x, 0.4, 2, w).grad; };
  EXPECT_LT(finite_diff_check(f, gfn, testutil::random_vec(g, 4), 1e-5), 1e-4);
}

TEST(NoisyReward, FullNoiseGivesZeroDeltas) {
  std::mt19937_64 g(13);
  auto net = NoisyRewardNet::create(4, 3, {6}, Activation::tanh, 1);
  testutil::randomize(net.net(), g);
  std::vector<PreferenceRecord> recs;
  for (int i = 0; i < 50; ++i) recs.push_back(random_record(g, 4, i % 3));
  std::vector<const PreferenceRecord*> ptrs;
  for (const auto& r : recs) ptrs.push_back(&r);
  for (std::size_t d = 0; d < kNumDims; ++d) {
    for (double v : noisy_deltas(net, ptrs, d, 1.0, 5)) EXPECT_EQ(v, 0.0);
  }
}

TEST(NormalizeScores, MeanAndOneStd) {
  const ScoreStats st{{1.0, 2.0, 3.0}, {0.5, 2.0, 4.0}};
  const auto z0 = normalize_scores({1.0, 2.0, 3.0}, st);
  EXPECT_EQ(z0.z, (Scores{0, 0, 0}));
  EXPECT_EQ(z0.overall, 0.0);
  const auto z1 = normalize_scores({1.5, 4.0, 7.0}, st);
  EXPECT_EQ(z1.z, (Scores{1, 1, 1}));
  EXPECT_NEAR(z1.overall, 1.0, 1e-15);
  const auto z2 = normalize_scores({0.0, -9.0, 5.0}, st, RewardWeights{{0.0, 0.0, 1.0}});
  EXPECT_EQ(z2.overall, z2.z[kTa]);
}

TEST(Weights, SimplexViolationIsRejected) {
  EXPECT_THROW((RewardWeights{{0.5, 0.5, 0.5}}.validate()), ConfigError);
  EXPECT_THROW((RewardWeights{{1.2, -0.2, 0.0}}.validate()), ConfigError);
  EXPECT_NO_THROW((RewardWeights{{0.1, 0.1, 0.8}}.validate()));
}

TEST(TieCalibration, HandExample) {
  const std::vector<double> d{-3.0, -0.1, 0.1, 3.0};
  const std::vector<Label> l{Label::BWins, Label::Tie, Label::Tie, Label::AWins};
  const auto c = tie_calibration(d, l);
  EXPECT_EQ(c.acc3, 1.0);
  EXPECT_DOUBLE_EQ(c.tau, 1.55);
}

TEST(TieCalibration, AllTiesUseInfiniteThreshold) {
  const std::vector<double> d{-1.0, 0.5, 2.0};
  const std::vector<Label> l(3, Label::Tie);
  const auto c = tie_calibration(d, l);
  EXPECT_EQ(c.acc3, 1.0);
  EXPECT_TRUE(std::isinf(c.tau));
}

TEST(TieCalibration, SweepEqualsBruteForce) {
  std::mt19937_64 g(77);
  std::uniform_int_distribution<int> nd(1, 200), lab(0, 2), coarse(-4, 4);
  for (int inst = 0; inst < 100; ++inst) {
    const int n = nd(g);
    std::vector<double> d(n);
    std::vector<Label> l(n);
    // Half the instances use coarse values so ties in |delta| and exact zeros occur.
    for (int i = 0; i < n; ++i) {
      d[i] = inst % 2 ? testutil::random_vec(g, 1)[0] : 0.5 * coarse(g);
      l[i] = static_cast<Label>(lab(g));
    }
    ASSERT_EQ(tie_calibration(d, l).acc3, brute_force_acc3(d, l)) << "instance " << inst;
  }
}

TEST(TieCalibration, SweepEqualsBruteForceOnThousandPairs) {
  std::mt19937_64 g(78);
  std::uniform_int_distribution<int> lab(0, 2);
  const auto d = testutil::random_vec(g, 1000);
  std::vector<Label> l(1000);
  for (auto& x : l) x = static_cast<Label>(lab(g));
  EXPECT_EQ(tie_calibration(d, l).acc3, brute_force_acc3(d, l));
}

TEST(Accuracy, PerfectSignAgreement) {
  const std::vector<double> d{1.0, -2.0, 0.3};
  const std::vector<Label> l{Label::AWins, Label::BWins, Label::AWins};
  EXPECT_EQ(pairwise_accuracy(d, l, AccuracyMode::without_ties), 1.0);
}

TEST(Accuracy, ZeroDeltasCountAsWrong) {
  const std::vector<double> d(4, 0.0);
  const std::vector<Label> l{Label::AWins, Label::BWins, Label::AWins, Label::BWins};
  EXPECT_EQ(pairwise_accuracy(d, l, AccuracyMode::without_ties), 0.0);
}

TEST(Accuracy, WithTiesAtLeastBaseline) {
  std::mt19937_64 g(5);
  std::uniform_int_distribution<int> lab(0, 2);
  for (int k = 0; k < 20; ++k) {
    const auto d = testutil::random_vec(g, 300);
    std::vector<Label> l(300);
    std::size_t ties = 0;
    for (auto& x : l) {
      x = static_cast<Label>(lab(g));
      ties += x == Label::Tie;
    }
    const double acc = pairwise_accuracy(d, l, AccuracyMode::with_ties);
    EXPECT_GE(acc, std::max(1.0 / 3.0 - 0.05, static_cast<double>(ties) / 300.0));
  }
}

TEST(Accuracy, RejectsAllTiesWithoutTies) {
  const std::vector<double> d{1.0};
  const std::vector<Label> l{Label::Tie};
  EXPECT_THROW(pairwise_accuracy(d, l, AccuracyMode::without_ties), InputError);
}

TEST(TrainReward, BtOnAllTiesIsAnInputError) {
  std::mt19937_64 g(1);
  PrefDataset ds;
  ds.header.toy.frames = 3;
  ds.header.toy.n_classes = 4;
  for (int i = 0; i < 40; ++i) {
    auto r = random_record(g, 6, i % 4);
    r.labels = {Label::Tie, Label::Tie, Label::Tie};
    ds.records.push_back(r);
  }
  RewardTrainConfig cfg;
  cfg.mode = PrefMode::bt;
  cfg.validation_classes = {3};
  EXPECT_THROW(train_reward(ds, cfg), InputError);
}

TEST(TrainReward, SeparablePairsAreLearned) {
  // Labels come from a fixed linear score with a wide margin on every pair.
  std::mt19937_64 g(2);
  PrefDataset ds;
  ds.header.toy.frames = 3;
  ds.header.toy.n_classes = 4;
  const Vec w{1.0, -0.5, 0.25, 0.0, 0.7, -1.0};
  auto score = [&](const Vec& x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
    return s;
  };
  while (ds.records.size() < 600) {
    auto r = random_record(g, 6, static_cast<int>(ds.records.size() % 4));
    const double delta = score(r.sample_a.frames) - score(r.sample_b.frames);
    if (std::abs(delta) < 0.5) continue;
    const Label lab = delta > 0 ? Label::AWins : Label::BWins;
    r.labels = {lab, lab, lab};
    ds.records.push_back(r);
  }
  RewardTrainConfig cfg;
  cfg.mode = PrefMode::bt;
  cfg.hidden = {16};
  cfg.epochs = 30;
  cfg.validation_classes = {3};
  const auto rm = train_reward(ds, cfg);
  const auto split = split_by_condition(ds.records, cfg.validation_classes);
  for (std::size_t d = 0; d < kNumDims; ++d) {
    const auto acc = pairwise_accuracy(clean_deltas(rm.net, split.train, d), labels_of(split.train, d),
                                       AccuracyMode::without_ties);
    EXPECT_GE(acc, 0.99) << kDimNames[d];
  }
}
