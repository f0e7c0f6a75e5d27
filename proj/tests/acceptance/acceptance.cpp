// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.
//
// Criteria phrased over a seed ensemble ("3/3 seeds", "3-seed median") are
// gated that way; single-run criteria are gated on the default seed (1) and
// the other seeds are printed for information.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "flowalign/ablation.hpp"
#include "flowalign/cli.hpp"

using namespace flowalign;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

struct Outcome {
  bool pass;
  std::string detail;
};

int g_failures = 0;

void criterion(int id, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++g_failures;
  std::printf("criterion %2d: %s  (%.1fs)  %s\n", id, o.pass ? "PASS" : "FAIL", secs, o.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string triple(const Scores& s) {
  return fmt("%.4f", s[0]) + "/" + fmt("%.4f", s[1]) + "/" + fmt("%.4f", s[2]);
}

Vec random_vec(std::mt19937_64& g, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  Vec v(n);
  for (auto& x : v) x = d(g);
  return v;
}

void randomize(Net& net, std::mt19937_64& g, double scale = 0.5) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto& p : net.mutable_params()) p = d(g);
}

double median3(std::vector<double> v) { return median_of(std::move(v)); }

// ---- analytic criteria ----

Outcome lemma_identity() {
  std::mt19937_64 g(101);
  std::uniform_real_distribution<double> ut(0.0, 0.999);
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    const auto x0 = random_vec(g, 8), x1 = random_vec(g, 8), vp = random_vec(g, 8);
    const double t = ut(g);
    const auto v = target_velocity(x0, x1);
    const auto pred = predict_terminal_noise(interpolate(x0, x1, t), t, vp);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
      lhs += (x1[i] - pred[i]) * (x1[i] - pred[i]);
      rhs += (v[i] - vp[i]) * (v[i] - vp[i]);
    }
    rhs *= (1.0 - t) * (1.0 - t);
    worst = std::max(worst, std::abs(lhs - rhs) / std::max(std::abs(rhs), 1e-300));
  }
  return {worst < 1e-12, "max relative error " + fmt("%.3e", worst)};
}

Outcome btt_normalization() {
  double worst = 0.0;
  for (double theta : {1.001, 2.0, 5.0, 50.0}) {
    for (double ra = -50.0; ra <= 50.0; ra += 0.5) {
      for (double rb = -50.0; rb <= 50.0; rb += 0.5) {
        const auto p = btt_prob(ra, rb, theta);
        worst = std::max(worst, std::abs(p.p_a + p.p_b + p.p_tie - 1.0));
      }
    }
  }
  const double tie = btt_prob(1.25, 1.25, 5.0).p_tie;
  const double tie_err = std::abs(tie - 2.0 / 3.0);
  return {worst < 1e-9 && tie_err <= 1e-12,
          "max |sum-1| " + fmt("%.2e", worst) + ", |pTie-2/3| " + fmt("%.2e", tie_err)};
}

template <typename F, typename G>
double fd(F&& f, G&& g, const Vec& x0) {
  return finite_diff_check(std::forward<F>(f), std::forward<G>(g), x0, 1e-5);
}

template <typename Loss>
double velocity_fd(const VelocityNet& net, Loss&& loss) {
  auto with = [&](std::span<const double> p) {
    auto n = net;
    std::copy(p.begin(), p.end(), n.net().mutable_params().begin());
    return n;
  };
  const Vec p0(net.net().params().begin(), net.net().params().end());
  return fd([&](std::span<const double> p) { return loss(with(p)).loss; },
            [&](std::span<const double> p) { return loss(with(p)).grad; }, p0);
}

VelocityNet random_velocity(std::uint64_t seed) {
  std::mt19937_64 g(seed);
  auto net = VelocityNet::create(4, 3, {6}, Activation::tanh, seed);
  randomize(net.net(), g);
  return net;
}

Outcome gradient_suite() {
  std::mt19937_64 g(7);
  std::uniform_real_distribution<double> ut(0.0, 1.0);
  std::map<std::string, double> err;

  FlowBatch fb;
  for (int i = 0; i < 8; ++i) fb.push(random_vec(g, 4), random_vec(g, 4), ut(g), i % 3);
  err["fm_loss"] = velocity_fd(random_velocity(1), [&](const VelocityNet& n) { return fm_loss(n, fb); });

  std::vector<PreferenceRecord> recs;
  std::uniform_int_distribution<int> lab(0, 2);
  for (int i = 0; i < 8; ++i) {
    PreferenceRecord r;
    r.condition_class = i % 3;
    r.sample_a = {random_vec(g, 4), r.condition_class};
    r.sample_b = {random_vec(g, 4), r.condition_class};
    for (auto& l : r.labels) l = static_cast<Label>(lab(g));
    recs.push_back(r);
  }
  auto rnet = RewardNet::create(4, 3, {5}, Activation::silu, 3);
  {
    auto p = rnet.flat_params();
    for (auto& x : p) x = std::normal_distribution<double>(0.0, 0.5)(g);
    rnet.set_flat_params(p);
  }
  for (auto mode : {PrefMode::regression, PrefMode::bt, PrefMode::btt}) {
    auto rs = recs;
    if (mode == PrefMode::bt) {
      for (auto& r : rs) {
        for (auto& l : r.labels) l = l == Label::Tie ? Label::AWins : l;
      }
    }
    std::vector<PrefItem> items;
    for (const auto& r : rs) items.push_back({&r, {true, true, true}});
    auto at = [&](std::span<const double> p) {
      auto n = rnet;
      n.set_flat_params(p);
      return preference_loss(mode, n, items);
    };
    err[std::string("preference_loss/") + pref_mode_name(mode)] =
        fd([&](std::span<const double> p) { return at(p).loss; }, [&](std::span<const double> p) { return at(p).grad; },
           rnet.flat_params());
  }

  AlignBatch ab;
  for (int i = 0; i < 8; ++i) ab.push(random_vec(g, 4), random_vec(g, 4), i % 3, ut(g), random_vec(g, 4));
  const auto ref = random_velocity(2);
  for (auto sched : {BetaSchedule::constant, BetaSchedule::quadratic}) {
    const DpoConfig dc{1.5, sched};
    err[std::string("flow_dpo_loss/") + beta_schedule_name(sched)] =
        velocity_fd(random_velocity(4), [&](const VelocityNet& n) { return flow_dpo_loss(n, ref, ab, dc); });
  }
  Vec r(8);
  for (auto& x : r) x = std::uniform_real_distribution<double>(-2.0, 2.0)(g);
  err["flow_rwr_loss"] = velocity_fd(random_velocity(5), [&](const VelocityNet& n) { return flow_rwr_loss(n, fb, r); });

  const Scores w{0.2, 0.5, 0.3};
  err["reward_input_gradient"] = fd(
      [&](std::span<const double> x) {
        const auto s = rnet.scores(x, 1);
        return w[0] * s[0] + w[1] * s[1] + w[2] * s[2];
      },
      [&](std::span<const double> x) { return rnet.input_gradient(x, 1, w); }, random_vec(g, 4));

  double worst = 0.0;
  std::string which;
  for (const auto& [k, v] : err) {
    if (v >= worst) {
      worst = v;
      which = k;
    }
  }
  return {worst < 1e-4, std::to_string(err.size()) + " checks, worst " + fmt("%.2e", worst) + " (" + which + ")"};
}

Vec gaussian_field(std::span<const double> x, double t) {
  const double var = (1.0 - t) * (1.0 - t) + t * t;
  return {(2.0 * t - 1.0) * x[0] / var};
}

double euler_gaussian(double x1, std::size_t steps) {
  return euler_integrate(gaussian_field, Vec{x1}, FlowSchedule::uniform(steps))[0];
}

Outcome sampler_correctness() {
  double ref_err = 0.0;
  for (double x1 : {-2.5, -1.1, -0.3, 0.4, 1.2, 2.7}) {
    ref_err = std::max(ref_err, std::abs(euler_gaussian(x1, 5000) - euler_gaussian(x1, 50000)));
  }
  double rmin = 1e9, rmax = 0.0;
  for (double x1 : {-1.7, 0.9}) {
    for (std::size_t n : {25u, 50u, 100u, 200u, 400u}) {
      const double ratio = std::abs(euler_gaussian(x1, n) - x1) / std::abs(euler_gaussian(x1, 2 * n) - x1);
      rmin = std::min(rmin, ratio);
      rmax = std::max(rmax, ratio);
    }
  }
  std::mt19937_64 g(4242);
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
  const bool ok = ref_err < 1e-3 && rmin >= 1.5 && rmax <= 2.5 && std::abs(mean) < 0.05 && std::abs(var - 1.0) < 0.05;
  return {ok, "5000 vs 50000 steps " + fmt("%.2e", ref_err) + ", ratios [" + fmt("%.3f", rmin) + ", " +
                  fmt("%.3f", rmax) + "], mean " + fmt("%.4f", mean) + " var " + fmt("%.4f", var)};
}

double brute_force_acc3(const std::vector<double>& d, const std::vector<Label>& l) {
  std::vector<double> cands{0.0, std::numeric_limits<double>::infinity()};
  for (double x : d) cands.push_back(std::abs(x));
  double best = 0.0;
  for (double tau : cands) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const Label pred = std::abs(d[i]) <= tau ? Label::Tie : (d[i] > 0 ? Label::AWins : Label::BWins);
      hit += pred == l[i];
    }
    best = std::max(best, static_cast<double>(hit) / static_cast<double>(d.size()));
  }
  return best;
}

Outcome tie_calibration_exact() {
  std::mt19937_64 g(55);
  std::uniform_int_distribution<int> nd(1, 200), lab(0, 2), coarse(-4, 4);
  int mismatches = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int n = nd(g);
    std::vector<double> d(n);
    std::vector<Label> l(n);
    for (int i = 0; i < n; ++i) {
      d[i] = inst % 2 ? random_vec(g, 1)[0] : 0.5 * coarse(g);
      l[i] = static_cast<Label>(lab(g));
    }
    if (tie_calibration(d, l).acc3 != brute_force_acc3(d, l)) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 100 instances differ from the exhaustive scan"};
}

// ---- learned criteria ----

class Labs {
 public:
  SeedLab& operator[](std::uint64_t seed) {
    auto& p = labs_[seed];
    if (!p) {
      RunConfig c;
      c.seed = seed;
      p = std::make_unique<SeedLab>(c);
    }
    return *p;
  }

 private:
  std::map<std::uint64_t, std::unique_ptr<SeedLab>> labs_;
};

Outcome reward_quality(Labs& labs) {
  auto& lab = labs[1];
  const auto& rm = lab.reward(PrefMode::btt, 1.0);
  const auto ev = evaluate_reward(rm.net, lab.data().pairs, lab.config().heldout_classes);
  bool acc_ok = true;
  for (double a : ev.acc_without_ties) acc_ok = acc_ok && a >= 0.85;

  std::size_t mismatches = 0, checked = 0;
  const auto n_classes = static_cast<int>(lab.config().toy.n_classes);
  for (const auto& r : lab.data().pairs.records) {
    if (checked >= 2000) break;
    const auto s0 = rm.net.scores(r.sample_a.frames, 0);
    for (int c = 1; c < n_classes; ++c) {
      const auto s = rm.net.scores(r.sample_a.frames, c);
      if (s[kVq] != s0[kVq] || s[kMq] != s0[kMq]) ++mismatches;
    }
    ++checked;
  }
  std::string others;
  for (std::uint64_t s : {2u, 3u}) {
    auto& l = labs[s];
    others += " seed" + std::to_string(s) + " " +
              triple(evaluate_reward(l.reward(PrefMode::btt, 1.0).net, l.data().pairs, l.config().heldout_classes)
                         .acc_without_ties);
  }
  return {acc_ok && mismatches == 0, "held-out acc vq/mq/ta " + triple(ev.acc_without_ties) + ", " +
                                         std::to_string(mismatches) + " vq/mq class mismatches over " +
                                         std::to_string(checked) + " inputs x " + std::to_string(n_classes) +
                                         " classes; info:" + others};
}

Outcome btt_ties(Labs& labs) {
  bool ok = true;
  std::string detail;
  for (auto s : kSeeds) {
    auto& lab = labs[s];
    const auto& h = lab.config().heldout_classes;
    const auto btt = evaluate_reward(lab.reward(PrefMode::btt, 1.0).net, lab.data().pairs, h).tie_abs_delta;
    const auto bt = evaluate_reward(lab.reward(PrefMode::bt, 1.0).net, lab.data().pairs, h).tie_abs_delta;
    for (std::size_t d = 0; d < kNumDims; ++d) ok = ok && btt[d] < bt[d];
    detail += " seed" + std::to_string(s) + " btt " + triple(btt) + " bt " + triple(bt) + ";";
  }
  return {ok, "mean |dr| on held-out ties (vq/mq/ta):" + detail};
}

Outcome bt_vs_regression(Labs& labs) {
  std::array<std::vector<double>, kNumDims> bt, reg;
  for (auto s : kSeeds) {
    auto& lab = labs[s];
    const auto& h = lab.config().heldout_classes;
    const auto a = evaluate_reward(lab.reward(PrefMode::bt, 1.0).net, lab.data().pairs, h).acc_without_ties;
    const auto b = evaluate_reward(lab.reward(PrefMode::regression, 1.0).net, lab.data().pairs, h).acc_without_ties;
    for (std::size_t d = 0; d < kNumDims; ++d) {
      bt[d].push_back(a[d]);
      reg[d].push_back(b[d]);
    }
  }
  Scores mb{}, mr{};
  bool ok = true;
  for (std::size_t d = 0; d < kNumDims; ++d) {
    mb[d] = median3(bt[d]);
    mr[d] = median3(reg[d]);
    ok = ok && mb[d] >= mr[d];
  }
  return {ok, "3-seed median acc vq/mq/ta: bt " + triple(mb) + ", regression " + triple(mr)};
}

struct AlignedRates {
  WinRateResult dpo, sft;
};

std::map<std::uint64_t, AlignedRates> g_aligned;

const AlignedRates& aligned(Labs& labs, std::uint64_t seed) {
  auto it = g_aligned.find(seed);
  if (it != g_aligned.end()) return it->second;
  auto& lab = labs[seed];
  auto dpo = lab.config().align;
  dpo.method = AlignMethod::dpo;
  dpo.dpo.schedule = BetaSchedule::constant;
  auto sft = dpo;
  sft.method = AlignMethod::sft;
  AlignedRates r{lab.versus_base(lab.policy_samples(lab.align(dpo).net)),
                 lab.versus_base(lab.policy_samples(lab.align(sft).net))};
  return g_aligned.emplace(seed, r).first->second;
}

Outcome dpo_improves(Labs& labs) {
  const auto& r = aligned(labs, 1);
  const bool ok = r.dpo.n_prompts == 256 && r.dpo.overall.value > 0.55 && r.dpo.overall.ci_low > 0.5 &&
                  r.dpo.per_dim[kTa].value >= r.sft.per_dim[kTa].value;
  std::string info;
  for (std::uint64_t s : {2u, 3u}) {
    const auto& o = aligned(labs, s);
    info += " seed" + std::to_string(s) + " overall " + fmt("%.3f", o.dpo.overall.value) + " ta dpo/sft " +
            fmt("%.3f", o.dpo.per_dim[kTa].value) + "/" + fmt("%.3f", o.sft.per_dim[kTa].value) + ";";
  }
  return {ok, "beta " + fmt("%g", labs[1].config().align.dpo.beta) + ", " + std::to_string(r.dpo.n_prompts) +
                  " prompts: overall " + fmt("%.3f", r.dpo.overall.value) + " [" + fmt("%.3f", r.dpo.overall.ci_low) +
                  ", " + fmt("%.3f", r.dpo.overall.ci_high) + "], ta dpo " + fmt("%.3f", r.dpo.per_dim[kTa].value) +
                  " vs sft " + fmt("%.3f", r.sft.per_dim[kTa].value) + "; info:" + info};
}

Outcome beta_schedule_ablation(Labs& labs) {
  const std::vector<std::string> betas{"2", "10", "50"};
  std::map<std::string, std::vector<double>> ta;  // setting -> per-seed ta win rate
  for (auto s : kSeeds) {
    for (const auto& b : betas) {
      for (const char* sched : {"constant", "quadratic"}) {
        const auto setting = std::string(sched) + "@" + b;
        for (const auto& row : detail::run_cell(labs[s], AblationAxis::beta_schedule, setting, s)) {
          if (row.metric == "win_rate" && row.dimension == "ta") ta[setting].push_back(row.value);
        }
      }
    }
  }
  bool ok = true;
  std::string detail;
  for (const auto& b : betas) {
    const double c = median3(ta["constant@" + b]), q = median3(ta["quadratic@" + b]);
    ok = ok && c >= q;
    detail += " beta " + b + ": constant " + fmt("%.3f", c) + " vs quadratic " + fmt("%.3f", q) + ";";
  }
  return {ok, "3-seed median ta win rate:" + detail};
}

std::size_t argmax_dim(const WinRateResult& w) {
  std::size_t best = 0;
  for (std::size_t d = 1; d < kNumDims; ++d) {
    if (w.per_dim[d].value > w.per_dim[best].value) best = d;
  }
  return best;
}

Outcome guidance_steering(Labs& labs) {
  auto& lab = labs[1];
  auto spec = guidance_spec(lab.config());
  spec.weights.w = {0.0, 0.0, 1.0};
  const auto ta_only = lab.versus_base(lab.guided_samples(spec));
  spec.weights.w = {0.5, 0.5, 0.0};
  const auto quality = lab.versus_base(lab.guided_samples(spec));
  spec.w_scale = 0.0;
  const bool bitwise = lab.guided_samples(spec).samples == lab.base_samples().samples;

  const auto a = argmax_dim(ta_only), b = argmax_dim(quality);
  const bool ok = ta_only.per_dim[kTa].ci_low > 0.5 && a != b && bitwise;
  auto rates = [](const WinRateResult& w) {
    return fmt("%.3f", w.per_dim[0].value) + "/" + fmt("%.3f", w.per_dim[1].value) + "/" + fmt("%.3f", w.per_dim[2].value);
  };
  return {ok, "w " + fmt("%g", guidance_spec(lab.config()).w_scale) + ": 0:0:1 win vq/mq/ta " + rates(ta_only) +
                  " (ta CI low " + fmt("%.3f", ta_only.per_dim[kTa].ci_low) + ", argmax " + kDimNames[a] +
                  "); 0.5:0.5:0 " + rates(quality) + " (argmax " + kDimNames[b] + "); w=0 bitwise " +
                  (bitwise ? "yes" : "no")};
}

Outcome noisy_sanity(Labs& labs) {
  std::array<std::vector<double>, kNumDims> early, late;
  bool zero = true;
  for (auto s : kSeeds) {
    auto& lab = labs[s];
    const auto& h = lab.config().heldout_classes;
    const auto seed = derive_seed(s, "acceptance-noise");
    const auto a = noisy_accuracy(lab.noisy(), lab.data().pairs, h, 0.2, seed);
    const auto b = noisy_accuracy(lab.noisy(), lab.data().pairs, h, 0.8, seed);
    for (std::size_t d = 0; d < kNumDims; ++d) {
      early[d].push_back(a[d]);
      late[d].push_back(b[d]);
    }
    const auto split = split_by_condition(lab.data().pairs.records, h);
    for (std::size_t d = 0; d < kNumDims; ++d) {
      for (double v : noisy_deltas(lab.noisy(), split.validation, d, 1.0, seed)) zero = zero && v == 0.0;
    }
  }
  Scores me{}, ml{};
  bool ok = zero;
  for (std::size_t d = 0; d < kNumDims; ++d) {
    me[d] = median3(early[d]);
    ml[d] = median3(late[d]);
    ok = ok && me[d] >= ml[d];
  }
  return {ok, "3-seed median acc vq/mq/ta t=0.2 " + triple(me) + " vs t=0.8 " + triple(ml) + "; t=1 deltas all zero " +
                  (zero ? "yes" : "no")};
}

// ---- reproducibility ----

std::string run_smoke(const std::filesystem::path& dir, const std::string& config) {
  std::filesystem::remove_all(dir);
  const std::vector<std::vector<std::string>> stages = {
      {"gen-data"},
      {"train-flow"},
      {"train-reward"},
      {"train-noisy-reward"},
      {"align", "--method", "dpo"},
      {"align", "--method", "sft"},
      {"sample", "--model", "base"},
      {"sample", "--model", "dpo"},
      {"sample", "--guided", "--trace"},
      {"eval", "--a", "dpo"},
      {"eval", "--a", "guided"},
      {"ablate"},
  };
  for (const auto& s : stages) {
    std::vector<std::string> args{"--config", config, "--out", dir.string()};
    args.insert(args.end(), s.begin(), s.end());
    std::ostringstream out, err;
    if (cli::dispatch(args, out, err) != cli::kExitOk) throw std::runtime_error(s.front() + " failed: " + err.str());
  }
  return dir.string();
}

// Every manifest plus every report CSV, keyed by path relative to the run
// directory.  Manifests carry output checksums and no timestamps.
std::map<std::string, std::string> fingerprint(const std::filesystem::path& dir) {
  std::map<std::string, std::string> fp;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = std::filesystem::relative(e.path(), dir).generic_string();
    const auto ext = e.path().extension().string();
    if (rel.rfind("manifests/", 0) == 0 || ext == ".csv") fp[rel] = read_file(e.path().string());
  }
  return fp;
}

Outcome reproducibility() {
  const std::string config = std::string(FLOWALIGN_SOURCE_DIR) + "/configs/smoke.ini";
  const auto root = std::filesystem::current_path() / "acceptance_repro";
  const auto a = fingerprint(run_smoke(root / "a", config));
  const auto b = fingerprint(run_smoke(root / "b", config));
  std::size_t outputs = 0;
  for (const auto& [k, v] : a) {
    if (k.rfind("manifests/", 0) == 0) outputs += nlohmann::json::parse(v).at("outputs").size();
  }
  std::vector<std::string> diff;
  for (const auto& [k, v] : a) {
    const auto it = b.find(k);
    if (it == b.end() || it->second != v) diff.push_back(k);
  }
  if (a.size() != b.size()) diff.push_back("(file sets differ)");
  std::string detail = std::to_string(a.size()) + " manifests and report CSVs compared (" + std::to_string(outputs) +
                       " checksummed artifacts)";
  if (!diff.empty()) detail += ", differing: " + diff.front();
  return {diff.empty() && !a.empty(), detail};
}

}  // namespace

int main() {
  Labs labs;
  criterion(1, lemma_identity);
  criterion(2, btt_normalization);
  criterion(3, gradient_suite);
  criterion(4, sampler_correctness);
  criterion(5, tie_calibration_exact);
  criterion(6, [&] { return reward_quality(labs); });
  criterion(7, [&] { return btt_ties(labs); });
  criterion(8, [&] { return bt_vs_regression(labs); });
  criterion(9, [&] { return dpo_improves(labs); });
  criterion(10, [&] { return beta_schedule_ablation(labs); });
  criterion(11, [&] { return guidance_steering(labs); });
  criterion(12, [&] { return noisy_sanity(labs); });
  criterion(13, reproducibility);
  std::printf("%d of 13 criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
