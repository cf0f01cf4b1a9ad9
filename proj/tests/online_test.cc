#include "pbkd/online.h"

#include <cmath>

#include <gtest/gtest.h>

#include "pbkd/error.h"
#include "test_util.h"

namespace pbkd {
namespace {

using testing::RandomSoftmax;
using testing::RandomVector;
using testing::SmallSpec;

MdpSpec TabularSpec(int prompts = 2, std::uint64_t seed = 4) {
  MdpSpec spec = SmallSpec(3, 3, 1.0, 8, prompts, seed);
  spec.context_len = 2;
  return spec;
}

PreferenceMatrix RandomPreferences(int n, int d, Rng& rng) {
  PreferenceMatrix m;
  m.diffs.resize(n, d);
  m.signs.resize(n);
  for (int i = 0; i < n; ++i) {
    m.diffs.row(i) = RandomVector(d, 0.5, rng).transpose();
    m.signs[i] = rng.Bernoulli(0.5) ? 1.0 : -1.0;
  }
  return m;
}

ClippedBatch SampledBatch(const TokenMdp& mdp, const SoftmaxLinearPolicy& snapshot,
                          const Eigen::VectorXd& theta, int m, bool baseline,
                          Rng& rng) {
  std::vector<Trajectory> trajs;
  std::vector<double> returns;
  for (int i = 0; i < m; ++i) {
    trajs.push_back(Rollout(mdp, snapshot, mdp.SamplePrompt(rng), rng));
    returns.push_back(theta.dot(trajs.back().features));
  }
  std::vector<double> weights(m, 1.0 / m);
  return MakeClippedBatch(mdp, snapshot, std::move(trajs), std::move(weights),
                          returns, baseline);
}

TEST(RewardStepTest, ZeroBetaMovesAlongPairSum) {
  TokenMdp mdp(SmallSpec(3, 3, 0.9));
  Rng rng(1);
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(8);
  for (int m = 0; m < 10; ++m) {
    const int x = mdp.SamplePrompt(rng);
    const SoftmaxLinearPolicy p(mdp);
    sum += Rollout(mdp, p, x, rng).features - Rollout(mdp, p, x, rng).features;
  }
  const Eigen::VectorXd theta0 = RandomVector(8, 0.1, rng);
  const RewardStepResult r = RewardStep(theta0, sum, nullptr, 0.0, 100.0, 0.3);
  EXPECT_LE((r.theta - theta0 - 0.3 * sum).norm(), 1e-14);
  EXPECT_GT(r.after, r.before);
}

TEST(RewardStepTest, IdenticalPairsLeaveThetaUnchanged) {
  Rng rng(2);
  const Eigen::VectorXd theta0 = RandomVector(8, 0.5, rng);
  const RewardStepResult r =
      RewardStep(theta0, Eigen::VectorXd::Zero(8), nullptr, 0.0, 1.0, 1.0);
  EXPECT_EQ(r.theta, theta0);
}

TEST(RewardStepTest, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const PreferenceMatrix data = RandomPreferences(50, 6, rng);
    const Eigen::VectorXd dir = RandomVector(6, 2.0, rng);
    const Eigen::VectorXd theta = RandomVector(6, 0.7, rng);
    const double beta = 0.5 + trial;
    const Eigen::VectorXd g = InnerGradient(theta, dir, &data, beta);
    Eigen::VectorXd fd(6);
    const double h = 1e-6;
    for (int i = 0; i < 6; ++i) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(6);
      e[i] = h;
      fd[i] = (InnerObjective(theta + e, dir, &data, beta) -
               InnerObjective(theta - e, dir, &data, beta)) /
              (2 * h);
    }
    EXPECT_LE((g - fd).norm() / g.norm(), 1e-5);
  }
}

TEST(RewardStepTest, StaysInBallAndAscends) {
  Rng rng(4);
  const PreferenceMatrix data = RandomPreferences(200, 8, rng);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(8);
  double step = 1.0;
  for (int k = 0; k < 30; ++k) {
    const RewardStepResult r =
        RewardStep(theta, RandomVector(8, 5.0, rng), &data, 1.0, 0.5, step);
    EXPECT_GE(r.after, r.before);
    EXPECT_LE(r.theta.norm(), 0.5 + 1e-12);
    theta = r.theta;
    step = std::min(r.step, 1.0);
  }
}

TEST(ClippedSurrogateTest, RatioOneMatchesVanillaGradient) {
  TokenMdp mdp(TabularSpec());
  Rng rng(5);
  const SoftmaxLinearPolicy snapshot = RandomSoftmax(mdp, 1.0, rng);
  const Eigen::VectorXd theta = RandomVector(8, 1.0, rng);
  for (bool baseline : {false, true}) {
    Rng a(6);
    const ClippedBatch batch = SampledBatch(mdp, snapshot, theta, 40, baseline, a);
    std::vector<double> returns;
    for (const Trajectory& t : batch.trajectories) {
      returns.push_back(theta.dot(t.features));
    }
    const Eigen::MatrixXd vanilla = ScoreFunctionGradient(
        mdp, snapshot, batch.trajectories, returns, baseline);
    const Eigen::MatrixXd clipped =
        ClippedSurrogateGradient(mdp, snapshot, batch, 0.2);
    EXPECT_LE((clipped - vanilla).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(ClippedSurrogateTest, ClippedSampleContributesNothing) {
  TokenMdp mdp(TabularSpec());
  Rng rng(7);
  const SoftmaxLinearPolicy snapshot = RandomSoftmax(mdp, 1.0, rng);
  const Trajectory t = Rollout(mdp, snapshot, 0, rng);
  const double ret = 1.0;
  const ClippedBatch batch = MakeClippedBatch(mdp, snapshot, {t}, {1.0},
                                              std::span<const double>(&ret, 1),
                                              false);
  SoftmaxLinearPolicy moved = snapshot;
  while (std::exp(moved.LogProb(mdp, t) - snapshot.LogProb(mdp, t)) < 1.5) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(moved.weights().rows(),
                                              moved.weights().cols());
    moved.AccumulateGradLogProb(mdp, t, 0.5, g);
    moved.mutable_weights() += g;
  }
  EXPECT_EQ(ClippedSurrogateGradient(mdp, moved, batch, 0.2).norm(), 0.0);
  // Nearby policies sit on the same flat branch.
  const double base = ClippedSurrogate(mdp, moved, batch, 0.2);
  EXPECT_DOUBLE_EQ(base, 1.2);
  for (int k = 0; k < 5; ++k) {
    SoftmaxLinearPolicy nudged = moved;
    nudged.mutable_weights() += 1e-4 * RandomSoftmax(mdp, 1.0, rng).weights();
    EXPECT_DOUBLE_EQ(ClippedSurrogate(mdp, nudged, batch, 0.2), base);
  }
}

TEST(ClippedSurrogateTest, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  int checked = 0;
  while (checked < 50) {
    TokenMdp mdp(TabularSpec(2, 10 + checked));
    const SoftmaxLinearPolicy snapshot = RandomSoftmax(mdp, 1.0, rng);
    SoftmaxLinearPolicy policy = snapshot;
    policy.mutable_weights() += 0.15 * RandomSoftmax(mdp, 1.0, rng).weights();
    const ClippedBatch batch =
        SampledBatch(mdp, snapshot, RandomVector(8, 1.0, rng), 30, true, rng);
    // Skip configurations with a ratio near a kink of the clipped min.
    bool near_kink = false;
    for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
      const double rho = std::exp(policy.LogProb(mdp, batch.trajectories[i]) -
                                  batch.old_log_probs[i]);
      near_kink |= std::abs(rho - 0.8) < 1e-3 || std::abs(rho - 1.2) < 1e-3;
    }
    if (near_kink) continue;
    const Eigen::MatrixXd grad = ClippedSurrogateGradient(mdp, policy, batch, 0.2);
    const Eigen::MatrixXd dir = RandomSoftmax(mdp, 1.0, rng).weights();
    const double h = 1e-6;
    SoftmaxLinearPolicy plus = policy;
    SoftmaxLinearPolicy minus = policy;
    plus.mutable_weights() += h * dir;
    minus.mutable_weights() -= h * dir;
    const double fd = (ClippedSurrogate(mdp, plus, batch, 0.2) -
                       ClippedSurrogate(mdp, minus, batch, 0.2)) /
                      (2 * h);
    const double analytic = (grad.array() * dir.array()).sum();
    EXPECT_LE(std::abs(fd - analytic), 1e-4 * std::max(std::abs(analytic), 1e-3))
        << "config " << checked;
    ++checked;
  }
}

TEST(ClippedSurrogateTest, BaselineKeepsExpectation) {
  TokenMdp mdp(TabularSpec());
  Rng rng(9);
  const SoftmaxLinearPolicy snapshot = RandomSoftmax(mdp, 1.0, rng);
  const Eigen::VectorXd theta = RandomVector(8, 1.0, rng);
  std::vector<Eigen::MatrixXd> probes;
  for (int k = 0; k < 3; ++k) probes.push_back(RandomSoftmax(mdp, 1.0, rng).weights());
  const int reps = 1000;
  std::vector<std::vector<double>> diffs(probes.size());
  for (int r = 0; r < reps; ++r) {
    Rng a(DeriveSeed(10, "rep", r));
    Rng b(DeriveSeed(10, "rep", r));
    const Eigen::MatrixXd on = ClippedSurrogateGradient(
        mdp, snapshot, SampledBatch(mdp, snapshot, theta, 8, true, a), 0.2);
    const Eigen::MatrixXd off = ClippedSurrogateGradient(
        mdp, snapshot, SampledBatch(mdp, snapshot, theta, 8, false, b), 0.2);
    for (std::size_t k = 0; k < probes.size(); ++k) {
      diffs[k].push_back(((on - off).array() * probes[k].array()).sum());
    }
  }
  for (const std::vector<double>& d : diffs) {
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= reps;
    double var = 0.0;
    for (double v : d) var += (v - mean) * (v - mean);
    const double se = std::sqrt(var / (reps - 1) / reps);
    EXPECT_LE(std::abs(mean), 3.0 * se);
  }
}

TEST(CovarianceTest, RidgeAndRankOne) {
  CovarianceAccumulator acc(4, 0.01);
  EXPECT_EQ(acc.sigma(), 0.01 * Eigen::MatrixXd::Identity(4, 4));
  Eigen::MatrixXd v(1, 4);
  v << 1.0, -2.0, 0.5, 3.0;
  acc.Update(v);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(acc.sigma());
  const Eigen::VectorXd ev = eig.eigenvalues();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(ev[i], 0.01, 1e-12);
  EXPECT_NEAR(ev[3], 0.01 + v.squaredNorm(), 1e-12);
  EXPECT_NEAR(acc.LogDet(), std::log(ev.prod()), 1e-10);
}

TEST(CovarianceTest, TraceGrowsAndStaysPositiveDefinite) {
  Rng rng(11);
  CovarianceAccumulator acc(5, 0.01);
  double last = acc.sigma().trace();
  for (int t = 0; t < 20; ++t) {
    Eigen::MatrixXd diffs(7, 5);
    for (int i = 0; i < 7; ++i) diffs.row(i) = RandomVector(5, 1.0, rng).transpose();
    acc.Update(diffs);
    EXPECT_GT(acc.sigma().trace(), last);
    last = acc.sigma().trace();
    EXPECT_LE((acc.sigma() - acc.sigma().transpose()).cwiseAbs().maxCoeff(), 1e-10);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(acc.sigma());
    EXPECT_GE(eig.eigenvalues().minCoeff(), 0.005);
  }
  EXPECT_THROW(acc.Update(Eigen::MatrixXd::Ones(1, 3)), Error);
}

TEST(UncertaintyStepTest, ZeroAlphaIsNoOp) {
  TokenMdp mdp(TabularSpec());
  Rng rng(12);
  SoftmaxLinearPolicy policy = RandomSoftmax(mdp, 1.0, rng);
  const SoftmaxLinearPolicy before = policy;
  const CovarianceAccumulator sigma(8, 0.01);
  UncertaintyStep(mdp, LinearFeatureModel(mdp), RandomVector(8, 0.3, rng), sigma,
                  0.0, 1.0, ValueMode::kExact, 1, rng, policy);
  EXPECT_EQ(policy.weights(), before.weights());
  UncertaintyStep(mdp, LinearFeatureModel(mdp), RandomVector(8, 0.3, rng), sigma,
                  0.0, 1.0, ValueMode::kMonteCarlo, 16, rng, policy);
  EXPECT_EQ(policy.weights(), before.weights());
}

TEST(UncertaintyStepTest, StationaryAtTeacher) {
  TokenMdp mdp(TabularSpec());
  Rng rng(13);
  const SoftmaxLinearPolicy teacher = RandomSoftmax(mdp, 1.0, rng);
  SoftmaxLinearPolicy policy = teacher;
  const CovarianceAccumulator sigma(8, 0.01);
  const double objective =
      UncertaintyStep(mdp, LinearFeatureModel(mdp), FeatureExpectation(mdp, teacher),
                      sigma, 1.0, 1.0, ValueMode::kExact, 1, rng, policy);
  EXPECT_LE(objective, 1e-20);
  EXPECT_LE((policy.weights() - teacher.weights()).norm() / 2.0, 1e-8);
}

TEST(UncertaintyStepTest, IdentitySigmaStepIncreasesDeviation) {
  int increased = 0;
  for (int trial = 0; trial < 100; ++trial) {
    TokenMdp mdp(TabularSpec(2, 100 + trial));
    Rng rng(DeriveSeed(14, "trial", trial));
    const SoftmaxLinearPolicy teacher = RandomSoftmax(mdp, 1.0, rng);
    SoftmaxLinearPolicy policy = RandomSoftmax(mdp, 1.0, rng);
    // Sigma = I: ridge 1 and no data.
    const CovarianceAccumulator sigma(8, 1.0);
    const Eigen::VectorXd phi_e = FeatureExpectation(mdp, teacher);
    const double expected = (FeatureExpectation(mdp, policy) - phi_e).squaredNorm();
    const double before = UncertaintyStep(mdp, LinearFeatureModel(mdp), phi_e, sigma,
                                          0.1, 1.0, ValueMode::kExact, 1, rng, policy);
    EXPECT_NEAR(before, expected, 1e-12);
    const double after = (FeatureExpectation(mdp, policy) - phi_e).squaredNorm();
    increased += after > before;
  }
  EXPECT_GE(increased, 95);
}

OnlineConfig SmallOnlineConfig() {
  OnlineConfig c;
  c.iterations = 6;
  c.pref_batch = 8;
  c.opt_batch = 16;
  c.policy_lr = 5.0;
  return c;
}

TEST(RunOnlineTest, SingleIterationHasOneRow) {
  TokenMdp mdp(TabularSpec());
  Rng rng(15);
  const LinearReward rstar{RandomVector(8, 1.0, rng), 1.0};
  const TabularPolicy teacher = DpOptimalPolicy(mdp, rstar.theta);
  OnlineConfig c = SmallOnlineConfig();
  c.iterations = 1;
  const OnlineResult r = RunOnline(mdp, teacher, SoftmaxLinearPolicy(mdp), c, &rstar);
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_EQ(r.trace[0].t, 1);
  EXPECT_EQ(r.trace[0].n_t, 8);
  EXPECT_EQ(r.dataset.size(), 8u);
}

TEST(RunOnlineTest, TraceInvariants) {
  TokenMdp mdp(TabularSpec());
  Rng rng(16);
  const LinearReward rstar{RandomVector(8, 1.0, rng), 1.0};
  const TabularPolicy teacher = SoftenedOptimalPolicy(mdp, rstar.theta, 0.1);
  OnlineConfig c = SmallOnlineConfig();
  c.snapshot_every = 2;
  const OnlineResult r = RunOnline(mdp, teacher, SoftmaxLinearPolicy(mdp), c, &rstar);
  ASSERT_EQ(r.trace.size(), 6u);
  const double j_opt = ExactValue(mdp, DpOptimalPolicy(mdp, rstar.theta), rstar.theta);
  double regret = 0.0;
  for (std::size_t i = 0; i < r.trace.size(); ++i) {
    const OnlineTraceRow& row = r.trace[i];
    if (i > 0) {
      EXPECT_GT(row.n_t, r.trace[i - 1].n_t);
      EXPECT_GT(row.sigma_logdet, r.trace[i - 1].sigma_logdet);
    }
    EXPECT_LE(row.theta_norm, 1.0 + 1e-12);
    regret += j_opt - row.j_student_rstar;
    EXPECT_NEAR(row.regret_cumulative, regret, 1e-12);
    EXPECT_NEAR(row.j_teacher_rstar, ExactValue(mdp, teacher, rstar.theta), 1e-12);
  }
  ASSERT_EQ(r.snapshots.size(), 3u);
  EXPECT_EQ(r.snapshots.back().t, 6);
  EXPECT_EQ(r.snapshots.back().policy.weights(), r.policy.weights());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(r.sigma);
  EXPECT_GE(eig.eigenvalues().minCoeff(), c.ridge / 2);
  for (std::size_t i = 0; i < r.dataset.size(); ++i) {
    EXPECT_EQ(r.dataset[i].iteration, static_cast<int>(i) / 8 + 1);
    EXPECT_EQ(r.dataset[i].provenance, Provenance::kOnlineBtl);
  }
}

TEST(RunOnlineTest, Deterministic) {
  TokenMdp mdp(TabularSpec());
  Rng rng(17);
  const LinearReward rstar{RandomVector(8, 1.0, rng), 1.0};
  const TabularPolicy teacher = SoftenedOptimalPolicy(mdp, rstar.theta, 0.1);
  for (ValueMode mode : {ValueMode::kExact, ValueMode::kMonteCarlo}) {
    OnlineConfig c = SmallOnlineConfig();
    c.mode = mode;
    c.seed = 42;
    const OnlineResult a = RunOnline(mdp, teacher, SoftmaxLinearPolicy(mdp), c, &rstar);
    const OnlineResult b = RunOnline(mdp, teacher, SoftmaxLinearPolicy(mdp), c, &rstar);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (std::size_t i = 0; i < a.trace.size(); ++i) {
      EXPECT_EQ(a.trace[i].j_student_rstar, b.trace[i].j_student_rstar);
      EXPECT_EQ(a.trace[i].loglik, b.trace[i].loglik);
      EXPECT_EQ(a.trace[i].gap_estimate, b.trace[i].gap_estimate);
    }
    EXPECT_EQ(a.policy.weights(), b.policy.weights());
    EXPECT_EQ(a.theta, b.theta);
  }
}

TEST(RunOnlineTest, ForcedLabelsNeedNoOracle) {
  TokenMdp mdp(TabularSpec());
  Rng rng(18);
  const SoftmaxLinearPolicy teacher = RandomSoftmax(mdp, 2.0, rng);
  OnlineConfig c = SmallOnlineConfig();
  c.labeling = LabelMode::kForced;
  const OnlineResult r = RunOnline(mdp, teacher, SoftmaxLinearPolicy(mdp), c, nullptr);
  EXPECT_TRUE(std::isnan(r.trace.back().j_student_rstar));
  for (const PreferenceSample& s : r.dataset.samples()) {
    EXPECT_EQ(s.provenance, Provenance::kOnlineForced);
  }
  c.labeling = LabelMode::kOracle;
  try {
    RunOnline(mdp, teacher, SoftmaxLinearPolicy(mdp), c, nullptr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingOracle);
  }
}

TEST(RunOnlineTest, WarmStartPrependsData) {
  TokenMdp mdp(TabularSpec());
  Rng rng(19);
  const LinearReward rstar{RandomVector(8, 1.0, rng), 1.0};
  const SoftmaxLinearPolicy mu(mdp);
  const PreferenceDataset prior = GenerateOffline(mdp, mu, mu, rstar, 30, rng);
  const TabularPolicy teacher = DpOptimalPolicy(mdp, rstar.theta);
  OnlineWarmStart warm;
  warm.data = &prior;
  warm.theta = 3.0 * rstar.theta;
  OnlineConfig c = SmallOnlineConfig();
  c.iterations = 2;
  const OnlineResult r = RunOnline(mdp, teacher, mu, c, &rstar, warm);
  EXPECT_EQ(r.dataset.size(), 30u + 16u);
  EXPECT_EQ(r.trace.front().n_t, 38);
  EXPECT_EQ(r.dataset[0].provenance, Provenance::kOfflineBtl);
}

TEST(RunOnlineTest, ConfigValidation) {
  OnlineConfig c;
  c.clip = 1.0;
  EXPECT_THROW(ValidateOnlineConfig(c), Error);
  c = OnlineConfig{};
  c.alpha = -0.1;
  EXPECT_THROW(ValidateOnlineConfig(c), Error);
  c = OnlineConfig{};
  c.iterations = 0;
  try {
    ValidateOnlineConfig(c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfigInvalid);
    EXPECT_NE(std::string(e.what()).find("online.iterations"), std::string::npos);
  }
  c = OnlineConfig{};
  c.lr_schedule = LrSchedule::kInvSqrt;
  c.policy_lr = 8.0;
  EXPECT_DOUBLE_EQ(PolicyLr(c, 4), 4.0);
}

TEST(RunOnlineTest, BeatsOfflineAtMatchedBudget) {
  TokenMdp mdp(TabularSpec(16, 11));
  Rng rng(5);
  const LinearReward rstar{RandomVector(8, 1.0, rng), 1.0};
  const TabularPolicy teacher = DpOptimalPolicy(mdp, rstar.theta);
  const TabularPolicy mu0 = SoftenedOptimalPolicy(mdp, rstar.theta, 2.0);
  const SoftmaxLinearPolicy uniform(mdp);
  double online = 0.0;
  double offline = 0.0;
  for (int seed = 0; seed < 5; ++seed) {
    OnlineConfig c;
    c.iterations = 200;
    c.pref_batch = 16;
    c.policy_lr = 20.0;
    c.lr_schedule = LrSchedule::kInvSqrt;
    c.seed = seed;
    online += RunOnline(mdp, teacher, uniform, c, &rstar).trace.back().j_student_rstar;

    Rng data_rng(DeriveSeed(seed, "offline"));
    const PreferenceDataset data =
        GenerateOffline(mdp, mu0, uniform, rstar, c.iterations * c.pref_batch, data_rng);
    OfflineConfig oc;
    oc.seed = seed;
    offline += ExactValue(mdp, SolveOffline(mdp, teacher, data, uniform, oc).policy,
                          rstar.theta);
  }
  EXPECT_GE(online / 5, offline / 5);
}

}  // namespace
}  // namespace pbkd
