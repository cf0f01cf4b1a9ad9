#include "pbkd/evaluation.h"

#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pbkd/baselines.h"
#include "pbkd/error.h"
#include "pbkd/reward_model.h"
#include "test_util.h"

namespace pbkd {
namespace {

using testing::BruteValue;
using testing::RandomSoftmax;
using testing::RandomVector;
using testing::SmallSpec;

double OlsSlope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return sxy / sxx;
}

TEST(ExactValueTest, ZeroReward) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  SoftmaxLinearPolicy uniform(mdp);
  EXPECT_EQ(ExactValue(mdp, uniform, Eigen::VectorXd::Zero(8)), 0.0);
}

TEST(ExactValueTest, DeterministicPolicySingleSupport) {
  TokenMdp mdp(SmallSpec(3, 3, 0.8, 8, 3));
  const auto policy = TabularPolicy::Deterministic(mdp, 1);
  Rng rng(1);
  const Eigen::VectorXd theta = RandomVector(8, 2.0, rng);
  double expected = 0.0;
  for (int x = 0; x < 3; ++x) {
    expected += theta.dot(TrajectoryFeatures(mdp, x, std::vector<int>{1, 1, 1})) / 3.0;
  }
  EXPECT_NEAR(ExactValue(mdp, policy, theta), expected, 1e-14);
}

TEST(ExactValueTest, UniformIsMeanOverTrajectories) {
  TokenMdp mdp(SmallSpec(2, 2, 1.0, 8, 1));
  SoftmaxLinearPolicy uniform(mdp);
  Rng rng(2);
  const Eigen::VectorXd theta = RandomVector(8, 1.0, rng);
  double mean = 0.0;
  for (const auto& t : EnumerateTrajectories(mdp, 0)) mean += theta.dot(t.features) / 4.0;
  EXPECT_NEAR(ExactValue(mdp, uniform, theta), mean, 1e-14);
}

TEST(ExactValueTest, MatchesBruteForceAndIsLinear) {
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    TokenMdp mdp(SmallSpec(2 + rng.Index(2), 1 + rng.Index(3), 0.5 + 0.5 * rng.Uniform(),
                           6, 2, rng.engine()()));
    const auto policy = RandomSoftmax(mdp, 1.0, rng);
    const Eigen::VectorXd t1 = RandomVector(6, 1.0, rng);
    const Eigen::VectorXd t2 = RandomVector(6, 1.0, rng);
    ASSERT_NEAR(ExactValue(mdp, policy, t1), BruteValue(mdp, policy, t1), 1e-12);
    const double a = 0.3, b = -1.7;
    ASSERT_NEAR(ExactValue(mdp, policy, a * t1 + b * t2),
                a * ExactValue(mdp, policy, t1) + b * ExactValue(mdp, policy, t2),
                1e-10);
  }
}

TEST(ExactValueTest, CapExceeded) {
  MdpSpec spec = SmallSpec(4, 4, 1.0);
  spec.enumeration_cap = 100;
  TokenMdp mdp(spec);
  SoftmaxLinearPolicy uniform(mdp);
  try {
    ExactValue(mdp, uniform, Eigen::VectorXd::Zero(8));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCapExceeded);
  }
}

TEST(McValueTest, WithinThreeStandardErrors) {
  Rng rng(4);
  int inside = 0;
  for (int i = 0; i < 100; ++i) {
    TokenMdp mdp(SmallSpec(3, 3, 1.0, 8, 2, rng.engine()()));
    const auto policy = RandomSoftmax(mdp, 1.0, rng);
    const Eigen::VectorXd theta = RandomVector(8, 2.0, rng);
    const McEstimate est = McValue(mdp, policy, theta, 2000, rng);
    inside += std::abs(est.mean - ExactValue(mdp, policy, theta)) <= 3.0 * est.std_error;
  }
  EXPECT_EQ(inside, 100);
}

TEST(McValueTest, SingleSampleOnDeterministicPolicy) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0, 8, 1));
  const auto policy = TabularPolicy::Deterministic(mdp, 2);
  Rng rng(5);
  const Eigen::VectorXd theta = RandomVector(8, 1.0, rng);
  EXPECT_EQ(McValue(mdp, policy, theta, 1, rng).mean, ExactValue(mdp, policy, theta));
}

TEST(McValueTest, VarianceScalesInversely) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(6);
  const auto policy = RandomSoftmax(mdp, 1.0, rng);
  const Eigen::VectorXd theta = RandomVector(8, 2.0, rng);
  const double exact = ExactValue(mdp, policy, theta);
  std::vector<double> ns, vars;
  for (int n = 8; n <= 512; n *= 2) {
    double sq = 0.0;
    const int reps = 400;
    for (int r = 0; r < reps; ++r) {
      const double e = McValue(mdp, policy, theta, n, rng).mean - exact;
      sq += e * e / reps;
    }
    ns.push_back(n);
    vars.push_back(sq);
  }
  const double slope = OlsSlope(ns, vars);
  EXPECT_GE(slope, -1.2);
  EXPECT_LE(slope, -0.8);
}

TEST(FeatureExpectationTest, DeterministicPolicy) {
  MdpSpec spec = SmallSpec(3, 3, 0.9);
  spec.prompt_distribution = {1.0, 0.0};
  TokenMdp mdp(spec);
  const auto policy = TabularPolicy::Deterministic(mdp, 0);
  EXPECT_TRUE(FeatureExpectation(mdp, policy)
                  .isApprox(TrajectoryFeatures(mdp, 0, std::vector<int>{0, 0, 0}), 1e-14));
}

TEST(FeatureExpectationTest, LinearityAndBound) {
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    TokenMdp mdp(SmallSpec(3, 3, rng.Uniform(), 8, 2, rng.engine()()));
    const auto policy = RandomSoftmax(mdp, 2.0, rng);
    const Eigen::VectorXd theta = RandomVector(8, 3.0, rng);
    const Eigen::VectorXd phi = FeatureExpectation(mdp, policy);
    ASSERT_NEAR(theta.dot(phi), ExactValue(mdp, policy, theta), 1e-12);
    ASSERT_LE(phi.norm(), 1.0 + 1e-12);
  }
}

TEST(FeatureExpectationTest, MonteCarloMode) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(8);
  const auto policy = RandomSoftmax(mdp, 1.0, rng);
  const Eigen::VectorXd mc =
      FeatureExpectation(mdp, policy, ValueMode::kMonteCarlo, 40000, rng);
  EXPECT_LE((mc - FeatureExpectation(mdp, policy)).norm(), 0.01);
}

TEST(DpOptimalTest, ConstantReward) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0, 2, 1),
               [](int, std::span<const int>, int) {
                 return Eigen::Vector2d(1.0 / 3.0, 0.0).eval();
               });
  const Eigen::Vector2d theta(1.5, 0.0);
  const auto pi = DpOptimalPolicy(mdp, theta);
  EXPECT_NEAR(ExactValue(mdp, pi, theta), 1.5, 1e-14);
  // Ties go to action 0.
  EXPECT_EQ(pi.ActionDistribution(mdp, 0, std::vector<int>{})[0], 1.0);
}

TEST(DpOptimalTest, DominatesEveryTrajectory) {
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    TokenMdp mdp(SmallSpec(2 + rng.Index(2), 2 + rng.Index(2), 0.5 + 0.5 * rng.Uniform(),
                           8, 1, rng.engine()()));
    const Eigen::VectorXd theta = RandomVector(8, 2.0, rng);
    const double j = ExactValue(mdp, DpOptimalPolicy(mdp, theta), theta);
    double best = -1e300;
    for (const auto& t : EnumerateTrajectories(mdp, 0)) best = std::max(best, theta.dot(t.features));
    ASSERT_NEAR(j, best, 1e-12);
  }
}

TEST(PolicyGradientTest, ExactMatchesFiniteDifferences) {
  Rng rng(10);
  for (int i = 0; i < 10; ++i) {
    TokenMdp mdp(SmallSpec(3, 3, 0.5 + 0.5 * rng.Uniform(), 8, 2, rng.engine()()));
    SoftmaxLinearPolicy policy = RandomSoftmax(mdp, 1.0, rng);
    const Eigen::VectorXd theta = RandomVector(8, 2.0, rng);
    const Eigen::MatrixXd grad = ExactPolicyGradient(mdp, policy, theta);
    const double eps = 1e-5;
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      SoftmaxLinearPolicy plus = policy, minus = policy;
      plus.mutable_weights().data()[k] += eps;
      minus.mutable_weights().data()[k] -= eps;
      const double fd = (ExactValue(mdp, plus, theta) - ExactValue(mdp, minus, theta)) / (2 * eps);
      ASSERT_NEAR(grad.data()[k], fd, 1e-8);
    }
  }
}

// Finite differences of the Monte-Carlo value with common random numbers
// against the score-function estimator.
TEST(PolicyGradientTest, ScoreFunctionAgreesWithCommonRandomNumbers) {
  TokenMdp mdp(SmallSpec(2, 2, 1.0, 8, 1));
  Rng init(11);
  SoftmaxLinearPolicy policy = RandomSoftmax(mdp, 0.5, init);
  const Eigen::VectorXd theta = RandomVector(8, 2.0, init);
  const int n = 200'000;
  const Eigen::Index k = 1;
  const double eps = 0.05;
  SoftmaxLinearPolicy plus = policy, minus = policy;
  plus.mutable_weights().data()[k] += eps;
  minus.mutable_weights().data()[k] -= eps;

  Rng a(12), b(12);
  double fd_sum = 0, fd_sq = 0;
  for (int i = 0; i < n; ++i) {
    const double d = (theta.dot(Rollout(mdp, plus, 0, a).features) -
                      theta.dot(Rollout(mdp, minus, 0, b).features)) / (2 * eps);
    fd_sum += d;
    fd_sq += d * d;
  }
  const double fd_mean = fd_sum / n;
  const double fd_se = std::sqrt((fd_sq / n - fd_mean * fd_mean) / n);

  Rng c(13);
  double sf_sum = 0, sf_sq = 0;
  for (int i = 0; i < n; ++i) {
    const Trajectory t = Rollout(mdp, policy, 0, c);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(policy.weights().rows(), 2);
    policy.AccumulateGradLogProb(mdp, t, theta.dot(t.features), g);
    sf_sum += g.data()[k];
    sf_sq += g.data()[k] * g.data()[k];
  }
  const double sf_mean = sf_sum / n;
  const double sf_se = std::sqrt((sf_sq / n - sf_mean * sf_mean) / n);
  const double exact = ExactPolicyGradient(mdp, policy, theta).data()[k];
  EXPECT_LE(std::abs(fd_mean - sf_mean), 3.0 * std::hypot(fd_se, sf_se) + 1e-3);
  EXPECT_LE(std::abs(sf_mean - exact), 3.0 * sf_se);
}

TEST(BehaviorCloningTest, ConcentratesOnRepeatedTrajectory) {
  TokenMdp mdp(SmallSpec(2, 2, 1.0, 8, 1));
  const std::vector<Trajectory> data(5, MakeTrajectory(mdp, 0, {1, 0}));
  const BcResult fit = BehaviorCloningFit(mdp, data, SoftmaxLinearPolicy(mdp));
  EXPECT_GE(std::exp(fit.policy.LogProb(mdp, data[0])), 0.99);
  for (std::size_t i = 1; i < fit.losses.size(); ++i) {
    ASSERT_LE(fit.losses[i], fit.losses[i - 1] + 1e-15);
  }
}

TEST(BehaviorCloningTest, StationaryAtOptimum) {
  TokenMdp mdp(SmallSpec(2, 2, 1.0, 8, 1));
  // Every trajectory once: the uniform policy is the exact maximizer.
  const auto data = EnumerateTrajectories(mdp, 0);
  const BcResult fit = BehaviorCloningFit(mdp, data, SoftmaxLinearPolicy(mdp));
  for (std::size_t i = 1; i < fit.losses.size(); ++i) {
    EXPECT_LE(std::abs(fit.losses[i] - fit.losses[i - 1]), 1e-9);
  }
}

TEST(BehaviorCloningTest, GradientIsPermutationInvariant) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(14);
  const auto policy = RandomSoftmax(mdp, 1.0, rng);
  std::vector<Trajectory> data;
  for (int i = 0; i < 40; ++i) data.push_back(Rollout(mdp, policy, i % 2, rng));
  const Eigen::MatrixXd g1 = BehaviorCloningGradient(mdp, data, policy);
  std::shuffle(data.begin(), data.end(), std::mt19937_64(3));
  const Eigen::MatrixXd g2 = BehaviorCloningGradient(mdp, data, policy);
  EXPECT_LE((g1 - g2).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(BehaviorCloningTest, EmptyDataset) {
  TokenMdp mdp(SmallSpec(2, 2, 1.0));
  try {
    BehaviorCloningFit(mdp, {}, SoftmaxLinearPolicy(mdp));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyDataset);
  }
}

TEST(BestOfNTest, SingleSampleIsRollout) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng init(15);
  const auto policy = RandomSoftmax(mdp, 1.0, init);
  const LinearReward rm{RandomVector(8, 1.0, init), 1.0};
  Rng a(16), b(16);
  EXPECT_EQ(BestOfN(mdp, policy, rm, 1, 1, a).actions, Rollout(mdp, policy, 1, b).actions);
}

TEST(BestOfNTest, ImprovesMeanReward) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0, 8, 4));
  SoftmaxLinearPolicy uniform(mdp);
  Rng rng(17);
  const LinearReward rstar{RandomVector(8, 2.0, rng), 2.0};
  double best = 0, plain = 0;
  for (int i = 0; i < 1000; ++i) {
    const int x = mdp.SamplePrompt(rng);
    best += TrajReward(rstar, BestOfN(mdp, uniform, rstar, x, 10, rng));
    plain += TrajReward(rstar, Rollout(mdp, uniform, x, rng));
  }
  EXPECT_GE(best, plain);
}

TEST(BestOfNTest, DeterministicPolicy) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  const auto policy = TabularPolicy::Deterministic(mdp, 1);
  Rng rng(18);
  const LinearReward rm{RandomVector(8, 1.0, rng), 1.0};
  EXPECT_EQ(BestOfN(mdp, policy, rm, 0, 7, rng).actions, (std::vector<int>{1, 1, 1}));
}

}  // namespace
}  // namespace pbkd
