#include "pbkd/policy.h"

#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "pbkd/error.h"
#include "test_util.h"

namespace pbkd {
namespace {

using testing::RandomSoftmax;
using testing::SmallSpec;

TEST(SoftmaxPolicyTest, ZeroWeightsAreUniform) {
  TokenMdp mdp(SmallSpec(4, 3, 1.0));
  SoftmaxLinearPolicy policy(mdp);
  const auto dist = policy.ActionDistribution(mdp, 1, std::vector<int>{2});
  for (int a = 0; a < 4; ++a) EXPECT_DOUBLE_EQ(dist[a], 0.25);
}

TEST(SoftmaxPolicyTest, HighTemperatureApproachesUniform) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  SoftmaxLinearPolicy base(mdp);
  Rng rng(1);
  Eigen::MatrixXd w = base.weights();
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = 2.0 * rng.Uniform() - 1.0;
  SoftmaxLinearPolicy hot(w, 1e4, mdp.context_len());
  const auto dist = hot.ActionDistribution(mdp, 0, std::vector<int>{1, 2});
  EXPECT_LE(dist.maxCoeff() - dist.minCoeff(), 1e-3);
}

TEST(SoftmaxPolicyTest, ShiftInvariance) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(2);
  SoftmaxLinearPolicy policy = RandomSoftmax(mdp, 2.0, rng);
  SoftmaxLinearPolicy shifted = policy;
  const std::vector<int> prefix{0, 2};
  const int row = SoftmaxLinearPolicy::StateFeatureIndex(mdp, 1, prefix);
  shifted.mutable_weights().row(row).array() += 3.7;
  const auto a = policy.ActionDistribution(mdp, 1, prefix);
  const auto b = shifted.ActionDistribution(mdp, 1, prefix);
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(a.sum(), 1.0, 1e-12);
}

TEST(LogProbTest, DeterministicOwnRollout) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Eigen::VectorXd onehot = Eigen::VectorXd::Zero(3);
  onehot[2] = 1.0;
  // A softmax policy cannot be deterministic; use a huge margin instead.
  SoftmaxLinearPolicy policy(mdp);
  policy.mutable_weights().col(2).setConstant(800.0);
  Rng rng(1);
  const Trajectory t = Rollout(mdp, policy, 0, rng);
  EXPECT_EQ(t.actions, (std::vector<int>{2, 2, 2}));
  EXPECT_EQ(policy.LogProb(mdp, t), 0.0);
}

TEST(LogProbTest, UniformAnalytic) {
  TokenMdp mdp(SmallSpec(4, 3, 1.0));
  SoftmaxLinearPolicy policy(mdp);
  const Trajectory t = MakeTrajectory(mdp, 0, {1, 3, 0});
  EXPECT_NEAR(policy.LogProb(mdp, t), 3.0 * std::log(0.25), 1e-14);
}

TEST(LogProbTest, SumsToOneOverEnumeration) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(3);
  const auto policy = RandomSoftmax(mdp, 1.5, rng);
  for (int x = 0; x < 2; ++x) {
    double total = 0.0;
    for (const auto& t : EnumerateTrajectories(mdp, x)) {
      total += std::exp(policy.LogProb(mdp, t));
    }
    EXPECT_NEAR(total, 1.0, 1e-10);
  }
}

TEST(LogProbTest, RejectsMalformed) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  SoftmaxLinearPolicy policy(mdp);
  Trajectory t;
  t.actions = {0, 1};
  try {
    policy.LogProb(mdp, t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMalformedTrajectory);
  }
}

TEST(LogProbTest, GradientMatchesFiniteDifferences) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(4);
  const auto policy = RandomSoftmax(mdp, 1.0, rng);
  const Trajectory t = MakeTrajectory(mdp, 1, {2, 0, 1});
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(policy.weights().rows(), 3);
  policy.AccumulateGradLogProb(mdp, t, 1.0, grad);
  const double eps = 1e-6;
  for (Eigen::Index i = 0; i < grad.size(); ++i) {
    SoftmaxLinearPolicy plus = policy, minus = policy;
    plus.mutable_weights().data()[i] += eps;
    minus.mutable_weights().data()[i] -= eps;
    const double fd = (plus.LogProb(mdp, t) - minus.LogProb(mdp, t)) / (2 * eps);
    ASSERT_NEAR(grad.data()[i], fd, 1e-8);
  }
}

TEST(TabularPolicyTest, UnknownState) {
  TokenMdp mdp(SmallSpec(2, 2, 1.0));
  TabularPolicy policy(mdp);
  policy.Set(mdp, 0, std::vector<int>{}, Eigen::Vector2d(0.5, 0.5));
  EXPECT_NO_THROW(policy.ActionDistribution(mdp, 0, std::vector<int>{}));
  try {
    policy.ActionDistribution(mdp, 0, std::vector<int>{1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownState);
  }
}

TEST(PolicyRecordTest, SoftmaxRoundTripIsBitExact) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(5);
  const auto policy = RandomSoftmax(mdp, 1.0, rng);
  std::stringstream ss;
  WritePolicyRecord(ss, policy);
  const auto back = ReadSoftmaxPolicyRecord(ss);
  EXPECT_EQ(back.weights(), policy.weights());
  EXPECT_EQ(back.temperature(), policy.temperature());
}

TEST(PolicyRecordTest, TabularRoundTripIsBitExact) {
  TokenMdp mdp(SmallSpec(3, 2, 1.0));
  Rng rng(6);
  TabularPolicy policy(mdp);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(policy.table().size()); ++i) {
    Eigen::Vector3d p(rng.Uniform(), rng.Uniform(), rng.Uniform());
    policy.SetByIndex(i, p / p.sum());
  }
  std::stringstream ss;
  WritePolicyRecord(ss, policy);
  const auto back = ReadTabularPolicyRecord(ss, mdp);
  for (std::size_t i = 0; i < policy.table().size(); ++i) {
    ASSERT_EQ(back.table()[i], policy.table()[i]);
  }
}

}  // namespace
}  // namespace pbkd
