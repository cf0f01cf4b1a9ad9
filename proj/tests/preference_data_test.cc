#include "pbkd/preference_data.h"

#include <sstream>

#include <gtest/gtest.h>

#include "pbkd/error.h"
#include "pbkd/evaluation.h"
#include "pbkd/reward_model.h"
#include "test_util.h"

namespace pbkd {
namespace {

using testing::RandomSoftmax;
using testing::RandomVector;
using testing::SmallSpec;

double LabelMean(const PreferenceDataset& d) {
  double total = 0.0;
  for (const auto& s : d.samples()) total += s.label;
  return total / static_cast<double>(d.size());
}

TEST(GenerateOfflineTest, ZeroRewardIsFairCoin) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  SoftmaxLinearPolicy uniform(mdp);
  Rng rng(1);
  const auto data = GenerateOffline(mdp, uniform, uniform,
                                    LinearReward{Eigen::VectorXd::Zero(8), 1.0}, 10000, rng);
  EXPECT_EQ(data.size(), 10000u);
  EXPECT_NEAR(LabelMean(data), 0.5, 0.02);
  for (const auto& s : data.samples()) {
    ASSERT_EQ(s.provenance, Provenance::kOfflineBtl);
    ASSERT_EQ(s.iteration, -1);
  }
}

TEST(GenerateOfflineTest, KnownGap) {
  // Two deterministic annotators whose trajectories differ by reward 5.
  TokenMdp mdp(SmallSpec(2, 1, 1.0, 2, 1), [](int, std::span<const int>, int a) {
    return Eigen::Vector2d(a == 0 ? 1.0 : 0.0, 0.0).eval();
  });
  const auto hi = TabularPolicy::Deterministic(mdp, 0);
  const auto lo = TabularPolicy::Deterministic(mdp, 1);
  Rng rng(2);
  const LinearReward rstar{Eigen::Vector2d(5.0, 0.0), 5.0};
  const auto data = GenerateOffline(mdp, hi, lo, rstar, 10000, rng);
  EXPECT_GE(LabelMean(data), 1.0 / (1.0 + std::exp(-5.0)) - 0.02);
}

TEST(GenerateOfflineTest, SameSeedBitIdentical) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng init(3);
  const auto mu0 = RandomSoftmax(mdp, 1.0, init);
  const LinearReward rstar{RandomVector(8, 2.0, init), 2.0};
  SoftmaxLinearPolicy uniform(mdp);
  Rng a(4), b(4);
  const auto da = GenerateOffline(mdp, mu0, uniform, rstar, 200, a);
  const auto db = GenerateOffline(mdp, mu0, uniform, rstar, 200, b);
  for (std::size_t i = 0; i < da.size(); ++i) {
    ASSERT_EQ(da[i].label, db[i].label);
    ASSERT_EQ(da[i].traj0.actions, db[i].traj0.actions);
    ASSERT_EQ(da[i].traj1.features, db[i].traj1.features);
  }
}

TEST(GenerateOfflineTest, LabelFrequenciesMatchBtlPerBucket) {
  // One prompt, V=2, H=1: four (traj0, traj1) buckets.
  TokenMdp mdp(SmallSpec(2, 1, 1.0, 4, 1, 9));
  SoftmaxLinearPolicy uniform(mdp);
  Rng rng(5);
  const LinearReward rstar{RandomVector(4, 2.0, rng), 2.0};
  const auto data = GenerateOffline(mdp, uniform, uniform, rstar, 40000, rng);
  double count[2][2] = {}, ones[2][2] = {};
  for (const auto& s : data.samples()) {
    count[s.traj0.actions[0]][s.traj1.actions[0]] += 1;
    ones[s.traj0.actions[0]][s.traj1.actions[0]] += s.label;
  }
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      const double p = BtlProb(rstar, MakeTrajectory(mdp, 0, {i}), MakeTrajectory(mdp, 0, {j}));
      const double sd = std::sqrt(p * (1 - p) / count[i][j]);
      EXPECT_NEAR(ones[i][j] / count[i][j], p, 3 * sd);
    }
  }
}

TEST(GenerateOnlineTest, ForcedAndOracle) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  Rng rng(6);
  const auto teacher = RandomSoftmax(mdp, 1.0, rng);
  const auto student = RandomSoftmax(mdp, 1.0, rng);
  for (int i = 0; i < 50; ++i) {
    const auto s = GenerateOnlineSample(mdp, teacher, student, 7, LabelMode::kForced,
                                        nullptr, rng);
    ASSERT_EQ(s.label, 1);
    ASSERT_EQ(s.iteration, 7);
    ASSERT_EQ(s.provenance, Provenance::kOnlineForced);
  }
  const LinearReward rstar{RandomVector(8, 2.0, rng), 2.0};
  double mean = 0.0;
  for (int i = 0; i < 10000; ++i) {
    mean += GenerateOnlineSample(mdp, teacher, teacher, 0, LabelMode::kOracle, &rstar, rng)
                .label /
            10000.0;
  }
  EXPECT_NEAR(mean, 0.5, 0.02);
  try {
    GenerateOnlineSample(mdp, teacher, student, 0, LabelMode::kOracle, nullptr, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingOracle);
  }
}

TEST(AppendTest, OrderAndGrowth) {
  TokenMdp mdp(SmallSpec(3, 3, 1.0));
  SoftmaxLinearPolicy uniform(mdp);
  Rng rng(7);
  PreferenceDataset data;
  std::vector<PreferenceSample> batch;
  for (int i = 0; i < 4; ++i) {
    batch.push_back(GenerateOnlineSample(mdp, uniform, uniform, 2, LabelMode::kForced,
                                         nullptr, rng));
  }
  data = Append(data, {});
  EXPECT_EQ(data.size(), 0u);
  data = Append(std::move(data), batch);
  EXPECT_EQ(data.size(), 4u);
  data = Append(std::move(data), std::span(batch).subspan(0, 2));
  EXPECT_EQ(data.size(), 6u);
  batch[0].iteration = 1;
  try {
    data = Append(std::move(data), std::span(batch).subspan(0, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIterationOrderViolation);
  }
}

TEST(RecordsTest, RoundTripIsBitExact) {
  TokenMdp mdp(SmallSpec(3, 3, 0.8));
  Rng rng(8);
  const auto teacher = RandomSoftmax(mdp, 1.0, rng);
  const LinearReward rstar{RandomVector(8, 2.0, rng), 2.0};
  PreferenceDataset data = GenerateOffline(mdp, teacher, teacher, rstar, 30, rng);
  for (int t = 0; t < 3; ++t) {
    data.Add(GenerateOnlineSample(mdp, teacher, teacher, t,
                                  t == 1 ? LabelMode::kOracle : LabelMode::kForced, &rstar,
                                  rng));
  }
  std::stringstream ss;
  WriteRecords(ss, data);
  const PreferenceDataset back = ReadRecords(ss, mdp);
  ASSERT_EQ(back.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& a = data[i];
    const auto& b = back[i];
    ASSERT_EQ(a.label, b.label);
    ASSERT_EQ(a.prompt, b.prompt);
    ASSERT_EQ(a.traj0.actions, b.traj0.actions);
    ASSERT_EQ(a.traj1.actions, b.traj1.actions);
    ASSERT_EQ(a.traj0.features, b.traj0.features);
    ASSERT_EQ(a.traj1.features, b.traj1.features);
    ASSERT_EQ(a.provenance, b.provenance);
    ASSERT_EQ(a.iteration, b.iteration);
    ASSERT_EQ(a.seed, b.seed);
  }
}

}  // namespace
}  // namespace pbkd
