#ifndef PBKD_TESTS_TEST_UTIL_H_
#define PBKD_TESTS_TEST_UTIL_H_

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/evaluation.h"
#include "pbkd/mdp.h"
#include "pbkd/policy.h"
#include "pbkd/rng.h"

namespace pbkd::testing {

inline MdpSpec SmallSpec(int V, int H, double gamma, int d = 8, int prompts = 2,
                         std::uint64_t seed = 1) {
  MdpSpec spec;
  spec.vocab_size = V;
  spec.horizon = H;
  spec.gamma = gamma;
  spec.feature_dim = d;
  spec.prompt_count = prompts;
  spec.feature_seed = seed;
  return spec;
}

inline Eigen::VectorXd RandomVector(int d, double norm, Rng& rng) {
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.Normal();
  return v * (norm / v.norm());
}

inline SoftmaxLinearPolicy RandomSoftmax(const TokenMdp& mdp, double scale,
                                         Rng& rng) {
  SoftmaxLinearPolicy p(mdp);
  auto& w = p.mutable_weights();
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = scale * rng.Normal();
  }
  return p;
}

// Probability of a full trajectory as a product of per-step probabilities.
inline double TrajectoryProb(const TokenMdp& mdp, const Policy& policy,
                             const Trajectory& t) {
  double p = 1.0;
  std::span<const int> a(t.actions);
  for (int h = 0; h < mdp.horizon(); ++h) {
    p *= policy.ActionDistribution(mdp, t.prompt, a.subspan(0, h))[a[h]];
  }
  return p;
}

// Brute-force E_{x~d0} E_{tau~pi} g(tau) over all enumerated trajectories.
template <typename F>
auto BruteExpectation(const TokenMdp& mdp, const Policy& policy, F g) {
  using R = decltype(g(std::declval<const Trajectory&>()));
  R total{};
  bool first = true;
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    for (const Trajectory& t : EnumerateTrajectories(mdp, x)) {
      const double w = mdp.prompt_distribution()[x] * TrajectoryProb(mdp, policy, t);
      if (first) {
        total = w * g(t);
        first = false;
      } else {
        total = total + w * g(t);
      }
    }
  }
  return total;
}

inline double BruteValue(const TokenMdp& mdp, const Policy& policy,
                         const Eigen::VectorXd& theta) {
  return BruteExpectation(mdp, policy,
                          [&](const Trajectory& t) { return theta.dot(t.features); });
}

}  // namespace pbkd::testing

#endif  // PBKD_TESTS_TEST_UTIL_H_
