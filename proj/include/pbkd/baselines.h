#ifndef PBKD_BASELINES_H_
#define PBKD_BASELINES_H_

#include <span>
#include <vector>

#include "pbkd/mdp.h"
#include "pbkd/policy.h"
#include "pbkd/rng.h"

namespace pbkd {

struct LinearReward;

struct BcOptions {
  int max_epochs = 500;
  double initial_step = 1.0;
  // Stop once the loss decrease of an epoch falls below this.
  double tolerance = 1e-12;
};

struct BcResult {
  SoftmaxLinearPolicy policy;
  // Mean negative log-likelihood after each epoch; entry 0 is the initial
  // loss.
  std::vector<double> losses;
};

// Maximum-likelihood fit of the student on teacher trajectories: full-batch
// gradient ascent on the mean log-probability with backtracking, so the loss
// never increases. Throws kEmptyDataset.
BcResult BehaviorCloningFit(const TokenMdp& mdp,
                            std::span<const Trajectory> teacher_trajectories,
                            const SoftmaxLinearPolicy& init,
                            const BcOptions& options = {});

// Full-batch gradient of the mean log-probability.
Eigen::MatrixXd BehaviorCloningGradient(const TokenMdp& mdp,
                                        std::span<const Trajectory> data,
                                        const SoftmaxLinearPolicy& policy);

// Draws `n` rollouts and keeps the one with the highest reward-model score;
// the earliest sample wins ties.
Trajectory BestOfN(const TokenMdp& mdp, const Policy& policy,
                   const LinearReward& reward_model, int prompt, int n,
                   Rng& rng);

}  // namespace pbkd

#endif  // PBKD_BASELINES_H_
