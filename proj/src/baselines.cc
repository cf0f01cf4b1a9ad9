#include "pbkd/baselines.h"

#include <cmath>

#include "pbkd/error.h"
#include "pbkd/reward_model.h"

namespace pbkd {
namespace {

double MeanNegLogLik(const TokenMdp& mdp, std::span<const Trajectory> data,
                     const SoftmaxLinearPolicy& policy) {
  double total = 0.0;
  for (const Trajectory& t : data) total -= policy.LogProb(mdp, t);
  return total / static_cast<double>(data.size());
}

}  // namespace

Eigen::MatrixXd BehaviorCloningGradient(const TokenMdp& mdp,
                                        std::span<const Trajectory> data,
                                        const SoftmaxLinearPolicy& policy) {
  Eigen::MatrixXd grad =
      Eigen::MatrixXd::Zero(policy.weights().rows(), policy.weights().cols());
  if (data.empty()) return grad;
  const double scale = 1.0 / static_cast<double>(data.size());
  for (const Trajectory& t : data) {
    policy.AccumulateGradLogProb(mdp, t, scale, grad);
  }
  return grad;
}

BcResult BehaviorCloningFit(const TokenMdp& mdp,
                            std::span<const Trajectory> teacher_trajectories,
                            const SoftmaxLinearPolicy& init,
                            const BcOptions& options) {
  if (teacher_trajectories.empty()) {
    Fail(ErrorCode::kEmptyDataset, "behavior cloning needs trajectories");
  }
  BcResult result{init, {}};
  double loss = MeanNegLogLik(mdp, teacher_trajectories, result.policy);
  CheckFinite(loss, "behavior cloning loss");
  result.losses.push_back(loss);
  double step = options.initial_step;
  for (int epoch = 0; epoch < options.max_epochs; ++epoch) {
    const Eigen::MatrixXd grad =
        BehaviorCloningGradient(mdp, teacher_trajectories, result.policy);
    const double grad_sq = grad.squaredNorm();
    if (grad_sq == 0.0) {
      result.losses.push_back(loss);
      break;
    }
    bool accepted = false;
    double next_loss = loss;
    for (int tries = 0; tries < 60; ++tries) {
      SoftmaxLinearPolicy candidate = result.policy;
      candidate.mutable_weights() += step * grad;
      next_loss = MeanNegLogLik(mdp, teacher_trajectories, candidate);
      // Armijo condition on the ascent direction.
      if (std::isfinite(next_loss) &&
          next_loss <= loss - 1e-4 * step * grad_sq) {
        result.policy = std::move(candidate);
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      result.losses.push_back(loss);
      break;
    }
    const double decrease = loss - next_loss;
    loss = next_loss;
    result.losses.push_back(loss);
    step *= 2.0;
    if (decrease < options.tolerance) break;
  }
  return result;
}

Trajectory BestOfN(const TokenMdp& mdp, const Policy& policy,
                   const LinearReward& reward_model, int prompt, int n,
                   Rng& rng) {
  if (n < 1) Fail(ErrorCode::kConfigInvalid, "best-of-n needs n >= 1");
  Trajectory best = Rollout(mdp, policy, prompt, rng);
  double best_score = TrajReward(reward_model, best);
  for (int i = 1; i < n; ++i) {
    Trajectory candidate = Rollout(mdp, policy, prompt, rng);
    const double score = TrajReward(reward_model, candidate);
    if (score > best_score) {
      best_score = score;
      best = std::move(candidate);
    }
  }
  return best;
}

}  // namespace pbkd
