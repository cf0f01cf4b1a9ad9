#ifndef PBKD_EVALUATION_H_
#define PBKD_EVALUATION_H_

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/mdp.h"
#include "pbkd/policy.h"
#include "pbkd/rng.h"

namespace pbkd {

enum class ValueMode { kExact, kMonteCarlo };

// Undiscounted per-step reward c(prompt, prefix, action). Discounting by
// gamma^h is applied by the callers below.
using StepRewardFn =
    std::function<double(int prompt, std::span<const int> prefix, int action)>;

// c(s, a) = theta^T psi(s, a).
StepRewardFn LinearStepReward(const TokenMdp& mdp, const Eigen::VectorXd& theta);

// Reconstructs the prefix of depth `h` whose base-V value is `code`.
std::vector<int> DecodePrefix(const TokenMdp& mdp, int h, std::int64_t code);

// Action distributions of `policy` at every state of `prompt`, indexed by
// the per-prompt node index (LevelOffset(h) + code).
std::vector<Eigen::VectorXd> PolicyTable(const TokenMdp& mdp,
                                         const Policy& policy, int prompt);

// Probability of reaching each per-prompt node under `policy`.
std::vector<double> ReachProbabilities(
    const TokenMdp& mdp, const std::vector<Eigen::VectorXd>& policy_table);

// J(pi, r_theta) = E_{x~d0} E_{tau~pi|x} theta^T phi(x, tau), by enumerating
// all V^H trajectories. Throws kCapExceeded.
double ExactValue(const TokenMdp& mdp, const Policy& policy,
                  const Eigen::VectorXd& theta);

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
};

McEstimate McValue(const TokenMdp& mdp, const Policy& policy,
                   const Eigen::VectorXd& theta, int n_samples, Rng& rng);

// phi(d0, pi) from state occupancies (exact) or sampled rollouts.
Eigen::VectorXd FeatureExpectation(const TokenMdp& mdp, const Policy& policy);
Eigen::VectorXd FeatureExpectationForPrompt(const TokenMdp& mdp,
                                            const Policy& policy, int prompt);
Eigen::VectorXd FeatureExpectation(const TokenMdp& mdp, const Policy& policy,
                                   ValueMode mode, int n_samples, Rng& rng);

// Expected discounted sum of `step_features` (a vector per (s, a)) under
// `policy`, by state occupancy.
Eigen::VectorXd ExpectedStepFeatures(
    const TokenMdp& mdp, const Policy& policy,
    const std::function<Eigen::VectorXd(int, std::span<const int>, int)>&
        step_features,
    int dim);

// Gradient w.r.t. the policy weights of E_pi sum_h gamma^h c(s_h, a_h),
// computed exactly from occupancies and Q-values on the prefix tree.
Eigen::MatrixXd ExactPolicyGradient(const TokenMdp& mdp,
                                    const SoftmaxLinearPolicy& policy,
                                    const StepRewardFn& step_reward);
Eigen::MatrixXd ExactPolicyGradient(const TokenMdp& mdp,
                                    const SoftmaxLinearPolicy& policy,
                                    const Eigen::VectorXd& theta);

// Natural-gradient direction for the tabular-context softmax class: the
// advantage Q(s, a) - V(s) of every state, without the occupancy weights
// that make plain gradients stall on rarely visited states. Rows shared by
// several prefixes accumulate their advantages weighted by prompt
// probability.
Eigen::MatrixXd ExactNaturalGradient(const TokenMdp& mdp,
                                     const SoftmaxLinearPolicy& policy,
                                     const StepRewardFn& step_reward);

// R_i minus the mean of the other returns; the leave-one-out mean keeps the
// baselined score-function estimate unbiased. Identity without `baseline`
// or with fewer than two returns.
std::vector<double> LeaveOneOutCentered(std::span<const double> returns,
                                        bool baseline);

// Likelihood-ratio estimate (1/n) sum_i (R_i - b_i) grad log pi(tau_i), with
// b_i the leave-one-out batch mean when `baseline` is set.
Eigen::MatrixXd ScoreFunctionGradient(const TokenMdp& mdp,
                                      const SoftmaxLinearPolicy& policy,
                                      std::span<const Trajectory> batch,
                                      std::span<const double> returns,
                                      bool baseline);

// Optimal state-action values sum of gamma^h theta^T psi along the remaining
// path, indexed [prompt][node][action].
std::vector<std::vector<Eigen::VectorXd>> OptimalQValues(
    const TokenMdp& mdp, const Eigen::VectorXd& theta);

// Deterministic backward-induction optimum; ties go to the smallest action.
TabularPolicy DpOptimalPolicy(const TokenMdp& mdp,
                              const Eigen::VectorXd& theta);

// Softmax over the optimal Q-values at `temperature` (> 0).
TabularPolicy SoftenedOptimalPolicy(const TokenMdp& mdp,
                                    const Eigen::VectorXd& theta,
                                    double temperature);

}  // namespace pbkd

#endif  // PBKD_EVALUATION_H_
