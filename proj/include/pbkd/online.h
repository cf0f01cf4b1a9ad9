#ifndef PBKD_ONLINE_H_
#define PBKD_ONLINE_H_

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/evaluation.h"
#include "pbkd/feature_model.h"
#include "pbkd/mdp.h"
#include "pbkd/offline.h"
#include "pbkd/policy.h"
#include "pbkd/preference_data.h"
#include "pbkd/reward_model.h"

namespace pbkd {

enum class LrSchedule { kConstant, kInvSqrt };

struct OnlineConfig {
  int iterations = 50;
  // Preference pairs labeled and appended to D_t per iteration.
  int pref_batch = 32;
  // Teacher/student pairs drawn for the optimization steps (MC mode).
  int opt_batch = 64;
  double beta = 1.0;
  double clip = 0.2;
  // Weight of the uncertainty step relative to the policy learning rate.
  double alpha = 0.1;
  int reward_steps = 5;
  int policy_steps = 5;
  // Initial step of the backtracking reward ascent.
  double reward_lr = 1.0;
  double policy_lr = 1.0;
  LrSchedule lr_schedule = LrSchedule::kConstant;
  ValueMode mode = ValueMode::kExact;
  bool baseline = true;
  LabelMode labeling = LabelMode::kOracle;
  double ridge = 1e-2;
  double bound = 1.0;
  // 0 evaluates the likelihood on all of D_t; otherwise on a random subset of
  // this size, rescaled to the full count.
  int loglik_batch = 0;
  // Keep a policy snapshot every this many iterations (0: none).
  int snapshot_every = 0;
  std::uint64_t seed = 0;
};

// Throws kConfigInvalid naming the offending field.
void ValidateOnlineConfig(const OnlineConfig& config);

// Learning rate of iteration t >= 1.
double PolicyLr(const OnlineConfig& config, int t);

// One reward step: a single backtracking projected ascent step on
//   theta^T pair_direction + beta * loglik(theta; data),
// where pair_direction = sum_m (f(tau0_m) - f(tau1_m)).
struct RewardStepResult {
  Eigen::VectorXd theta;
  double before = 0.0;
  double after = 0.0;
  // Suggested starting step for the next call.
  double step = 0.0;
};
RewardStepResult RewardStep(const Eigen::VectorXd& theta,
                            const Eigen::VectorXd& pair_direction,
                            const PreferenceMatrix* data, double beta,
                            double bound, double lr);

// Weighted trajectories with frozen snapshot log-probabilities and
// advantages. Monte-Carlo batches weigh each sample 1/M; exact batches
// enumerate every trajectory with weight d0(x) pi_old(tau | x).
struct ClippedBatch {
  std::vector<Trajectory> trajectories;
  std::vector<double> weights;
  std::vector<double> old_log_probs;
  std::vector<double> advantages;
};

// Advantages are `returns`, leave-one-out centered when `baseline` is set.
ClippedBatch MakeClippedBatch(const TokenMdp& mdp,
                              const SoftmaxLinearPolicy& snapshot,
                              std::vector<Trajectory> trajectories,
                              std::vector<double> weights,
                              std::span<const double> returns, bool baseline);

// sum_i w_i min(rho_i A_i, clip(rho_i, 1 - eps, 1 + eps) A_i) with
// rho_i = pi(tau_i) / pi_old(tau_i).
double ClippedSurrogate(const TokenMdp& mdp, const SoftmaxLinearPolicy& policy,
                        const ClippedBatch& batch, double clip);
// Samples on the clipped branch contribute nothing.
Eigen::MatrixXd ClippedSurrogateGradient(const TokenMdp& mdp,
                                         const SoftmaxLinearPolicy& policy,
                                         const ClippedBatch& batch,
                                         double clip);
void PolicyClippedStep(const TokenMdp& mdp, const ClippedBatch& batch,
                       double clip, double lr, SoftmaxLinearPolicy& policy);

// Sigma = ridge I + sum over past iterations of the batch-mean outer product
// of preference-feature differences.
class CovarianceAccumulator {
 public:
  CovarianceAccumulator(int dim, double ridge);

  // Rows of `diffs` are one iteration's differences. An empty batch is a no-op.
  void Update(const Eigen::MatrixXd& diffs);
  const Eigen::MatrixXd& sigma() const { return sigma_; }
  double ridge() const { return ridge_; }
  double LogDet() const;
  // Sigma^{-1} v.
  Eigen::VectorXd Solve(const Eigen::VectorXd& v) const;

 private:
  double ridge_;
  Eigen::MatrixXd sigma_;
};

// One ascent step of size alpha * lr on ||E_pi f - E_teacher f||^2 in the
// Sigma^{-1} norm, f being the model's gap features. The gradient is
// 2 (E_pi f - E_teacher f)^T Sigma^{-1} d/dpi E_pi f, taken exactly or by
// the score function over `n_samples` fresh rollouts. Returns the objective
// before the step.
double UncertaintyStep(const TokenMdp& mdp, const FeatureModel& model,
                       const Eigen::VectorXd& teacher_features,
                       const CovarianceAccumulator& sigma, double alpha,
                       double lr, ValueMode mode, int n_samples, Rng& rng,
                       SoftmaxLinearPolicy& policy);

struct OnlineTraceRow {
  int t = 0;
  int n_t = 0;
  // NaN columns below when no oracle reward was supplied.
  double j_student_rstar = 0.0;
  double j_teacher_rstar = 0.0;
  double gap_estimate = 0.0;
  double loglik = 0.0;
  double theta_norm = 0.0;
  double sigma_logdet = 0.0;
  double regret_cumulative = 0.0;
};

struct PolicySnapshot {
  int t = 0;
  SoftmaxLinearPolicy policy;
};

struct OnlineResult {
  SoftmaxLinearPolicy policy;
  Eigen::VectorXd theta;
  std::vector<OnlineTraceRow> trace;
  PreferenceDataset dataset;
  std::vector<PolicySnapshot> snapshots;
  Eigen::MatrixXd sigma;
};

// Optional starting point: earlier (e.g. offline) preference data that seeds
// D_0 and Sigma, and a starting reward parameter.
struct OnlineWarmStart {
  const PreferenceDataset* data = nullptr;
  Eigen::VectorXd theta;
};

// Iterative preference collection with adversarial reward/policy updates.
// Per iteration: collect pref_batch labeled teacher/student pairs, take
// reward_steps reward steps, policy_steps clipped policy steps against the
// iteration's snapshot, one uncertainty step, then fold the new pairs into
// Sigma. Regret is measured against the DP optimum of `rstar`.
OnlineResult RunOnlineGeneric(const TokenMdp& mdp, const Policy& teacher,
                              const FeatureModel& model,
                              const SoftmaxLinearPolicy& init,
                              const OnlineConfig& config,
                              const LinearReward* rstar,
                              const OnlineWarmStart& warm = {});

OnlineResult RunOnline(const TokenMdp& mdp, const Policy& teacher,
                       const SoftmaxLinearPolicy& init,
                       const OnlineConfig& config, const LinearReward* rstar,
                       const OnlineWarmStart& warm = {});

}  // namespace pbkd

#endif  // PBKD_ONLINE_H_
