#ifndef PBKD_OFFLINE_H_
#define PBKD_OFFLINE_H_

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/evaluation.h"
#include "pbkd/feature_model.h"
#include "pbkd/mdp.h"
#include "pbkd/policy.h"
#include "pbkd/preference_data.h"
#include "pbkd/reward_model.h"

namespace pbkd {

// Plain (score-function or exact) gradient, or the exact natural gradient,
// which preconditions by state occupancy. Natural steps need exact mode.
enum class PolicyUpdate { kGradient, kNatural };

struct OfflineConfig {
  // Lagrange multiplier on the log-likelihood penalty.
  double beta = 1.0;
  int reward_steps = 25;
  int policy_steps = 5;
  int rounds = 200;
  // Initial step of the backtracking reward ascent.
  double reward_lr = 1.0;
  double policy_lr = 1.0;
  ValueMode mode = ValueMode::kExact;
  // Rollouts per estimate in Monte-Carlo mode.
  int mc_samples = 256;
  bool baseline = true;
  PolicyUpdate policy_update = PolicyUpdate::kGradient;
  // Norm bound B of the reward class.
  double bound = 1.0;
  std::uint64_t seed = 0;
};

// Throws kConfigInvalid naming the offending field.
void ValidateOfflineConfig(const OfflineConfig& config);

// J(teacher, r) - J(student, r) = theta^T (phi(d0, teacher) - phi(d0, student)).
double Gap(const TokenMdp& mdp, const Policy& teacher, const Policy& student,
           const LinearReward& rm);

// theta^T gap_direction + beta * loglik(theta; data) and its gradient.
double InnerObjective(const Eigen::VectorXd& theta,
                      const Eigen::VectorXd& gap_direction,
                      const PreferenceMatrix* data, double beta);
Eigen::VectorXd InnerGradient(const Eigen::VectorXd& theta,
                              const Eigen::VectorXd& gap_direction,
                              const PreferenceMatrix* data, double beta);

struct InnerResult {
  Eigen::VectorXd theta;
  // Objective before the first step and after every step; non-decreasing.
  std::vector<double> objective;
  // Last accepted step length, reusable as the next starting step.
  double step = 0.0;
};

// Projected ascent with backtracking on
//   theta^T gap_direction + beta * loglik(theta; data)
// over the ball of radius `bound`. `data` may be null when beta == 0.
InnerResult MaximizeInner(const Eigen::VectorXd& theta0,
                          const Eigen::VectorXd& gap_direction,
                          const PreferenceMatrix* data, double beta,
                          double bound, int steps, double initial_step);

struct SolverTraceRow {
  int round = 0;
  // theta^T gap_direction after the inner maximization.
  double gap = 0.0;
  double loglik = 0.0;
  double theta_norm = 0.0;
  // NaN when no oracle reward was supplied.
  double j_student_rstar = 0.0;
  double inner_start = 0.0;
  double inner_end = 0.0;
};

struct SolverResult {
  SoftmaxLinearPolicy policy;
  Eigen::VectorXd theta;
  std::vector<SolverTraceRow> trace;
};

// Alternating solver for min_pi max_theta  gap(pi, theta) + beta * L(theta)
// over a generic feature model; `data` holds preference-feature differences.
SolverResult SolveOfflineGeneric(const TokenMdp& mdp, const Policy& teacher,
                                 const FeatureModel& model,
                                 const PreferenceMatrix& data,
                                 const SoftmaxLinearPolicy& init,
                                 const OfflineConfig& config,
                                 const Eigen::VectorXd* rstar = nullptr);

// Offline PbKD with a linear reward. Throws kEmptyDataset, kNonFinite.
SolverResult SolveOffline(const TokenMdp& mdp, const Policy& teacher,
                          const PreferenceDataset& dataset,
                          const SoftmaxLinearPolicy& init,
                          const OfflineConfig& config,
                          const Eigen::VectorXd* rstar = nullptr);

// One policy ascent step on E_pi sum_h gamma^h c(s_h, a_h) with
// c = w^T gap(s, a): exact gradient or score function over fresh rollouts.
void PolicyAscentStep(const TokenMdp& mdp, const FeatureModel& model,
                      const Eigen::VectorXd& w, double lr, ValueMode mode,
                      PolicyUpdate update, int n_samples, bool baseline,
                      Rng& rng, SoftmaxLinearPolicy& policy);

}  // namespace pbkd

#endif  // PBKD_OFFLINE_H_
