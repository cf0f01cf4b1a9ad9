#ifndef PBKD_FEATURE_MODEL_H_
#define PBKD_FEATURE_MODEL_H_

#include <Eigen/Dense>

#include "pbkd/evaluation.h"
#include "pbkd/mdp.h"
#include "pbkd/policy.h"

namespace pbkd {

// The two per-step feature maps a solver needs for a reward class linear in
// its parameter w:
//   pref(s, a): trajectory reward w^T sum_h gamma^h pref(s_h, a_h), which is
//               what the preference likelihood sees;
//   gap(s, a):  the teacher-minus-student gap is
//               w^T (E_teacher - E_student) sum_h gamma^h gap(s_h, a_h).
// For a plain linear reward both are the mdp's psi. Moment matching swaps in
// Bellman-residual features of a Q-function class.
struct FeatureModel {
  int dim = 0;
  StepFeatureFn pref;
  StepFeatureFn gap;
  // Both maps equal the mdp's own step features; trajectories can then use
  // their cached features directly.
  bool uses_mdp_features = false;
};

FeatureModel LinearFeatureModel(const TokenMdp& mdp);

// sum_h gamma^h f(s_h, a_h) along `traj`.
Eigen::VectorXd PathFeatures(const TokenMdp& mdp, const StepFeatureFn& f,
                             int dim, const Trajectory& traj);
Eigen::VectorXd PrefFeatures(const TokenMdp& mdp, const FeatureModel& model,
                             const Trajectory& traj);
Eigen::VectorXd GapFeatures(const TokenMdp& mdp, const FeatureModel& model,
                            const Trajectory& traj);

// E_{x~d0} E_{tau~policy} sum_h gamma^h gap(s_h, a_h), exact or sampled.
Eigen::VectorXd ExpectedGapFeatures(const TokenMdp& mdp,
                                    const FeatureModel& model,
                                    const Policy& policy, ValueMode mode,
                                    int n_samples, Rng& rng);

// Softmax-linear policy whose logits are log(max(p, floor)) of a tabular
// policy. Exact (up to the floor) when the policy's context covers the whole
// prefix, i.e. context_len >= H - 1; throws kConfigInvalid otherwise.
SoftmaxLinearPolicy SoftmaxFromTabular(const TokenMdp& mdp,
                                       const TabularPolicy& tabular,
                                       double floor = 1e-30);

}  // namespace pbkd

#endif  // PBKD_FEATURE_MODEL_H_
