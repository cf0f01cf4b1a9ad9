#ifndef PBKD_REWARD_MODEL_H_
#define PBKD_REWARD_MODEL_H_

#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/mdp.h"
#include "pbkd/preference_data.h"

namespace pbkd {

// r_theta(x, tau) = theta^T phi(x, tau) with ||theta|| <= bound.
struct LinearReward {
  Eigen::VectorXd theta;
  double bound = 1.0;
};

// Euclidean projection onto the ball of radius `radius`.
Eigen::VectorXd ProjectToBall(const Eigen::VectorXd& v, double radius);

// Projects theta into the ball, so the invariant holds on construction.
LinearReward MakeLinearReward(Eigen::VectorXd theta, double bound);

double TrajReward(const LinearReward& rm, const Trajectory& traj);
// Same value recomputed step by step from the mdp's step features.
double StepwiseTrajReward(const LinearReward& rm, const TokenMdp& mdp,
                          const Trajectory& traj);

// Reward gaps are clamped to [-kGapClamp, kGapClamp] before the sigmoid.
inline constexpr double kGapClamp = 30.0;

double Sigmoid(double gap);
// log sigmoid(gap), stable for large |gap|.
double LogSigmoid(double gap);

// P(traj0 > traj1 | x) = sigmoid(r(traj0) - r(traj1)).
double BtlProb(const LinearReward& rm, const Trajectory& traj0,
               const Trajectory& traj1);

// Preference data in matrix form: row n holds a(traj0_n) - a(traj1_n) and
// sign_n = +1 for label 1, -1 for label 0, so that
// log P(o_n) = log sigmoid(sign_n * theta^T row_n).
struct PreferenceMatrix {
  Eigen::MatrixXd diffs;
  Eigen::VectorXd signs;

  Eigen::Index size() const { return diffs.rows(); }
  Eigen::Index dim() const { return diffs.cols(); }
};

using TrajectoryFeatureFn = std::function<Eigen::VectorXd(const Trajectory&)>;

PreferenceMatrix BuildPreferenceMatrix(const PreferenceDataset& dataset);
PreferenceMatrix BuildPreferenceMatrix(const PreferenceDataset& dataset,
                                       const TrajectoryFeatureFn& features,
                                       int dim);

double LogLik(const Eigen::VectorXd& theta, const PreferenceMatrix& data);
Eigen::VectorXd LogLikGradient(const Eigen::VectorXd& theta,
                               const PreferenceMatrix& data);

// sum_n log P_r(o_n | x_n, traj0_n, traj1_n). Throws kEmptyDataset.
double LogLik(const LinearReward& rm, const PreferenceDataset& dataset);

// 1/2 log(P_r(o) / P_{r*}(o)); 0 when P_{r*}(o) = 0.
double RelativeLoss(const LinearReward& rm, const LinearReward& rstar,
                    const PreferenceSample& sample);

struct MleOptions {
  int max_iterations = 10'000;
  double gradient_tolerance = 1e-8;
  double initial_step = 1.0;
};

struct MleFit {
  LinearReward reward;
  double loglik = 0.0;
  int iterations = 0;
  // Objective after every accepted step; non-decreasing.
  std::vector<double> history;
};

// Projected gradient ascent on the log-likelihood with backtracking, from
// theta = 0. Converges when the projected-gradient step norm drops below the
// tolerance. Throws kEmptyDataset, kNonFinite.
MleFit FitMle(const PreferenceMatrix& data, double bound,
              const MleOptions& options = {});
MleFit FitMle(const PreferenceDataset& dataset, const TokenMdp& mdp,
              double bound, const MleOptions& options = {});

// loglik(rm) >= max_loglik - zeta (log-likelihood units).
bool InConfidenceSet(const LinearReward& rm, const PreferenceDataset& dataset,
                     double zeta, double max_loglik);
bool InConfidenceSet(const Eigen::VectorXd& theta, const PreferenceMatrix& data,
                     double zeta, double max_loglik);

// c * sqrt(d log(B N) / N) * N.
double OfflineZeta(double c, int d, double bound, std::size_t n);
// c * (d log(B max(t, 2)) + log(1 / delta)).
double OnlineZeta(double c, int d, double bound, int t, double delta);

}  // namespace pbkd

#endif  // PBKD_REWARD_MODEL_H_
