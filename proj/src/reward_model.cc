#include "pbkd/reward_model.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "pbkd/error.h"

namespace pbkd {
namespace {

void CheckDim(const Eigen::VectorXd& theta, Eigen::Index dim) {
  if (theta.size() != dim) {
    Fail(ErrorCode::kDimensionMismatch,
         "reward dimension " + std::to_string(theta.size()) + " != " +
             std::to_string(dim));
  }
}

double ClampGap(double gap) { return std::clamp(gap, -kGapClamp, kGapClamp); }

// d/dz log sigmoid(z) with the clamp applied: zero outside the clamp range.
double LogSigmoidSlope(double z) {
  if (z < -kGapClamp || z > kGapClamp) return 0.0;
  return Sigmoid(-z);
}

}  // namespace

Eigen::VectorXd ProjectToBall(const Eigen::VectorXd& v, double radius) {
  const double norm = v.norm();
  if (norm <= radius) return v;
  return v * (radius / norm);
}

LinearReward MakeLinearReward(Eigen::VectorXd theta, double bound) {
  if (!(bound > 0.0)) Fail(ErrorCode::kConfigInvalid, "reward bound must be > 0");
  return LinearReward{ProjectToBall(theta, bound), bound};
}

double TrajReward(const LinearReward& rm, const Trajectory& traj) {
  CheckDim(rm.theta, traj.features.size());
  return rm.theta.dot(traj.features);
}

double StepwiseTrajReward(const LinearReward& rm, const TokenMdp& mdp,
                          const Trajectory& traj) {
  CheckDim(rm.theta, mdp.feature_dim());
  std::span<const int> actions(traj.actions);
  if (static_cast<int>(actions.size()) != mdp.horizon()) {
    Fail(ErrorCode::kMalformedTrajectory, "trajectory length != horizon");
  }
  double total = 0.0;
  for (int h = 0; h < mdp.horizon(); ++h) {
    total += mdp.Discount(h) *
             rm.theta.dot(mdp.StepFeatures(traj.prompt, actions.subspan(0, h),
                                           actions[h]));
  }
  return total;
}

double Sigmoid(double gap) {
  const double z = ClampGap(gap);
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double LogSigmoid(double gap) {
  const double z = ClampGap(gap);
  if (z >= 0.0) return -std::log1p(std::exp(-z));
  return z - std::log1p(std::exp(z));
}

double BtlProb(const LinearReward& rm, const Trajectory& traj0,
               const Trajectory& traj1) {
  return Sigmoid(TrajReward(rm, traj0) - TrajReward(rm, traj1));
}

PreferenceMatrix BuildPreferenceMatrix(const PreferenceDataset& dataset) {
  if (dataset.empty()) {
    Fail(ErrorCode::kEmptyDataset, "preference dataset is empty");
  }
  const Eigen::Index d = dataset[0].traj0.features.size();
  PreferenceMatrix m;
  m.diffs.resize(static_cast<Eigen::Index>(dataset.size()), d);
  m.signs.resize(static_cast<Eigen::Index>(dataset.size()));
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    const PreferenceSample& s = dataset[n];
    const auto i = static_cast<Eigen::Index>(n);
    m.diffs.row(i) = (s.traj0.features - s.traj1.features).transpose();
    m.signs[i] = s.label == 1 ? 1.0 : -1.0;
  }
  return m;
}

PreferenceMatrix BuildPreferenceMatrix(const PreferenceDataset& dataset,
                                       const TrajectoryFeatureFn& features,
                                       int dim) {
  if (dataset.empty()) {
    Fail(ErrorCode::kEmptyDataset, "preference dataset is empty");
  }
  PreferenceMatrix m;
  m.diffs.resize(static_cast<Eigen::Index>(dataset.size()), dim);
  m.signs.resize(static_cast<Eigen::Index>(dataset.size()));
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    const PreferenceSample& s = dataset[n];
    const auto i = static_cast<Eigen::Index>(n);
    const Eigen::VectorXd diff = features(s.traj0) - features(s.traj1);
    CheckDim(diff, dim);
    m.diffs.row(i) = diff.transpose();
    m.signs[i] = s.label == 1 ? 1.0 : -1.0;
  }
  return m;
}

double LogLik(const Eigen::VectorXd& theta, const PreferenceMatrix& data) {
  if (data.size() == 0) {
    Fail(ErrorCode::kEmptyDataset, "preference dataset is empty");
  }
  CheckDim(theta, data.dim());
  const Eigen::VectorXd z = data.signs.cwiseProduct(data.diffs * theta);
  return z.unaryExpr([](double v) { return LogSigmoid(v); }).sum();
}

Eigen::VectorXd LogLikGradient(const Eigen::VectorXd& theta,
                               const PreferenceMatrix& data) {
  CheckDim(theta, data.dim());
  const Eigen::VectorXd z = data.signs.cwiseProduct(data.diffs * theta);
  Eigen::VectorXd coeff(z.size());
  for (Eigen::Index n = 0; n < z.size(); ++n) {
    coeff[n] = data.signs[n] * LogSigmoidSlope(z[n]);
  }
  return data.diffs.transpose() * coeff;
}

double LogLik(const LinearReward& rm, const PreferenceDataset& dataset) {
  return LogLik(rm.theta, BuildPreferenceMatrix(dataset));
}

double RelativeLoss(const LinearReward& rm, const LinearReward& rstar,
                    const PreferenceSample& sample) {
  const double sign = sample.label == 1 ? 1.0 : -1.0;
  const double gap_r = TrajReward(rm, sample.traj0) - TrajReward(rm, sample.traj1);
  const double gap_star =
      TrajReward(rstar, sample.traj0) - TrajReward(rstar, sample.traj1);
  // The clamp keeps P_{r*}(o) > 0, so the zero-probability branch never
  // triggers in floating point.
  return 0.5 * (LogSigmoid(sign * gap_r) - LogSigmoid(sign * gap_star));
}

MleFit FitMle(const PreferenceMatrix& data, double bound,
              const MleOptions& options) {
  if (data.size() == 0) {
    Fail(ErrorCode::kEmptyDataset, "preference dataset is empty");
  }
  if (!(bound > 0.0)) Fail(ErrorCode::kConfigInvalid, "reward bound must be > 0");
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(data.dim());
  double value = LogLik(theta, data);
  CheckFinite(value, "mle log-likelihood");
  MleFit fit;
  fit.history.push_back(value);

  // Start from the inverse of a curvature bound: the Hessian of the negative
  // log-likelihood is dominated by diffs^T diffs / 4.
  double step = options.initial_step;
  const double curvature = 0.25 * data.diffs.squaredNorm();
  if (curvature > 0.0) step = std::min(step, 1.0 / curvature);

  const double n = static_cast<double>(data.size());
  int it = 0;
  for (; it < options.max_iterations; ++it) {
    const Eigen::VectorXd grad = LogLikGradient(theta, data);
    bool accepted = false;
    Eigen::VectorXd next;
    double next_value = value;
    for (int tries = 0; tries < 60; ++tries) {
      next = ProjectToBall(theta + step * grad, bound);
      next_value = LogLik(next, data);
      CheckFinite(next_value, "mle log-likelihood");
      // Sufficient increase for projected gradient steps.
      if (next_value >= value + (0.5 / step) * (next - theta).squaredNorm() -
                            1e-12 * std::abs(value) ||
          (next - theta).squaredNorm() == 0.0) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    const double mapping_norm = (next - theta).norm() / step;
    // No strict increase means the remaining progress is below the rounding
    // noise of the summed objective.
    if (!(next_value > value)) break;
    theta = std::move(next);
    value = next_value;
    fit.history.push_back(value);
    // The tolerance applies to the per-record average objective, so it
    // stays meaningful for sums over tens of thousands of records.
    if (mapping_norm <= options.gradient_tolerance * n) break;
    step *= 2.0;
  }
  fit.reward = LinearReward{theta, bound};
  fit.loglik = value;
  fit.iterations = it;
  return fit;
}

MleFit FitMle(const PreferenceDataset& dataset, const TokenMdp& mdp,
              double bound, const MleOptions& options) {
  if (dataset.empty()) {
    Fail(ErrorCode::kEmptyDataset, "preference dataset is empty");
  }
  if (dataset[0].traj0.features.size() != mdp.feature_dim()) {
    Fail(ErrorCode::kDimensionMismatch, "dataset features do not match mdp");
  }
  return FitMle(BuildPreferenceMatrix(dataset), bound, options);
}

bool InConfidenceSet(const Eigen::VectorXd& theta, const PreferenceMatrix& data,
                     double zeta, double max_loglik) {
  return LogLik(theta, data) >= max_loglik - zeta;
}

bool InConfidenceSet(const LinearReward& rm, const PreferenceDataset& dataset,
                     double zeta, double max_loglik) {
  return InConfidenceSet(rm.theta, BuildPreferenceMatrix(dataset), zeta,
                         max_loglik);
}

double OfflineZeta(double c, int d, double bound, std::size_t n) {
  const double nn = static_cast<double>(n);
  return c * std::sqrt(d * std::log(std::max(bound * nn, 1.0 + 1e-12)) / nn) * nn;
}

double OnlineZeta(double c, int d, double bound, int t, double delta) {
  const double tt = std::max(t, 2);
  return c * (d * std::log(std::max(bound * tt, 1.0)) + std::log(1.0 / delta));
}

}  // namespace pbkd
