#include "pbkd/offline.h"

#include <cmath>
#include <limits>
#include <string>

#include "pbkd/error.h"

namespace pbkd {

double InnerObjective(const Eigen::VectorXd& theta, const Eigen::VectorXd& dir,
                      const PreferenceMatrix* data, double beta) {
  double value = theta.dot(dir);
  if (beta != 0.0) value += beta * LogLik(theta, *data);
  return value;
}

Eigen::VectorXd InnerGradient(const Eigen::VectorXd& theta,
                              const Eigen::VectorXd& dir,
                              const PreferenceMatrix* data, double beta) {
  Eigen::VectorXd grad = dir;
  if (beta != 0.0) grad += beta * LogLikGradient(theta, *data);
  return grad;
}

void ValidateOfflineConfig(const OfflineConfig& c) {
  auto invalid = [](const std::string& field, const std::string& why) {
    Fail(ErrorCode::kConfigInvalid, "offline." + field + ": " + why);
  };
  if (!(c.beta >= 0.0)) invalid("beta", "must be >= 0");
  if (c.reward_steps < 1) invalid("reward_steps", "must be >= 1");
  if (c.policy_steps < 1) invalid("policy_steps", "must be >= 1");
  if (c.rounds < 1) invalid("rounds", "must be >= 1");
  if (!(c.reward_lr > 0.0)) invalid("reward_lr", "must be > 0");
  if (!(c.policy_lr > 0.0)) invalid("policy_lr", "must be > 0");
  if (c.mc_samples < 1) invalid("mc_samples", "must be >= 1");
  if (!(c.bound > 0.0)) invalid("bound", "must be > 0");
  if (c.policy_update == PolicyUpdate::kNatural &&
      c.mode != ValueMode::kExact) {
    invalid("policy_update", "natural steps need exact mode");
  }
}

double Gap(const TokenMdp& mdp, const Policy& teacher, const Policy& student,
           const LinearReward& rm) {
  const Eigen::VectorXd diff =
      FeatureExpectation(mdp, teacher) - FeatureExpectation(mdp, student);
  if (rm.theta.size() != diff.size()) {
    Fail(ErrorCode::kDimensionMismatch, "reward dimension != feature dimension");
  }
  return rm.theta.dot(diff);
}

InnerResult MaximizeInner(const Eigen::VectorXd& theta0,
                          const Eigen::VectorXd& gap_direction,
                          const PreferenceMatrix* data, double beta,
                          double bound, int steps, double initial_step) {
  if (beta != 0.0 && data == nullptr) {
    Fail(ErrorCode::kEmptyDataset, "penalized objective needs data");
  }
  InnerResult out;
  out.theta = ProjectToBall(theta0, bound);
  double value = InnerObjective(out.theta, gap_direction, data, beta);
  CheckFinite(value, "inner objective");
  out.objective.push_back(value);
  double step = initial_step;
  for (int k = 0; k < steps; ++k) {
    const Eigen::VectorXd grad =
        InnerGradient(out.theta, gap_direction, data, beta);
    bool moved = false;
    for (int tries = 0; tries < 60; ++tries) {
      const Eigen::VectorXd next = ProjectToBall(out.theta + step * grad, bound);
      const double d2 = (next - out.theta).squaredNorm();
      if (d2 == 0.0) break;
      const double next_value = InnerObjective(next, gap_direction, data, beta);
      CheckFinite(next_value, "inner objective");
      if (next_value >= value + 0.5 / step * d2) {
        out.theta = next;
        value = next_value;
        moved = true;
        break;
      }
      step *= 0.5;
    }
    out.objective.push_back(value);
    if (moved) step *= 2.0;
  }
  out.step = step;
  return out;
}

void PolicyAscentStep(const TokenMdp& mdp, const FeatureModel& model,
                      const Eigen::VectorXd& w, double lr, ValueMode mode,
                      PolicyUpdate update, int n_samples, bool baseline,
                      Rng& rng, SoftmaxLinearPolicy& policy) {
  Eigen::MatrixXd grad;
  if (mode == ValueMode::kExact) {
    const StepFeatureFn& gap = model.gap;
    const StepRewardFn reward = [&gap, &w](int x, std::span<const int> s,
                                           int a) { return w.dot(gap(x, s, a)); };
    grad = update == PolicyUpdate::kNatural
               ? ExactNaturalGradient(mdp, policy, reward)
               : ExactPolicyGradient(mdp, policy, reward);
  } else {
    if (update == PolicyUpdate::kNatural) {
      Fail(ErrorCode::kConfigInvalid, "natural policy steps need exact mode");
    }
    std::vector<Trajectory> batch;
    std::vector<double> returns;
    batch.reserve(n_samples);
    returns.reserve(n_samples);
    for (int i = 0; i < n_samples; ++i) {
      const int x = mdp.SamplePrompt(rng);
      batch.push_back(Rollout(mdp, policy, x, rng));
      returns.push_back(w.dot(GapFeatures(mdp, model, batch.back())));
    }
    grad = ScoreFunctionGradient(mdp, policy, batch, returns, baseline);
  }
  CheckFinite(grad.squaredNorm(), "policy gradient");
  policy.mutable_weights() += lr * grad;
}

SolverResult SolveOfflineGeneric(const TokenMdp& mdp, const Policy& teacher,
                                 const FeatureModel& model,
                                 const PreferenceMatrix& data,
                                 const SoftmaxLinearPolicy& init,
                                 const OfflineConfig& config,
                                 const Eigen::VectorXd* rstar) {
  ValidateOfflineConfig(config);
  if (data.size() == 0) {
    Fail(ErrorCode::kEmptyDataset, "offline solver needs preference data");
  }
  if (data.dim() != model.dim) {
    Fail(ErrorCode::kDimensionMismatch, "data dimension != model dimension");
  }
  Rng estimate_rng(DeriveSeed(config.seed, "estimate"));
  Rng policy_rng(DeriveSeed(config.seed, "policy"));

  SolverResult result{init, Eigen::VectorXd::Zero(model.dim), {}};
  // The teacher is fixed, so its exact feature expectation is reused.
  std::optional<Eigen::VectorXd> teacher_exact;
  if (config.mode == ValueMode::kExact) {
    teacher_exact = ExpectedGapFeatures(mdp, model, teacher, ValueMode::kExact,
                                        1, estimate_rng);
  }
  double step = config.reward_lr;
  for (int round = 0; round < config.rounds; ++round) {
    const Eigen::VectorXd teacher_phi =
        teacher_exact ? *teacher_exact
                      : ExpectedGapFeatures(mdp, model, teacher, config.mode,
                                            config.mc_samples, estimate_rng);
    const Eigen::VectorXd direction =
        teacher_phi - ExpectedGapFeatures(mdp, model, result.policy,
                                          config.mode, config.mc_samples,
                                          estimate_rng);
    const InnerResult inner =
        MaximizeInner(result.theta, direction, &data, config.beta,
                      config.bound, config.reward_steps, step);
    result.theta = inner.theta;
    // Restart each round no larger than the configured step.
    step = std::min(inner.step, config.reward_lr);

    for (int k = 0; k < config.policy_steps; ++k) {
      PolicyAscentStep(mdp, model, result.theta, config.policy_lr, config.mode,
                       config.policy_update, config.mc_samples, config.baseline,
                       policy_rng, result.policy);
    }

    SolverTraceRow row;
    row.round = round;
    row.gap = result.theta.dot(direction);
    row.loglik = LogLik(result.theta, data);
    row.theta_norm = result.theta.norm();
    row.j_student_rstar = rstar ? ExactValue(mdp, result.policy, *rstar)
                                : std::numeric_limits<double>::quiet_NaN();
    row.inner_start = inner.objective.front();
    row.inner_end = inner.objective.back();
    CheckFinite(row.gap, "gap");
    CheckFinite(row.loglik, "loglik");
    result.trace.push_back(row);
  }
  return result;
}

SolverResult SolveOffline(const TokenMdp& mdp, const Policy& teacher,
                          const PreferenceDataset& dataset,
                          const SoftmaxLinearPolicy& init,
                          const OfflineConfig& config,
                          const Eigen::VectorXd* rstar) {
  if (dataset.empty()) {
    Fail(ErrorCode::kEmptyDataset, "offline solver needs preference data");
  }
  return SolveOfflineGeneric(mdp, teacher, LinearFeatureModel(mdp),
                             BuildPreferenceMatrix(dataset), init, config,
                             rstar);
}

}  // namespace pbkd
