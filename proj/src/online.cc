#include "pbkd/online.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "pbkd/error.h"

namespace pbkd {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// `count` rows of `data` drawn without replacement.
PreferenceMatrix SubsampleRows(const PreferenceMatrix& data, int count,
                               Rng& rng) {
  std::vector<int> idx(data.size());
  for (int i = 0; i < static_cast<int>(idx.size()); ++i) idx[i] = i;
  for (int i = 0; i < count; ++i) {
    std::swap(idx[i], idx[i + rng.Index(static_cast<int>(idx.size()) - i)]);
  }
  PreferenceMatrix out;
  out.diffs.resize(count, data.dim());
  out.signs.resize(count);
  for (int i = 0; i < count; ++i) {
    out.diffs.row(i) = data.diffs.row(idx[i]);
    out.signs[i] = data.signs[idx[i]];
  }
  return out;
}

ClippedBatch ExactBatch(const TokenMdp& mdp, const FeatureModel& model,
                        const SoftmaxLinearPolicy& snapshot,
                        const Eigen::VectorXd& theta, bool baseline) {
  std::vector<Trajectory> trajs;
  std::vector<double> weights;
  std::vector<double> returns;
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    const double px = mdp.prompt_distribution()[x];
    if (px == 0.0) continue;
    for (Trajectory& t : EnumerateTrajectories(mdp, x)) {
      const double w = px * std::exp(snapshot.LogProb(mdp, t));
      if (w == 0.0) continue;
      returns.push_back(theta.dot(GapFeatures(mdp, model, t)));
      weights.push_back(w);
      trajs.push_back(std::move(t));
    }
  }
  // Exact weights make the weighted mean E_old[R] itself the baseline.
  if (baseline) {
    double mean = 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < returns.size(); ++i) {
      mean += weights[i] * returns[i];
      total += weights[i];
    }
    mean /= total;
    for (double& r : returns) r -= mean;
  }
  return MakeClippedBatch(mdp, snapshot, std::move(trajs), std::move(weights),
                          returns, false);
}

}  // namespace

void ValidateOnlineConfig(const OnlineConfig& c) {
  auto invalid = [](const std::string& field, const std::string& why) {
    Fail(ErrorCode::kConfigInvalid, "online." + field + ": " + why);
  };
  if (c.iterations < 1) invalid("iterations", "must be >= 1");
  if (c.pref_batch < 1) invalid("pref_batch", "must be >= 1");
  if (c.opt_batch < 1) invalid("opt_batch", "must be >= 1");
  if (!(c.beta >= 0.0)) invalid("beta", "must be >= 0");
  if (!(c.clip > 0.0 && c.clip < 1.0)) invalid("clip", "must be in (0, 1)");
  if (!(c.alpha >= 0.0)) invalid("alpha", "must be >= 0");
  if (c.reward_steps < 1) invalid("reward_steps", "must be >= 1");
  if (c.policy_steps < 1) invalid("policy_steps", "must be >= 1");
  if (!(c.reward_lr > 0.0)) invalid("reward_lr", "must be > 0");
  if (!(c.policy_lr > 0.0)) invalid("policy_lr", "must be > 0");
  if (!(c.ridge > 0.0)) invalid("ridge", "must be > 0");
  if (!(c.bound > 0.0)) invalid("bound", "must be > 0");
  if (c.loglik_batch < 0) invalid("loglik_batch", "must be >= 0");
  if (c.snapshot_every < 0) invalid("snapshot_every", "must be >= 0");
}

double PolicyLr(const OnlineConfig& config, int t) {
  if (config.lr_schedule == LrSchedule::kInvSqrt) {
    return config.policy_lr / std::sqrt(static_cast<double>(std::max(t, 1)));
  }
  return config.policy_lr;
}

RewardStepResult RewardStep(const Eigen::VectorXd& theta,
                            const Eigen::VectorXd& pair_direction,
                            const PreferenceMatrix* data, double beta,
                            double bound, double lr) {
  const InnerResult inner =
      MaximizeInner(theta, pair_direction, data, beta, bound, 1, lr);
  return {inner.theta, inner.objective.front(), inner.objective.back(),
          inner.step};
}

ClippedBatch MakeClippedBatch(const TokenMdp& mdp,
                              const SoftmaxLinearPolicy& snapshot,
                              std::vector<Trajectory> trajectories,
                              std::vector<double> weights,
                              std::span<const double> returns, bool baseline) {
  if (trajectories.size() != weights.size() ||
      trajectories.size() != returns.size()) {
    Fail(ErrorCode::kDimensionMismatch, "clipped batch sizes differ");
  }
  if (trajectories.empty()) {
    Fail(ErrorCode::kEmptyDataset, "clipped batch is empty");
  }
  ClippedBatch batch;
  batch.advantages = LeaveOneOutCentered(returns, baseline);
  batch.old_log_probs.reserve(trajectories.size());
  for (const Trajectory& t : trajectories) {
    batch.old_log_probs.push_back(snapshot.LogProb(mdp, t));
  }
  batch.trajectories = std::move(trajectories);
  batch.weights = std::move(weights);
  return batch;
}

double ClippedSurrogate(const TokenMdp& mdp, const SoftmaxLinearPolicy& policy,
                        const ClippedBatch& batch, double clip) {
  double total = 0.0;
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    const double rho = std::exp(policy.LogProb(mdp, batch.trajectories[i]) -
                                batch.old_log_probs[i]);
    const double a = batch.advantages[i];
    total += batch.weights[i] *
             std::min(rho * a, std::clamp(rho, 1.0 - clip, 1.0 + clip) * a);
  }
  return total;
}

Eigen::MatrixXd ClippedSurrogateGradient(const TokenMdp& mdp,
                                         const SoftmaxLinearPolicy& policy,
                                         const ClippedBatch& batch,
                                         double clip) {
  Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(policy.weights().rows(),
                                               policy.weights().cols());
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    const double a = batch.advantages[i];
    if (a == 0.0) continue;
    const Trajectory& t = batch.trajectories[i];
    const double rho = std::exp(policy.LogProb(mdp, t) - batch.old_log_probs[i]);
    // The min picks the clipped constant once the ratio has moved past the
    // trust region in the direction the advantage favors.
    const bool clipped = a > 0.0 ? rho > 1.0 + clip : rho < 1.0 - clip;
    if (clipped) continue;
    policy.AccumulateGradLogProb(mdp, t, batch.weights[i] * a * rho, grad);
  }
  return grad;
}

void PolicyClippedStep(const TokenMdp& mdp, const ClippedBatch& batch,
                       double clip, double lr, SoftmaxLinearPolicy& policy) {
  const Eigen::MatrixXd grad = ClippedSurrogateGradient(mdp, policy, batch, clip);
  CheckFinite(grad.squaredNorm(), "clipped surrogate gradient");
  policy.mutable_weights() += lr * grad;
}

CovarianceAccumulator::CovarianceAccumulator(int dim, double ridge)
    : ridge_(ridge), sigma_(ridge * Eigen::MatrixXd::Identity(dim, dim)) {}

void CovarianceAccumulator::Update(const Eigen::MatrixXd& diffs) {
  if (diffs.rows() == 0) return;
  if (diffs.cols() != sigma_.cols()) {
    Fail(ErrorCode::kDimensionMismatch, "covariance update dimension");
  }
  Eigen::MatrixXd outer = diffs.transpose() * diffs / static_cast<double>(diffs.rows());
  // Symmetrize so rounding never breaks exact symmetry.
  sigma_ += 0.5 * (outer + outer.transpose());
}

double CovarianceAccumulator::LogDet() const {
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma_);
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

Eigen::VectorXd CovarianceAccumulator::Solve(const Eigen::VectorXd& v) const {
  if (v.size() != sigma_.cols()) {
    Fail(ErrorCode::kDimensionMismatch, "covariance solve dimension");
  }
  return sigma_.llt().solve(v);
}

double UncertaintyStep(const TokenMdp& mdp, const FeatureModel& model,
                       const Eigen::VectorXd& teacher_features,
                       const CovarianceAccumulator& sigma, double alpha,
                       double lr, ValueMode mode, int n_samples, Rng& rng,
                       SoftmaxLinearPolicy& policy) {
  if (mode == ValueMode::kExact) {
    const Eigen::VectorXd dev =
        ExpectedGapFeatures(mdp, model, policy, ValueMode::kExact, 1, rng) -
        teacher_features;
    const Eigen::VectorXd c = sigma.Solve(dev);
    const double objective = dev.dot(c);
    if (alpha == 0.0) return objective;
    const StepFeatureFn& gap = model.gap;
    const Eigen::MatrixXd grad = ExactPolicyGradient(
        mdp, policy, [&gap, &c](int x, std::span<const int> s, int a) {
          return c.dot(gap(x, s, a));
        });
    CheckFinite(grad.squaredNorm(), "uncertainty gradient");
    policy.mutable_weights() += 2.0 * alpha * lr * grad;
    return objective;
  }
  std::vector<Trajectory> batch;
  std::vector<Eigen::VectorXd> feats;
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(model.dim);
  for (int i = 0; i < n_samples; ++i) {
    const int x = mdp.SamplePrompt(rng);
    batch.push_back(Rollout(mdp, policy, x, rng));
    feats.push_back(GapFeatures(mdp, model, batch.back()));
    mean += feats.back();
  }
  mean /= n_samples;
  const Eigen::VectorXd dev = mean - teacher_features;
  const Eigen::VectorXd c = sigma.Solve(dev);
  const double objective = dev.dot(c);
  if (alpha == 0.0) return objective;
  std::vector<double> returns;
  returns.reserve(feats.size());
  for (const Eigen::VectorXd& f : feats) returns.push_back(c.dot(f));
  const Eigen::MatrixXd grad =
      ScoreFunctionGradient(mdp, policy, batch, returns, true);
  CheckFinite(grad.squaredNorm(), "uncertainty gradient");
  policy.mutable_weights() += 2.0 * alpha * lr * grad;
  return objective;
}

OnlineResult RunOnlineGeneric(const TokenMdp& mdp, const Policy& teacher,
                              const FeatureModel& model,
                              const SoftmaxLinearPolicy& init,
                              const OnlineConfig& config,
                              const LinearReward* rstar,
                              const OnlineWarmStart& warm) {
  ValidateOnlineConfig(config);
  if (config.labeling == LabelMode::kOracle && rstar == nullptr) {
    Fail(ErrorCode::kMissingOracle, "oracle labeling needs r*");
  }
  Rng collect_rng(DeriveSeed(config.seed, "collect"));
  Rng batch_rng(DeriveSeed(config.seed, "batch"));
  Rng loglik_rng(DeriveSeed(config.seed, "loglik"));

  OnlineResult result{init, Eigen::VectorXd::Zero(model.dim), {}, {}, {}, {}};
  result.dataset.metadata().seeds.push_back(config.seed);
  CovarianceAccumulator sigma(model.dim, config.ridge);
  PreferenceMatrix data;
  data.diffs.resize(0, model.dim);
  data.signs.resize(0);
  if (warm.data != nullptr && !warm.data->empty()) {
    result.dataset = *warm.data;
    result.dataset.metadata().seeds.push_back(config.seed);
    data = BuildPreferenceMatrix(
        *warm.data,
        [&](const Trajectory& t) { return PrefFeatures(mdp, model, t); },
        model.dim);
    sigma.Update(data.diffs);
  }
  if (warm.theta.size() > 0) {
    if (warm.theta.size() != model.dim) {
      Fail(ErrorCode::kDimensionMismatch, "warm-start theta dimension");
    }
    result.theta = ProjectToBall(warm.theta, config.bound);
  }

  const bool exact = config.mode == ValueMode::kExact;
  Eigen::VectorXd teacher_exact;
  if (exact) {
    teacher_exact = ExpectedGapFeatures(mdp, model, teacher, ValueMode::kExact,
                                        1, batch_rng);
  }
  double j_opt = kNaN;
  double j_teacher = kNaN;
  if (rstar != nullptr) {
    j_opt = ExactValue(mdp, DpOptimalPolicy(mdp, rstar->theta), rstar->theta);
    j_teacher = ExactValue(mdp, teacher, rstar->theta);
  }

  double step = config.reward_lr;
  double regret = 0.0;
  for (int t = 1; t <= config.iterations; ++t) {
    const SoftmaxLinearPolicy snapshot = result.policy;

    // Collect and label this iteration's pairs.
    Eigen::MatrixXd new_diffs(config.pref_batch, model.dim);
    const Eigen::Index base = data.size();
    data.diffs.conservativeResize(base + config.pref_batch, Eigen::NoChange);
    data.signs.conservativeResize(base + config.pref_batch);
    for (int i = 0; i < config.pref_batch; ++i) {
      PreferenceSample s = GenerateOnlineSample(mdp, teacher, snapshot, t,
                                                config.labeling, rstar,
                                                collect_rng);
      new_diffs.row(i) = (PrefFeatures(mdp, model, s.traj0) -
                          PrefFeatures(mdp, model, s.traj1))
                             .transpose();
      data.diffs.row(base + i) = new_diffs.row(i);
      data.signs[base + i] = s.label == 1 ? 1.0 : -1.0;
      result.dataset.Add(std::move(s));
    }

    // Optimization batch of fresh teacher/student pairs.
    Eigen::VectorXd teacher_phi;
    Eigen::VectorXd pair_direction;
    std::vector<Trajectory> student_trajs;
    if (exact) {
      teacher_phi = teacher_exact;
      pair_direction =
          config.opt_batch *
          (teacher_exact - ExpectedGapFeatures(mdp, model, snapshot,
                                               ValueMode::kExact, 1, batch_rng));
    } else {
      teacher_phi = Eigen::VectorXd::Zero(model.dim);
      pair_direction = Eigen::VectorXd::Zero(model.dim);
      for (int m = 0; m < config.opt_batch; ++m) {
        const int x = mdp.SamplePrompt(batch_rng);
        const Eigen::VectorXd f0 =
            GapFeatures(mdp, model, Rollout(mdp, teacher, x, batch_rng));
        student_trajs.push_back(Rollout(mdp, snapshot, x, batch_rng));
        teacher_phi += f0;
        pair_direction += f0 - GapFeatures(mdp, model, student_trajs.back());
      }
      teacher_phi /= config.opt_batch;
    }

    // Reward steps on the pair term plus the likelihood of D_t.
    PreferenceMatrix subset;
    const PreferenceMatrix* lik = &data;
    double beta = config.beta;
    if (config.loglik_batch > 0 && config.loglik_batch < data.size()) {
      subset = SubsampleRows(data, config.loglik_batch, loglik_rng);
      lik = &subset;
      beta *= static_cast<double>(data.size()) / config.loglik_batch;
    }
    for (int k = 0; k < config.reward_steps; ++k) {
      const RewardStepResult r =
          RewardStep(result.theta, pair_direction, lik, beta, config.bound, step);
      result.theta = r.theta;
      step = std::min(r.step, config.reward_lr);
    }

    // Clipped policy steps against the snapshot.
    const double lr = PolicyLr(config, t);
    ClippedBatch batch;
    if (exact) {
      batch = ExactBatch(mdp, model, snapshot, result.theta, config.baseline);
    } else {
      std::vector<double> returns;
      for (const Trajectory& tr : student_trajs) {
        returns.push_back(result.theta.dot(GapFeatures(mdp, model, tr)));
      }
      std::vector<double> weights(student_trajs.size(), 1.0 / config.opt_batch);
      batch = MakeClippedBatch(mdp, snapshot, std::move(student_trajs),
                               std::move(weights), returns, config.baseline);
    }
    for (int k = 0; k < config.policy_steps; ++k) {
      PolicyClippedStep(mdp, batch, config.clip, lr, result.policy);
    }

    UncertaintyStep(mdp, model, teacher_phi, sigma, config.alpha, lr,
                    config.mode, config.opt_batch, batch_rng, result.policy);
    sigma.Update(new_diffs);

    OnlineTraceRow row;
    row.t = t;
    row.n_t = static_cast<int>(data.size());
    row.gap_estimate = result.theta.dot(pair_direction) / config.opt_batch;
    row.loglik = LogLik(result.theta, data);
    row.theta_norm = result.theta.norm();
    row.sigma_logdet = sigma.LogDet();
    row.j_teacher_rstar = j_teacher;
    row.j_student_rstar = kNaN;
    row.regret_cumulative = kNaN;
    if (rstar != nullptr) {
      row.j_student_rstar = ExactValue(mdp, result.policy, rstar->theta);
      regret += j_opt - row.j_student_rstar;
      row.regret_cumulative = regret;
    }
    CheckFinite(row.gap_estimate, "gap estimate");
    CheckFinite(row.loglik, "loglik");
    result.trace.push_back(row);
    if (config.snapshot_every > 0 && t % config.snapshot_every == 0) {
      result.snapshots.push_back({t, result.policy});
    }
  }
  result.sigma = sigma.sigma();
  return result;
}

OnlineResult RunOnline(const TokenMdp& mdp, const Policy& teacher,
                       const SoftmaxLinearPolicy& init,
                       const OnlineConfig& config, const LinearReward* rstar,
                       const OnlineWarmStart& warm) {
  return RunOnlineGeneric(mdp, teacher, LinearFeatureModel(mdp), init, config,
                          rstar, warm);
}

}  // namespace pbkd
