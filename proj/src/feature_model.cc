#include "pbkd/feature_model.h"

#include <algorithm>
#include <cmath>

#include "pbkd/error.h"

namespace pbkd {

FeatureModel LinearFeatureModel(const TokenMdp& mdp) {
  FeatureModel model;
  model.dim = mdp.feature_dim();
  auto psi = [&mdp](int x, std::span<const int> s, int a) {
    return mdp.StepFeatures(x, s, a);
  };
  model.pref = psi;
  model.gap = psi;
  model.uses_mdp_features = true;
  return model;
}

Eigen::VectorXd PathFeatures(const TokenMdp& mdp, const StepFeatureFn& f,
                             int dim, const Trajectory& traj) {
  std::span<const int> actions(traj.actions);
  if (static_cast<int>(actions.size()) != mdp.horizon()) {
    Fail(ErrorCode::kMalformedTrajectory, "trajectory length != horizon");
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
  for (int h = 0; h < mdp.horizon(); ++h) {
    if (mdp.Discount(h) == 0.0) break;
    out += mdp.Discount(h) * f(traj.prompt, actions.subspan(0, h), actions[h]);
  }
  return out;
}

Eigen::VectorXd PrefFeatures(const TokenMdp& mdp, const FeatureModel& model,
                             const Trajectory& traj) {
  if (model.uses_mdp_features) return traj.features;
  return PathFeatures(mdp, model.pref, model.dim, traj);
}

Eigen::VectorXd GapFeatures(const TokenMdp& mdp, const FeatureModel& model,
                            const Trajectory& traj) {
  if (model.uses_mdp_features) return traj.features;
  return PathFeatures(mdp, model.gap, model.dim, traj);
}

Eigen::VectorXd ExpectedGapFeatures(const TokenMdp& mdp,
                                    const FeatureModel& model,
                                    const Policy& policy, ValueMode mode,
                                    int n_samples, Rng& rng) {
  if (mode == ValueMode::kExact) {
    if (model.uses_mdp_features) return FeatureExpectation(mdp, policy);
    return ExpectedStepFeatures(mdp, policy, model.gap, model.dim);
  }
  if (n_samples < 1) Fail(ErrorCode::kConfigInvalid, "n_samples must be >= 1");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(model.dim);
  for (int i = 0; i < n_samples; ++i) {
    const int x = mdp.SamplePrompt(rng);
    sum += GapFeatures(mdp, model, Rollout(mdp, policy, x, rng));
  }
  return sum / n_samples;
}

SoftmaxLinearPolicy SoftmaxFromTabular(const TokenMdp& mdp,
                                       const TabularPolicy& tabular,
                                       double floor) {
  if (mdp.context_len() < mdp.horizon() - 1) {
    Fail(ErrorCode::kConfigInvalid,
         "softmax clone of a tabular policy needs context_len >= H - 1");
  }
  SoftmaxLinearPolicy policy(mdp);
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    for (int h = 0; h < mdp.horizon(); ++h) {
      const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
      for (std::int64_t code = 0; code < width; ++code) {
        const std::vector<int> prefix = DecodePrefix(mdp, h, code);
        const Eigen::VectorXd p = tabular.ActionDistribution(mdp, x, prefix);
        const int row = SoftmaxLinearPolicy::StateFeatureIndex(mdp, x, prefix);
        for (int a = 0; a < mdp.vocab_size(); ++a) {
          policy.mutable_weights()(row, a) = std::log(std::max(p[a], floor));
        }
      }
    }
  }
  return policy;
}

}  // namespace pbkd
