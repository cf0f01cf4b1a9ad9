#include "pbkd/mdp.h"

#include <cmath>
#include <limits>
#include <string>
#include <utility>

#include "pbkd/error.h"
#include "pbkd/policy.h"

namespace pbkd {
namespace {

constexpr std::int64_t kMaxFeatureTableEntries = 50'000'000;

std::int64_t SaturatingMul(std::int64_t a, std::int64_t b) {
  if (a != 0 && b > std::numeric_limits<std::int64_t>::max() / a) {
    return std::numeric_limits<std::int64_t>::max();
  }
  return a * b;
}

std::int64_t SaturatingAdd(std::int64_t a, std::int64_t b) {
  if (a > std::numeric_limits<std::int64_t>::max() - b) {
    return std::numeric_limits<std::int64_t>::max();
  }
  return a + b;
}

void Validate(const MdpSpec& spec) {
  auto invalid = [](const std::string& field, const std::string& why) {
    Fail(ErrorCode::kConfigInvalid, "mdp." + field + ": " + why);
  };
  if (spec.vocab_size < 1) invalid("vocab_size", "must be >= 1");
  if (spec.horizon < 1) invalid("horizon", "must be >= 1");
  if (spec.feature_dim < 1) invalid("feature_dim", "must be >= 1");
  if (spec.prompt_count < 1) invalid("prompt_count", "must be >= 1");
  if (spec.context_len < 0) invalid("context_len", "must be >= 0");
  if (!(spec.gamma >= 0.0 && spec.gamma <= 1.0)) {
    invalid("gamma", "must lie in [0, 1]");
  }
  if (spec.enumeration_cap < 1) invalid("enumeration_cap", "must be >= 1");
  if (!spec.prompt_distribution.empty()) {
    if (static_cast<int>(spec.prompt_distribution.size()) !=
        spec.prompt_count) {
      invalid("prompt_distribution", "length must equal prompt_count");
    }
    double total = 0.0;
    for (double p : spec.prompt_distribution) {
      if (!(p >= 0.0)) invalid("prompt_distribution", "negative entry");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      invalid("prompt_distribution", "must sum to 1");
    }
  }
}

}  // namespace

TokenMdp::TokenMdp(MdpSpec spec) : spec_(std::move(spec)) { Init(); }

TokenMdp::TokenMdp(MdpSpec spec, StepFeatureFn step_features)
    : spec_(std::move(spec)), custom_features_(std::move(step_features)) {
  Init();
}

void TokenMdp::Init() {
  Validate(spec_);
  const int V = spec_.vocab_size;
  const int H = spec_.horizon;

  prompt_dist_.resize(spec_.prompt_count);
  if (spec_.prompt_distribution.empty()) {
    prompt_dist_.setConstant(1.0 / spec_.prompt_count);
  } else {
    for (int i = 0; i < spec_.prompt_count; ++i) {
      prompt_dist_[i] = spec_.prompt_distribution[i];
    }
  }

  discounts_.resize(H);
  double g = 1.0;
  for (int h = 0; h < H; ++h) {
    discounts_[h] = g;
    g *= spec_.gamma;
  }

  level_offset_.assign(H + 1, 0);
  std::int64_t width = 1;
  for (int h = 0; h < H; ++h) {
    level_offset_[h + 1] = SaturatingAdd(level_offset_[h], width);
    width = SaturatingMul(width, V);
  }

  context_count_ = 1;
  for (int i = 0; i < spec_.context_len; ++i) {
    if (context_count_ > std::numeric_limits<int>::max() / (V + 1)) {
      Fail(ErrorCode::kConfigInvalid, "mdp.context_len: context space too large");
    }
    context_count_ *= V + 1;
  }

  if (!custom_features_) {
    const std::int64_t keys = SaturatingMul(
        SaturatingMul(SaturatingMul(spec_.prompt_count, context_count_), H),
        V);
    if (SaturatingMul(keys, spec_.feature_dim) > kMaxFeatureTableEntries) {
      Fail(ErrorCode::kConfigInvalid,
           "mdp: step feature table too large for the default feature map");
    }
    feature_table_.resize(spec_.feature_dim, keys);
    const double scale_norm = 1.0 / H;
    for (std::int64_t key = 0; key < keys; ++key) {
      Rng rng(DeriveSeed(spec_.feature_seed, "psi", key));
      Eigen::VectorXd column(spec_.feature_dim);
      for (int i = 0; i < spec_.feature_dim; ++i) column[i] = rng.Normal();
      const double norm = column.norm();
      if (norm == 0.0) {
        column.setZero();
        column[0] = scale_norm;
      } else {
        column *= scale_norm / norm;
      }
      feature_table_.col(key) = column;
    }
  }
}

int TokenMdp::ContextCode(std::span<const int> prefix) const {
  const int V = spec_.vocab_size;
  int code = 0;
  const int h = static_cast<int>(prefix.size());
  for (int i = 0; i < spec_.context_len; ++i) {
    const int pos = h - 1 - i;
    const int token = pos >= 0 ? prefix[pos] : V;
    code = code * (V + 1) + token;
  }
  return code;
}

Eigen::VectorXd TokenMdp::StepFeatures(int prompt, std::span<const int> prefix,
                                       int action) const {
  if (custom_features_) {
    Eigen::VectorXd out = custom_features_(prompt, prefix, action);
    if (out.size() != spec_.feature_dim) {
      Fail(ErrorCode::kDimensionMismatch,
           "step feature map returned a vector of the wrong size");
    }
    return out;
  }
  const int h = static_cast<int>(prefix.size());
  const std::int64_t key =
      ((static_cast<std::int64_t>(prompt) * context_count_ +
        ContextCode(prefix)) *
           spec_.horizon +
       h) *
          spec_.vocab_size +
      action;
  return feature_table_.col(key);
}

std::int64_t TokenMdp::TrajectoryCount() const {
  std::int64_t count = 1;
  for (int h = 0; h < spec_.horizon; ++h) {
    count = SaturatingMul(count, spec_.vocab_size);
  }
  return count;
}

bool TokenMdp::Enumerable() const {
  return TrajectoryCount() <= spec_.enumeration_cap;
}

void TokenMdp::RequireEnumerable() const {
  if (!Enumerable()) {
    Fail(ErrorCode::kCapExceeded,
         "V^H = " + std::to_string(TrajectoryCount()) +
             " exceeds enumeration_cap " +
             std::to_string(spec_.enumeration_cap));
  }
}

std::int64_t TokenMdp::StateIndex(int prompt,
                                  std::span<const int> prefix) const {
  std::int64_t code = 0;
  for (int token : prefix) code = code * spec_.vocab_size + token;
  return prompt * NodesPerPrompt() +
         LevelOffset(static_cast<int>(prefix.size())) + code;
}

int TokenMdp::SamplePrompt(Rng& rng) const {
  if (spec_.prompt_count == 1) return 0;
  return rng.Categorical(prompt_dist_);
}

Eigen::VectorXd TrajectoryFeatures(const TokenMdp& mdp, int prompt,
                                   std::span<const int> actions) {
  if (static_cast<int>(actions.size()) != mdp.horizon()) {
    Fail(ErrorCode::kMalformedTrajectory,
         "expected " + std::to_string(mdp.horizon()) + " actions, got " +
             std::to_string(actions.size()));
  }
  if (prompt < 0 || prompt >= mdp.prompt_count()) {
    Fail(ErrorCode::kMalformedTrajectory,
         "prompt " + std::to_string(prompt) + " out of range");
  }
  for (int a : actions) {
    if (a < 0 || a >= mdp.vocab_size()) {
      Fail(ErrorCode::kMalformedTrajectory,
           "action " + std::to_string(a) + " out of range");
    }
  }
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(mdp.feature_dim());
  for (int h = 0; h < mdp.horizon(); ++h) {
    phi += mdp.Discount(h) *
           mdp.StepFeatures(prompt, actions.subspan(0, h), actions[h]);
  }
  return phi;
}

Trajectory MakeTrajectory(const TokenMdp& mdp, int prompt,
                          std::vector<int> actions) {
  Trajectory traj;
  traj.prompt = prompt;
  traj.features = TrajectoryFeatures(mdp, prompt, actions);
  traj.actions = std::move(actions);
  return traj;
}

std::vector<Trajectory> EnumerateTrajectories(const TokenMdp& mdp,
                                              int prompt) {
  mdp.RequireEnumerable();
  const int V = mdp.vocab_size();
  const int H = mdp.horizon();
  const std::int64_t count = mdp.TrajectoryCount();
  std::vector<Trajectory> out;
  out.reserve(count);
  std::vector<int> actions(H, 0);
  for (std::int64_t i = 0; i < count; ++i) {
    std::int64_t code = i;
    for (int h = H - 1; h >= 0; --h) {
      actions[h] = static_cast<int>(code % V);
      code /= V;
    }
    out.push_back(MakeTrajectory(mdp, prompt, actions));
  }
  return out;
}

Trajectory Rollout(const TokenMdp& mdp, const Policy& policy, int prompt,
                   Rng& rng) {
  Trajectory traj;
  traj.prompt = prompt;
  traj.actions.reserve(mdp.horizon());
  traj.features = Eigen::VectorXd::Zero(mdp.feature_dim());
  for (int h = 0; h < mdp.horizon(); ++h) {
    const Eigen::VectorXd dist =
        policy.ActionDistribution(mdp, prompt, traj.actions);
    const int a = rng.Categorical(dist);
    traj.features += mdp.Discount(h) * mdp.StepFeatures(prompt, traj.actions, a);
    traj.actions.push_back(a);
  }
  return traj;
}

}  // namespace pbkd
