#ifndef PBKD_MDP_H_
#define PBKD_MDP_H_

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/rng.h"

namespace pbkd {

class Policy;

struct MdpSpec {
  int vocab_size = 3;
  int horizon = 3;
  double gamma = 1.0;
  int feature_dim = 8;
  int prompt_count = 2;
  // Number of trailing tokens visible to the step feature map and to
  // softmax-linear policies.
  int context_len = 1;
  std::uint64_t feature_seed = 1;
  std::int64_t enumeration_cap = 1'000'000;
  // Empty means uniform over prompts.
  std::vector<double> prompt_distribution;
};

// psi(prompt, prefix, action). `prefix` holds the tokens emitted so far; its
// length is the step index h.
using StepFeatureFn = std::function<Eigen::VectorXd(
    int prompt, std::span<const int> prefix, int action)>;

// Finite-horizon token generation with deterministic transitions: the state
// after emitting `a` from prefix `s` is `s` extended by `a`.
//
// The default step feature map is a seeded random projection of the one-hot
// key (prompt, last-k context, position, action). Each projected column is
// rescaled to norm exactly 1/H, so every discounted trajectory feature has
// norm at most 1.
class TokenMdp {
 public:
  explicit TokenMdp(MdpSpec spec);
  TokenMdp(MdpSpec spec, StepFeatureFn step_features);

  const MdpSpec& spec() const { return spec_; }
  int vocab_size() const { return spec_.vocab_size; }
  int horizon() const { return spec_.horizon; }
  double gamma() const { return spec_.gamma; }
  int feature_dim() const { return spec_.feature_dim; }
  int prompt_count() const { return spec_.prompt_count; }
  int context_len() const { return spec_.context_len; }
  const Eigen::VectorXd& prompt_distribution() const { return prompt_dist_; }

  // gamma^h, with 0^0 = 1.
  double Discount(int h) const { return discounts_[h]; }

  Eigen::VectorXd StepFeatures(int prompt, std::span<const int> prefix,
                               int action) const;

  // Code of the last-k context of `prefix`, padding missing positions with
  // the token V. Range [0, (V+1)^k).
  int ContextCode(std::span<const int> prefix) const;
  int ContextCount() const { return context_count_; }

  // V^H, saturating at INT64_MAX.
  std::int64_t TrajectoryCount() const;
  bool Enumerable() const;
  // Throws kCapExceeded when V^H exceeds the enumeration cap.
  void RequireEnumerable() const;

  // Dense indexing of the prefix tree: states of depth h occupy
  // [LevelOffset(h), LevelOffset(h+1)) per prompt, ordered by the base-V
  // value of the prefix.
  std::int64_t NodesPerPrompt() const { return level_offset_.back(); }
  std::int64_t LevelOffset(int h) const { return level_offset_[h]; }
  std::int64_t StateIndex(int prompt, std::span<const int> prefix) const;

  int SamplePrompt(Rng& rng) const;

 private:
  void Init();

  MdpSpec spec_;
  StepFeatureFn custom_features_;
  Eigen::VectorXd prompt_dist_;
  std::vector<double> discounts_;
  std::vector<std::int64_t> level_offset_;
  int context_count_ = 1;
  // Column per (prompt, context, h, action) key when the default map is used.
  Eigen::MatrixXd feature_table_;
};

struct Trajectory {
  int prompt = 0;
  std::vector<int> actions;
  // Cached discounted trajectory features.
  Eigen::VectorXd features;
};

// phi(x, tau) = sum_h gamma^h psi(x, s_h, a_h).
Eigen::VectorXd TrajectoryFeatures(const TokenMdp& mdp, int prompt,
                                   std::span<const int> actions);

// Validates and caches features. Throws kMalformedTrajectory.
Trajectory MakeTrajectory(const TokenMdp& mdp, int prompt,
                          std::vector<int> actions);

// All V^H action sequences for `prompt` in lexicographic order.
std::vector<Trajectory> EnumerateTrajectories(const TokenMdp& mdp, int prompt);

Trajectory Rollout(const TokenMdp& mdp, const Policy& policy, int prompt,
                   Rng& rng);

}  // namespace pbkd

#endif  // PBKD_MDP_H_
