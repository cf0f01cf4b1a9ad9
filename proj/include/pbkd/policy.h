#ifndef PBKD_POLICY_H_
#define PBKD_POLICY_H_

#include <iosfwd>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/mdp.h"

namespace pbkd {

class Policy {
 public:
  virtual ~Policy() = default;

  // pi(. | prompt, prefix) over the V tokens. `prefix` must have length < H.
  virtual Eigen::VectorXd ActionDistribution(
      const TokenMdp& mdp, int prompt, std::span<const int> prefix) const = 0;
};

// Numerically stable softmax of `logits`.
Eigen::VectorXd Softmax(const Eigen::VectorXd& logits);

// pi(a | s) = softmax(W^T f(s) / temperature), where f(s) is the one-hot
// indicator of (prompt, position, last-k context). The policy therefore sees
// only the truncated context, not the full prefix.
class SoftmaxLinearPolicy final : public Policy {
 public:
  // Zero weights, i.e. the uniform policy.
  explicit SoftmaxLinearPolicy(const TokenMdp& mdp, double temperature = 1.0);
  SoftmaxLinearPolicy(Eigen::MatrixXd weights, double temperature,
                      int context_len);

  static int StateFeatureDim(const TokenMdp& mdp);
  static int StateFeatureIndex(const TokenMdp& mdp, int prompt,
                               std::span<const int> prefix);

  Eigen::VectorXd Logits(const TokenMdp& mdp, int prompt,
                         std::span<const int> prefix) const;
  Eigen::VectorXd ActionDistribution(
      const TokenMdp& mdp, int prompt,
      std::span<const int> prefix) const override;

  // sum_h log pi(a_h | s_h). Throws kMalformedTrajectory.
  double LogProb(const TokenMdp& mdp, const Trajectory& traj) const;
  // out += scale * d/dW LogProb(traj).
  void AccumulateGradLogProb(const TokenMdp& mdp, const Trajectory& traj,
                             double scale, Eigen::MatrixXd& out) const;

  const Eigen::MatrixXd& weights() const { return weights_; }
  Eigen::MatrixXd& mutable_weights() { return weights_; }
  double temperature() const { return temperature_; }
  int context_len() const { return context_len_; }

 private:
  void CheckShape(const TokenMdp& mdp) const;

  Eigen::MatrixXd weights_;
  double temperature_ = 1.0;
  int context_len_ = 1;
};

// Explicit distribution per full-prefix state. States without an entry raise
// kUnknownState when queried.
class TabularPolicy final : public Policy {
 public:
  explicit TabularPolicy(const TokenMdp& mdp);

  // Same distribution at every state.
  static TabularPolicy Constant(const TokenMdp& mdp,
                                const Eigen::VectorXd& dist);
  // Probability one on `token` everywhere.
  static TabularPolicy Deterministic(const TokenMdp& mdp, int token);

  void Set(const TokenMdp& mdp, int prompt, std::span<const int> prefix,
           Eigen::VectorXd dist);
  void SetByIndex(std::int64_t state_index, Eigen::VectorXd dist);
  bool Has(std::int64_t state_index) const;

  Eigen::VectorXd ActionDistribution(
      const TokenMdp& mdp, int prompt,
      std::span<const int> prefix) const override;

  const std::vector<Eigen::VectorXd>& table() const { return table_; }

 private:
  int vocab_size_;
  std::vector<Eigen::VectorXd> table_;
};

// Text records: a header line naming the kind and shape, then decimal values
// printed with 17 significant digits so they parse back bit-exactly.
void WritePolicyRecord(std::ostream& out, const SoftmaxLinearPolicy& policy);
SoftmaxLinearPolicy ReadSoftmaxPolicyRecord(std::istream& in);
void WritePolicyRecord(std::ostream& out, const TabularPolicy& policy);
TabularPolicy ReadTabularPolicyRecord(std::istream& in, const TokenMdp& mdp);

}  // namespace pbkd

#endif  // PBKD_POLICY_H_
