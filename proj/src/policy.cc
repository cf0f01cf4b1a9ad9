#include "pbkd/policy.h"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "pbkd/error.h"

namespace pbkd {
namespace {

constexpr const char* kSoftmaxHeader = "pbkd-policy/1 softmax-linear";
constexpr const char* kTabularHeader = "pbkd-policy/1 tabular";

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void CheckPrefix(const TokenMdp& mdp, int prompt, std::span<const int> prefix) {
  if (prompt < 0 || prompt >= mdp.prompt_count() ||
      static_cast<int>(prefix.size()) >= mdp.horizon()) {
    Fail(ErrorCode::kUnknownState, "state outside the prefix tree");
  }
}

}  // namespace

Eigen::VectorXd Softmax(const Eigen::VectorXd& logits) {
  const double max_logit = logits.maxCoeff();
  Eigen::VectorXd out = (logits.array() - max_logit).exp().matrix();
  return out / out.sum();
}

SoftmaxLinearPolicy::SoftmaxLinearPolicy(const TokenMdp& mdp,
                                         double temperature)
    : weights_(Eigen::MatrixXd::Zero(StateFeatureDim(mdp), mdp.vocab_size())),
      temperature_(temperature),
      context_len_(mdp.context_len()) {
  if (!(temperature > 0.0)) {
    Fail(ErrorCode::kConfigInvalid, "policy temperature must be positive");
  }
}

SoftmaxLinearPolicy::SoftmaxLinearPolicy(Eigen::MatrixXd weights,
                                         double temperature, int context_len)
    : weights_(std::move(weights)),
      temperature_(temperature),
      context_len_(context_len) {
  if (!(temperature > 0.0)) {
    Fail(ErrorCode::kConfigInvalid, "policy temperature must be positive");
  }
}

int SoftmaxLinearPolicy::StateFeatureDim(const TokenMdp& mdp) {
  return mdp.prompt_count() * mdp.horizon() * mdp.ContextCount();
}

int SoftmaxLinearPolicy::StateFeatureIndex(const TokenMdp& mdp, int prompt,
                                           std::span<const int> prefix) {
  const int h = static_cast<int>(prefix.size());
  return (prompt * mdp.horizon() + h) * mdp.ContextCount() +
         mdp.ContextCode(prefix);
}

void SoftmaxLinearPolicy::CheckShape(const TokenMdp& mdp) const {
  if (weights_.rows() != StateFeatureDim(mdp) ||
      weights_.cols() != mdp.vocab_size() ||
      context_len_ != mdp.context_len()) {
    Fail(ErrorCode::kDimensionMismatch,
         "softmax policy shape does not match the mdp");
  }
}

Eigen::VectorXd SoftmaxLinearPolicy::Logits(const TokenMdp& mdp, int prompt,
                                            std::span<const int> prefix) const {
  CheckShape(mdp);
  CheckPrefix(mdp, prompt, prefix);
  return weights_.row(StateFeatureIndex(mdp, prompt, prefix)).transpose() /
         temperature_;
}

Eigen::VectorXd SoftmaxLinearPolicy::ActionDistribution(
    const TokenMdp& mdp, int prompt, std::span<const int> prefix) const {
  return Softmax(Logits(mdp, prompt, prefix));
}

double SoftmaxLinearPolicy::LogProb(const TokenMdp& mdp,
                                    const Trajectory& traj) const {
  // Validates length and token range.
  TrajectoryFeatures(mdp, traj.prompt, traj.actions);
  double total = 0.0;
  std::span<const int> actions(traj.actions);
  for (int h = 0; h < mdp.horizon(); ++h) {
    const Eigen::VectorXd logits = Logits(mdp, traj.prompt, actions.subspan(0, h));
    const double max_logit = logits.maxCoeff();
    const double log_z =
        max_logit + std::log((logits.array() - max_logit).exp().sum());
    total += logits[actions[h]] - log_z;
  }
  return total;
}

void SoftmaxLinearPolicy::AccumulateGradLogProb(const TokenMdp& mdp,
                                                const Trajectory& traj,
                                                double scale,
                                                Eigen::MatrixXd& out) const {
  std::span<const int> actions(traj.actions);
  if (static_cast<int>(actions.size()) != mdp.horizon()) {
    Fail(ErrorCode::kMalformedTrajectory, "trajectory length != horizon");
  }
  for (int h = 0; h < mdp.horizon(); ++h) {
    const auto prefix = actions.subspan(0, h);
    const int row = StateFeatureIndex(mdp, traj.prompt, prefix);
    const Eigen::VectorXd probs = ActionDistribution(mdp, traj.prompt, prefix);
    const double s = scale / temperature_;
    out.row(row) -= s * probs.transpose();
    out(row, actions[h]) += s;
  }
}

TabularPolicy::TabularPolicy(const TokenMdp& mdp)
    : vocab_size_(mdp.vocab_size()) {
  mdp.RequireEnumerable();
  table_.resize(mdp.prompt_count() * mdp.NodesPerPrompt());
}

TabularPolicy TabularPolicy::Constant(const TokenMdp& mdp,
                                      const Eigen::VectorXd& dist) {
  TabularPolicy policy(mdp);
  for (auto& entry : policy.table_) entry = dist;
  return policy;
}

TabularPolicy TabularPolicy::Deterministic(const TokenMdp& mdp, int token) {
  Eigen::VectorXd dist = Eigen::VectorXd::Zero(mdp.vocab_size());
  dist[token] = 1.0;
  return Constant(mdp, dist);
}

void TabularPolicy::Set(const TokenMdp& mdp, int prompt,
                        std::span<const int> prefix, Eigen::VectorXd dist) {
  CheckPrefix(mdp, prompt, prefix);
  SetByIndex(mdp.StateIndex(prompt, prefix), std::move(dist));
}

void TabularPolicy::SetByIndex(std::int64_t state_index, Eigen::VectorXd dist) {
  if (dist.size() != vocab_size_) {
    Fail(ErrorCode::kDimensionMismatch, "distribution size != vocab size");
  }
  table_.at(state_index) = std::move(dist);
}

bool TabularPolicy::Has(std::int64_t state_index) const {
  return state_index >= 0 &&
         state_index < static_cast<std::int64_t>(table_.size()) &&
         table_[state_index].size() == vocab_size_;
}

Eigen::VectorXd TabularPolicy::ActionDistribution(
    const TokenMdp& mdp, int prompt, std::span<const int> prefix) const {
  CheckPrefix(mdp, prompt, prefix);
  const std::int64_t index = mdp.StateIndex(prompt, prefix);
  if (!Has(index)) {
    Fail(ErrorCode::kUnknownState,
         "tabular policy has no entry for state " + std::to_string(index));
  }
  return table_[index];
}

void WritePolicyRecord(std::ostream& out, const SoftmaxLinearPolicy& policy) {
  const Eigen::MatrixXd& w = policy.weights();
  out << kSoftmaxHeader << ' ' << w.rows() << ' ' << w.cols() << ' '
      << FormatDouble(policy.temperature()) << ' ' << policy.context_len()
      << '\n';
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      if (c > 0) out << ' ';
      out << FormatDouble(w(r, c));
    }
    out << '\n';
  }
}

SoftmaxLinearPolicy ReadSoftmaxPolicyRecord(std::istream& in) {
  std::string header;
  std::getline(in, header);
  const std::string prefix = kSoftmaxHeader;
  if (header.rfind(prefix, 0) != 0) {
    Fail(ErrorCode::kIo, "not a softmax-linear policy record");
  }
  std::istringstream fields(header.substr(prefix.size()));
  Eigen::Index rows = 0, cols = 0;
  std::string temperature;
  int context_len = 0;
  fields >> rows >> cols >> temperature >> context_len;
  if (!fields || rows < 0 || cols < 1) {
    Fail(ErrorCode::kIo, "malformed policy header");
  }
  Eigen::MatrixXd w(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      std::string token;
      if (!(in >> token)) Fail(ErrorCode::kIo, "truncated policy record");
      w(r, c) = std::strtod(token.c_str(), nullptr);
    }
  }
  in.ignore(1);
  return SoftmaxLinearPolicy(std::move(w),
                             std::strtod(temperature.c_str(), nullptr),
                             context_len);
}

void WritePolicyRecord(std::ostream& out, const TabularPolicy& policy) {
  const auto& table = policy.table();
  std::size_t defined = 0;
  int vocab = 0;
  for (const auto& entry : table) {
    if (entry.size() > 0) {
      ++defined;
      vocab = static_cast<int>(entry.size());
    }
  }
  out << kTabularHeader << ' ' << table.size() << ' ' << defined << ' ' << vocab
      << '\n';
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (table[i].size() == 0) continue;
    out << i;
    for (Eigen::Index a = 0; a < table[i].size(); ++a) {
      out << ' ' << FormatDouble(table[i][a]);
    }
    out << '\n';
  }
}

TabularPolicy ReadTabularPolicyRecord(std::istream& in, const TokenMdp& mdp) {
  std::string header;
  std::getline(in, header);
  const std::string prefix = kTabularHeader;
  if (header.rfind(prefix, 0) != 0) {
    Fail(ErrorCode::kIo, "not a tabular policy record");
  }
  std::istringstream fields(header.substr(prefix.size()));
  std::size_t size = 0, defined = 0;
  int vocab = 0;
  fields >> size >> defined >> vocab;
  TabularPolicy policy(mdp);
  if (size != policy.table().size() || (defined > 0 && vocab != mdp.vocab_size())) {
    Fail(ErrorCode::kDimensionMismatch, "tabular record does not match mdp");
  }
  for (std::size_t k = 0; k < defined; ++k) {
    std::int64_t index = 0;
    if (!(in >> index)) Fail(ErrorCode::kIo, "truncated tabular record");
    Eigen::VectorXd dist(vocab);
    for (int a = 0; a < vocab; ++a) {
      std::string token;
      if (!(in >> token)) Fail(ErrorCode::kIo, "truncated tabular record");
      dist[a] = std::strtod(token.c_str(), nullptr);
    }
    policy.SetByIndex(index, std::move(dist));
  }
  in.ignore(1);
  return policy;
}

}  // namespace pbkd
