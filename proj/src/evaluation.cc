#include "pbkd/evaluation.h"

#include <cmath>
#include <string>

#include "pbkd/error.h"

namespace pbkd {
namespace {

void CheckTheta(const TokenMdp& mdp, const Eigen::VectorXd& theta) {
  if (theta.size() != mdp.feature_dim()) {
    Fail(ErrorCode::kDimensionMismatch,
         "reward dimension " + std::to_string(theta.size()) +
             " != feature dimension " + std::to_string(mdp.feature_dim()));
  }
}

// Depth-first enumeration of complete trajectories with their probability
// and discounted feature sum.
void EnumerateValue(const TokenMdp& mdp,
                    const std::vector<Eigen::VectorXd>& table, int prompt,
                    std::vector<int>& prefix, std::int64_t code, double prob,
                    const Eigen::VectorXd& phi, const Eigen::VectorXd& theta,
                    double& total) {
  const int h = static_cast<int>(prefix.size());
  if (h == mdp.horizon()) {
    total += prob * theta.dot(phi);
    return;
  }
  const Eigen::VectorXd& dist = table[mdp.LevelOffset(h) + code];
  for (int a = 0; a < mdp.vocab_size(); ++a) {
    if (dist[a] == 0.0) continue;
    Eigen::VectorXd next =
        phi + mdp.Discount(h) * mdp.StepFeatures(prompt, prefix, a);
    prefix.push_back(a);
    EnumerateValue(mdp, table, prompt, prefix, code * mdp.vocab_size() + a,
                   prob * dist[a], next, theta, total);
    prefix.pop_back();
  }
}

}  // namespace

StepRewardFn LinearStepReward(const TokenMdp& mdp,
                              const Eigen::VectorXd& theta) {
  CheckTheta(mdp, theta);
  return [&mdp, theta](int prompt, std::span<const int> prefix, int action) {
    return theta.dot(mdp.StepFeatures(prompt, prefix, action));
  };
}

std::vector<int> DecodePrefix(const TokenMdp& mdp, int h, std::int64_t code) {
  std::vector<int> prefix(h);
  for (int i = h - 1; i >= 0; --i) {
    prefix[i] = static_cast<int>(code % mdp.vocab_size());
    code /= mdp.vocab_size();
  }
  return prefix;
}

std::vector<Eigen::VectorXd> PolicyTable(const TokenMdp& mdp,
                                         const Policy& policy, int prompt) {
  mdp.RequireEnumerable();
  std::vector<Eigen::VectorXd> table(mdp.NodesPerPrompt());
  for (int h = 0; h < mdp.horizon(); ++h) {
    const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
    for (std::int64_t code = 0; code < width; ++code) {
      table[mdp.LevelOffset(h) + code] =
          policy.ActionDistribution(mdp, prompt, DecodePrefix(mdp, h, code));
    }
  }
  return table;
}

std::vector<double> ReachProbabilities(
    const TokenMdp& mdp, const std::vector<Eigen::VectorXd>& policy_table) {
  const int V = mdp.vocab_size();
  std::vector<double> reach(mdp.NodesPerPrompt(), 0.0);
  reach[0] = 1.0;
  for (int h = 0; h + 1 < mdp.horizon(); ++h) {
    const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
    for (std::int64_t code = 0; code < width; ++code) {
      const std::int64_t node = mdp.LevelOffset(h) + code;
      for (int a = 0; a < V; ++a) {
        reach[mdp.LevelOffset(h + 1) + code * V + a] =
            reach[node] * policy_table[node][a];
      }
    }
  }
  return reach;
}

double ExactValue(const TokenMdp& mdp, const Policy& policy,
                  const Eigen::VectorXd& theta) {
  CheckTheta(mdp, theta);
  mdp.RequireEnumerable();
  double value = 0.0;
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    if (mdp.prompt_distribution()[x] == 0.0) continue;
    const auto table = PolicyTable(mdp, policy, x);
    double total = 0.0;
    std::vector<int> prefix;
    EnumerateValue(mdp, table, x, prefix, 0, 1.0,
                   Eigen::VectorXd::Zero(mdp.feature_dim()), theta, total);
    value += mdp.prompt_distribution()[x] * total;
  }
  return value;
}

McEstimate McValue(const TokenMdp& mdp, const Policy& policy,
                   const Eigen::VectorXd& theta, int n_samples, Rng& rng) {
  CheckTheta(mdp, theta);
  if (n_samples < 1) Fail(ErrorCode::kConfigInvalid, "n_samples must be >= 1");
  double sum = 0.0;
  double sum_sq = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const int x = mdp.SamplePrompt(rng);
    const double r = theta.dot(Rollout(mdp, policy, x, rng).features);
    sum += r;
    sum_sq += r * r;
  }
  McEstimate est;
  est.mean = sum / n_samples;
  if (n_samples > 1) {
    const double var =
        std::max(0.0, (sum_sq - n_samples * est.mean * est.mean) /
                          (n_samples - 1));
    est.std_error = std::sqrt(var / n_samples);
  }
  return est;
}

Eigen::VectorXd ExpectedStepFeatures(
    const TokenMdp& mdp, const Policy& policy,
    const std::function<Eigen::VectorXd(int, std::span<const int>, int)>&
        step_features,
    int dim) {
  mdp.RequireEnumerable();
  Eigen::VectorXd total = Eigen::VectorXd::Zero(dim);
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    const double px = mdp.prompt_distribution()[x];
    if (px == 0.0) continue;
    const auto table = PolicyTable(mdp, policy, x);
    const auto reach = ReachProbabilities(mdp, table);
    Eigen::VectorXd per_prompt = Eigen::VectorXd::Zero(dim);
    for (int h = 0; h < mdp.horizon(); ++h) {
      const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
      for (std::int64_t code = 0; code < width; ++code) {
        const std::int64_t node = mdp.LevelOffset(h) + code;
        if (reach[node] == 0.0) continue;
        const std::vector<int> prefix = DecodePrefix(mdp, h, code);
        for (int a = 0; a < mdp.vocab_size(); ++a) {
          const double w = reach[node] * table[node][a];
          if (w == 0.0) continue;
          per_prompt += (w * mdp.Discount(h)) * step_features(x, prefix, a);
        }
      }
    }
    total += px * per_prompt;
  }
  return total;
}

Eigen::VectorXd FeatureExpectation(const TokenMdp& mdp, const Policy& policy) {
  return ExpectedStepFeatures(
      mdp, policy,
      [&mdp](int x, std::span<const int> s, int a) {
        return mdp.StepFeatures(x, s, a);
      },
      mdp.feature_dim());
}

Eigen::VectorXd FeatureExpectationForPrompt(const TokenMdp& mdp,
                                            const Policy& policy, int prompt) {
  mdp.RequireEnumerable();
  const auto table = PolicyTable(mdp, policy, prompt);
  const auto reach = ReachProbabilities(mdp, table);
  Eigen::VectorXd out = Eigen::VectorXd::Zero(mdp.feature_dim());
  for (int h = 0; h < mdp.horizon(); ++h) {
    const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
    for (std::int64_t code = 0; code < width; ++code) {
      const std::int64_t node = mdp.LevelOffset(h) + code;
      if (reach[node] == 0.0) continue;
      const std::vector<int> prefix = DecodePrefix(mdp, h, code);
      for (int a = 0; a < mdp.vocab_size(); ++a) {
        const double w = reach[node] * table[node][a];
        if (w == 0.0) continue;
        out += (w * mdp.Discount(h)) * mdp.StepFeatures(prompt, prefix, a);
      }
    }
  }
  return out;
}

Eigen::VectorXd FeatureExpectation(const TokenMdp& mdp, const Policy& policy,
                                   ValueMode mode, int n_samples, Rng& rng) {
  if (mode == ValueMode::kExact) return FeatureExpectation(mdp, policy);
  if (n_samples < 1) Fail(ErrorCode::kConfigInvalid, "n_samples must be >= 1");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(mdp.feature_dim());
  for (int i = 0; i < n_samples; ++i) {
    const int x = mdp.SamplePrompt(rng);
    sum += Rollout(mdp, policy, x, rng).features;
  }
  return sum / n_samples;
}

namespace {

// Backward pass over the prefix tree shared by the plain and natural
// gradients. `weight(px, reach, prob)` scales the advantage of each action.
template <typename Weight>
Eigen::MatrixXd AdvantageAccumulate(const TokenMdp& mdp,
                                    const SoftmaxLinearPolicy& policy,
                                    const StepRewardFn& step_reward,
                                    Weight weight) {
  mdp.RequireEnumerable();
  const int V = mdp.vocab_size();
  const int H = mdp.horizon();
  Eigen::MatrixXd grad =
      Eigen::MatrixXd::Zero(policy.weights().rows(), policy.weights().cols());
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    const double px = mdp.prompt_distribution()[x];
    if (px == 0.0) continue;
    const auto table = PolicyTable(mdp, policy, x);
    const auto reach = ReachProbabilities(mdp, table);
    std::vector<double> value(mdp.NodesPerPrompt(), 0.0);
    for (int h = H - 1; h >= 0; --h) {
      const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
      for (std::int64_t code = 0; code < width; ++code) {
        const std::int64_t node = mdp.LevelOffset(h) + code;
        const std::vector<int> prefix = DecodePrefix(mdp, h, code);
        Eigen::VectorXd q(V);
        for (int a = 0; a < V; ++a) {
          q[a] = mdp.Discount(h) * step_reward(x, prefix, a);
          if (h + 1 < H) q[a] += value[mdp.LevelOffset(h + 1) + code * V + a];
        }
        const Eigen::VectorXd& probs = table[node];
        const double v = probs.dot(q);
        value[node] = v;
        const int row = SoftmaxLinearPolicy::StateFeatureIndex(mdp, x, prefix);
        for (int a = 0; a < V; ++a) {
          grad(row, a) += weight(px, reach[node], probs[a]) * (q[a] - v);
        }
      }
    }
  }
  return grad;
}

}  // namespace

Eigen::MatrixXd ExactNaturalGradient(const TokenMdp& mdp,
                                     const SoftmaxLinearPolicy& policy,
                                     const StepRewardFn& step_reward) {
  return AdvantageAccumulate(mdp, policy, step_reward,
                             [](double px, double, double) { return px; });
}

Eigen::MatrixXd ExactPolicyGradient(const TokenMdp& mdp,
                                    const SoftmaxLinearPolicy& policy,
                                    const StepRewardFn& step_reward) {
  const double inv_temp = 1.0 / policy.temperature();
  return AdvantageAccumulate(
      mdp, policy, step_reward,
      [inv_temp](double px, double reach, double prob) {
        return px * reach * prob * inv_temp;
      });
}

Eigen::MatrixXd ExactPolicyGradient(const TokenMdp& mdp,
                                    const SoftmaxLinearPolicy& policy,
                                    const Eigen::VectorXd& theta) {
  return ExactPolicyGradient(mdp, policy, LinearStepReward(mdp, theta));
}

std::vector<double> LeaveOneOutCentered(std::span<const double> returns,
                                        bool baseline) {
  std::vector<double> out(returns.begin(), returns.end());
  const std::size_t n = returns.size();
  if (!baseline || n < 2) return out;
  double total = 0.0;
  for (double r : returns) total += r;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = returns[i] - (total - returns[i]) / static_cast<double>(n - 1);
  }
  return out;
}

Eigen::MatrixXd ScoreFunctionGradient(const TokenMdp& mdp,
                                      const SoftmaxLinearPolicy& policy,
                                      std::span<const Trajectory> batch,
                                      std::span<const double> returns,
                                      bool baseline) {
  if (batch.size() != returns.size()) {
    Fail(ErrorCode::kDimensionMismatch, "batch and returns differ in size");
  }
  Eigen::MatrixXd grad =
      Eigen::MatrixXd::Zero(policy.weights().rows(), policy.weights().cols());
  if (batch.empty()) return grad;
  const std::vector<double> adv = LeaveOneOutCentered(returns, baseline);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    policy.AccumulateGradLogProb(mdp, batch[i], adv[i] * inv_n, grad);
  }
  return grad;
}

std::vector<std::vector<Eigen::VectorXd>> OptimalQValues(
    const TokenMdp& mdp, const Eigen::VectorXd& theta) {
  CheckTheta(mdp, theta);
  mdp.RequireEnumerable();
  const int V = mdp.vocab_size();
  const int H = mdp.horizon();
  std::vector<std::vector<Eigen::VectorXd>> q(mdp.prompt_count());
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    q[x].resize(mdp.NodesPerPrompt());
    std::vector<double> best(mdp.NodesPerPrompt(), 0.0);
    for (int h = H - 1; h >= 0; --h) {
      const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
      for (std::int64_t code = 0; code < width; ++code) {
        const std::int64_t node = mdp.LevelOffset(h) + code;
        const std::vector<int> prefix = DecodePrefix(mdp, h, code);
        Eigen::VectorXd qs(V);
        for (int a = 0; a < V; ++a) {
          qs[a] = mdp.Discount(h) * theta.dot(mdp.StepFeatures(x, prefix, a));
          if (h + 1 < H) qs[a] += best[mdp.LevelOffset(h + 1) + code * V + a];
        }
        best[node] = qs.maxCoeff();
        q[x][node] = std::move(qs);
      }
    }
  }
  return q;
}

TabularPolicy DpOptimalPolicy(const TokenMdp& mdp,
                              const Eigen::VectorXd& theta) {
  const auto q = OptimalQValues(mdp, theta);
  TabularPolicy policy(mdp);
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    for (std::int64_t node = 0; node < mdp.NodesPerPrompt(); ++node) {
      const Eigen::VectorXd& qs = q[x][node];
      int best = 0;
      for (int a = 1; a < qs.size(); ++a) {
        if (qs[a] > qs[best]) best = a;
      }
      Eigen::VectorXd dist = Eigen::VectorXd::Zero(mdp.vocab_size());
      dist[best] = 1.0;
      policy.SetByIndex(x * mdp.NodesPerPrompt() + node, std::move(dist));
    }
  }
  return policy;
}

TabularPolicy SoftenedOptimalPolicy(const TokenMdp& mdp,
                                    const Eigen::VectorXd& theta,
                                    double temperature) {
  if (!(temperature > 0.0)) {
    Fail(ErrorCode::kConfigInvalid, "teacher temperature must be positive");
  }
  const auto q = OptimalQValues(mdp, theta);
  TabularPolicy policy(mdp);
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    for (std::int64_t node = 0; node < mdp.NodesPerPrompt(); ++node) {
      policy.SetByIndex(x * mdp.NodesPerPrompt() + node,
                        Softmax(q[x][node] / temperature));
    }
  }
  return policy;
}

}  // namespace pbkd
