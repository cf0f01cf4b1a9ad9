#include "pbkd/mm.h"

#include <memory>

#include "pbkd/error.h"

namespace pbkd {
namespace {

StepFeatureFn DefaultPsi(const TokenMdp& mdp) {
  return [&mdp](int x, std::span<const int> s, int a) {
    return mdp.StepFeatures(x, s, a);
  };
}

std::int64_t NodeOf(const TokenMdp& mdp, int prompt,
                    std::span<const int> prefix) {
  return mdp.StateIndex(prompt, prefix) -
         static_cast<std::int64_t>(prompt) * mdp.NodesPerPrompt();
}

// Calls fn(x, h, node, prefix) for every state, deepest level first.
template <typename Fn>
void ForEachStateBackward(const TokenMdp& mdp, Fn fn) {
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    for (int h = mdp.horizon() - 1; h >= 0; --h) {
      const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
      for (std::int64_t code = 0; code < width; ++code) {
        fn(x, h, mdp.LevelOffset(h) + code, DecodePrefix(mdp, h, code));
      }
    }
  }
}

// Rows per (state index * V + action).
using StepTable = std::vector<Eigen::VectorXd>;

StepFeatureFn TableLookup(const TokenMdp& mdp,
                          std::shared_ptr<const StepTable> table) {
  const int V = mdp.vocab_size();
  return [&mdp, table, V](int x, std::span<const int> s, int a) {
    return (*table)[mdp.StateIndex(x, s) * V + a];
  };
}

}  // namespace

QFunction AsQFunction(const TokenMdp& mdp, const LinearQ& f) {
  const StepFeatureFn psi = f.features ? f.features : DefaultPsi(mdp);
  const Eigen::VectorXd w = f.w;
  return [psi, w](int x, std::span<const int> s, int a) {
    return w.dot(psi(x, s, a));
  };
}

QFunction AsQFunction(const TokenMdp& mdp, const QTable& table) {
  return [&mdp, &table](int x, std::span<const int> s, int a) {
    return table[x][NodeOf(mdp, x, s)][a];
  };
}

QTable QTeacherExact(const TokenMdp& mdp, const Policy& teacher,
                     const StepRewardFn& reward) {
  mdp.RequireEnumerable();
  const int V = mdp.vocab_size();
  const int H = mdp.horizon();
  QTable q(mdp.prompt_count());
  std::vector<std::vector<Eigen::VectorXd>> pi(mdp.prompt_count());
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    q[x].resize(mdp.NodesPerPrompt());
    pi[x] = PolicyTable(mdp, teacher, x);
  }
  ForEachStateBackward(mdp, [&](int x, int h, std::int64_t node,
                                const std::vector<int>& prefix) {
    const std::int64_t code = node - mdp.LevelOffset(h);
    Eigen::VectorXd qs(V);
    for (int a = 0; a < V; ++a) {
      qs[a] = reward(x, prefix, a);
      if (h + 1 < H) {
        const std::int64_t child = mdp.LevelOffset(h + 1) + code * V + a;
        qs[a] += mdp.gamma() * pi[x][child].dot(q[x][child]);
      }
    }
    q[x][node] = std::move(qs);
  });
  return q;
}

double InducedReward(const TokenMdp& mdp, const Policy& teacher,
                     const QFunction& f, int prompt,
                     std::span<const int> prefix, int action) {
  double value = f(prompt, prefix, action);
  if (static_cast<int>(prefix.size()) + 1 < mdp.horizon() && mdp.gamma() != 0.0) {
    std::vector<int> next(prefix.begin(), prefix.end());
    next.push_back(action);
    const Eigen::VectorXd p = teacher.ActionDistribution(mdp, prompt, next);
    double cont = 0.0;
    for (int a = 0; a < mdp.vocab_size(); ++a) {
      if (p[a] != 0.0) cont += p[a] * f(prompt, next, a);
    }
    value -= mdp.gamma() * cont;
  }
  return value;
}

double PdlGap(const TokenMdp& mdp, const Policy& teacher, const Policy& student,
              const QFunction& f, ValueMode mode, int n_samples, Rng& rng) {
  const int V = mdp.vocab_size();
  // E_teacher f(s, .) - f(s, a) at one state.
  auto advantage_row = [&](int x, std::span<const int> s) {
    const Eigen::VectorXd pe = teacher.ActionDistribution(mdp, x, s);
    Eigen::VectorXd fs(V);
    for (int a = 0; a < V; ++a) fs[a] = f(x, s, a);
    return Eigen::VectorXd(Eigen::VectorXd::Constant(V, pe.dot(fs)) - fs);
  };
  if (mode == ValueMode::kExact) {
    mdp.RequireEnumerable();
    double total = 0.0;
    for (int x = 0; x < mdp.prompt_count(); ++x) {
      const double px = mdp.prompt_distribution()[x];
      if (px == 0.0) continue;
      const auto table = PolicyTable(mdp, student, x);
      const auto reach = ReachProbabilities(mdp, table);
      double per_prompt = 0.0;
      for (int h = 0; h < mdp.horizon(); ++h) {
        if (mdp.Discount(h) == 0.0) break;
        const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
        for (std::int64_t code = 0; code < width; ++code) {
          const std::int64_t node = mdp.LevelOffset(h) + code;
          if (reach[node] == 0.0) continue;
          const std::vector<int> prefix = DecodePrefix(mdp, h, code);
          per_prompt += reach[node] * mdp.Discount(h) *
                        table[node].dot(advantage_row(x, prefix));
        }
      }
      total += px * per_prompt;
    }
    return total;
  }
  if (n_samples < 1) Fail(ErrorCode::kConfigInvalid, "n_samples must be >= 1");
  double total = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const int x = mdp.SamplePrompt(rng);
    const Trajectory t = Rollout(mdp, student, x, rng);
    std::span<const int> acts(t.actions);
    for (int h = 0; h < mdp.horizon(); ++h) {
      if (mdp.Discount(h) == 0.0) break;
      total += mdp.Discount(h) * advantage_row(x, acts.subspan(0, h))[acts[h]];
    }
  }
  return total / n_samples;
}

FeatureModel MmFeatureModel(const TokenMdp& mdp, const Policy& teacher,
                            const StepFeatureFn& psi_q, int dim) {
  if (!psi_q) return MmFeatureModel(mdp, teacher);
  const int V = mdp.vocab_size();
  const int H = mdp.horizon();
  const double gamma = mdp.gamma();
  auto expected_next = [&mdp, &teacher, psi_q, dim, V](int x, std::vector<int> s) {
    const Eigen::VectorXd p = teacher.ActionDistribution(mdp, x, s);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(dim);
    for (int a = 0; a < V; ++a) {
      if (p[a] != 0.0) out += p[a] * psi_q(x, s, a);
    }
    return out;
  };
  auto pref = [psi_q, expected_next, gamma, H](int x, std::span<const int> s,
                                               int a) {
    Eigen::VectorXd v = psi_q(x, s, a);
    if (static_cast<int>(s.size()) + 1 < H && gamma != 0.0) {
      std::vector<int> next(s.begin(), s.end());
      next.push_back(a);
      v -= gamma * expected_next(x, std::move(next));
    }
    return v;
  };
  FeatureModel model;
  model.dim = dim;
  if (!mdp.Enumerable()) {
    model.pref = pref;
    model.gap = pref;
    return model;
  }
  auto pref_tab = std::make_shared<StepTable>(mdp.prompt_count() *
                                              mdp.NodesPerPrompt() * V);
  ForEachStateBackward(mdp, [&](int x, int, std::int64_t,
                                const std::vector<int>& prefix) {
    const std::int64_t base = mdp.StateIndex(x, prefix) * V;
    for (int a = 0; a < V; ++a) {
      (*pref_tab)[base + a] = pref(x, prefix, a);
    }
  });
  model.pref = TableLookup(mdp, pref_tab);
  model.gap = model.pref;
  return model;
}

FeatureModel MmFeatureModel(const TokenMdp& mdp, const Policy& teacher) {
  return MmFeatureModel(mdp, teacher, DefaultPsi(mdp), mdp.feature_dim());
}

StepFeatureFn SuccessorFeatureMap(const TokenMdp& mdp, const Policy& teacher) {
  mdp.RequireEnumerable();
  const int V = mdp.vocab_size();
  const int H = mdp.horizon();
  auto table = std::make_shared<StepTable>(mdp.prompt_count() *
                                           mdp.NodesPerPrompt() * V);
  std::vector<std::vector<Eigen::VectorXd>> pi(mdp.prompt_count());
  for (int x = 0; x < mdp.prompt_count(); ++x) pi[x] = PolicyTable(mdp, teacher, x);
  ForEachStateBackward(mdp, [&](int x, int h, std::int64_t node,
                                const std::vector<int>& prefix) {
    const std::int64_t base = mdp.StateIndex(x, prefix) * V;
    const std::int64_t code = node - mdp.LevelOffset(h);
    for (int a = 0; a < V; ++a) {
      Eigen::VectorXd v = mdp.StepFeatures(x, prefix, a);
      if (h + 1 < H) {
        const std::int64_t child = mdp.LevelOffset(h + 1) + code * V + a;
        const std::int64_t child_base =
            (static_cast<std::int64_t>(x) * mdp.NodesPerPrompt() + child) * V;
        for (int b = 0; b < V; ++b) {
          if (pi[x][child][b] != 0.0) {
            v += mdp.gamma() * pi[x][child][b] * (*table)[child_base + b];
          }
        }
      }
      (*table)[base + a] = std::move(v);
    }
  });
  return TableLookup(mdp, table);
}

MmResult SolveMm(const TokenMdp& mdp, const Policy& teacher,
                 const PreferenceDataset& dataset,
                 const SoftmaxLinearPolicy& init, const MmConfig& config,
                 const LinearReward* rstar, const StepFeatureFn& psi_q,
                 int dim) {
  const StepFeatureFn features = psi_q ? psi_q : DefaultPsi(mdp);
  const int d = psi_q ? dim : mdp.feature_dim();
  if (d < 1) Fail(ErrorCode::kConfigInvalid, "mm.dim: must be >= 1");
  const FeatureModel model = MmFeatureModel(mdp, teacher, features, d);

  if (config.mode == MmMode::kOffline) {
    if (dataset.empty()) {
      Fail(ErrorCode::kEmptyDataset, "offline moment matching needs data");
    }
    const PreferenceMatrix data = BuildPreferenceMatrix(
        dataset, [&](const Trajectory& t) { return PrefFeatures(mdp, model, t); },
        d);
    const Eigen::VectorXd* theta_star = rstar ? &rstar->theta : nullptr;
    SolverResult r = SolveOfflineGeneric(mdp, teacher, model, data, init,
                                         config.offline, theta_star);
    return {std::move(r.policy), LinearQ{r.theta, config.offline.bound, psi_q},
            std::move(r.trace), {}, dataset};
  }
  OnlineWarmStart warm;
  if (!dataset.empty()) warm.data = &dataset;
  OnlineResult r =
      RunOnlineGeneric(mdp, teacher, model, init, config.online, rstar, warm);
  return {std::move(r.policy), LinearQ{r.theta, config.online.bound, psi_q},
          {}, std::move(r.trace), std::move(r.dataset)};
}

}  // namespace pbkd
