#ifndef PBKD_MM_H_
#define PBKD_MM_H_

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/evaluation.h"
#include "pbkd/feature_model.h"
#include "pbkd/mdp.h"
#include "pbkd/offline.h"
#include "pbkd/online.h"
#include "pbkd/policy.h"
#include "pbkd/preference_data.h"

namespace pbkd {

// f(prompt, prefix, action), a state-action value.
using QFunction =
    std::function<double(int prompt, std::span<const int> prefix, int action)>;

// f_w(s, a) = w^T psi_q(s, a). An empty feature map means the mdp's psi.
struct LinearQ {
  Eigen::VectorXd w;
  double bound = 1.0;
  StepFeatureFn features;
};

QFunction AsQFunction(const TokenMdp& mdp, const LinearQ& f);

// Q values over the prefix tree, indexed [prompt][node][action] with the
// per-prompt node index LevelOffset(h) + code.
using QTable = std::vector<std::vector<Eigen::VectorXd>>;

QFunction AsQFunction(const TokenMdp& mdp, const QTable& table);

// Q^{teacher}_r by backward induction:
//   Q(s_h, a_h) = r(s_h, a_h) + gamma E_{a' ~ teacher(.|s_{h+1})} Q(s_{h+1}, a'),
// with Q = r at the last step. Throws kCapExceeded.
QTable QTeacherExact(const TokenMdp& mdp, const Policy& teacher,
                     const StepRewardFn& reward);

// r(f)(s, a) = f(s, a) - gamma E_{a' ~ teacher(.|s')} f(s', a'), where s' is s
// extended by a; no continuation at the last step.
double InducedReward(const TokenMdp& mdp, const Policy& teacher,
                     const QFunction& f, int prompt,
                     std::span<const int> prefix, int action);

// E_{x, tau ~ student} sum_h gamma^h (E_{a ~ teacher(.|s_h)} f(s_h, a) - f(s_h, a_h)).
// With f = Q^{teacher}_r this equals J(teacher, r) - J(student, r).
double PdlGap(const TokenMdp& mdp, const Policy& teacher, const Policy& student,
              const QFunction& f, ValueMode mode, int n_samples, Rng& rng);

// Feature model of the induced reward class {r(f_w)}: both maps are
//   psi_q(s, a) - gamma E_teacher psi_q(s', .),
// i.e. r(f_w) = w^T pref. Since Q^teacher of r(f_w) is f_w itself,
// w^T (E_teacher - E_student) sum_h gamma^h pref = PdlGap(f_w). Per-state
// values are tabulated up front when the mdp is enumerable. The teacher must
// outlive the model.
FeatureModel MmFeatureModel(const TokenMdp& mdp, const Policy& teacher,
                            const StepFeatureFn& psi_q, int dim);
FeatureModel MmFeatureModel(const TokenMdp& mdp, const Policy& teacher);

// psi_q(s, a) = psi(s, a) + gamma E_teacher psi_q(s', .): the teacher's
// successor features. With this map r(f_w) = w^T psi exactly, so the
// induced class contains every linear reward. Needs an enumerable mdp.
StepFeatureFn SuccessorFeatureMap(const TokenMdp& mdp, const Policy& teacher);

enum class MmMode { kOffline, kOnline };

struct MmConfig {
  MmMode mode = MmMode::kOffline;
  OfflineConfig offline;
  OnlineConfig online;
};

struct MmResult {
  SoftmaxLinearPolicy policy;
  LinearQ q;
  // Offline rounds: gap is the PDL gap, theta_norm is ||w||.
  std::vector<SolverTraceRow> offline_trace;
  std::vector<OnlineTraceRow> online_trace;
  PreferenceDataset dataset;
};

// Moment-matching PbKD over the linear Q class `psi_q` (empty: mdp psi).
// Offline mode runs the alternating solver on `dataset`; online mode seeds
// D_0 with `dataset` (may be empty) and collects pairs as the online solver
// does. `bound` of the Q class comes from the active sub-config.
MmResult SolveMm(const TokenMdp& mdp, const Policy& teacher,
                 const PreferenceDataset& dataset,
                 const SoftmaxLinearPolicy& init, const MmConfig& config,
                 const LinearReward* rstar = nullptr,
                 const StepFeatureFn& psi_q = {}, int dim = 0);

}  // namespace pbkd

#endif  // PBKD_MM_H_
