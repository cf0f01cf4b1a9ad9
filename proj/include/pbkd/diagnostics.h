#ifndef PBKD_DIAGNOSTICS_H_
#define PBKD_DIAGNOSTICS_H_

#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "pbkd/mdp.h"
#include "pbkd/policy.h"
#include "pbkd/preference_data.h"
#include "pbkd/reward_model.h"
#include "pbkd/rng.h"

namespace pbkd {

class CovarianceAccumulator;

enum class SigmaSource { kOffline, kOnline };

struct CovarianceMatrix {
  Eigen::MatrixXd sigma;
  double ridge = 0.0;
  double bound = 1.0;
  SigmaSource source = SigmaSource::kOffline;
};

// Throws kNonFinite unless symmetric within 1e-10 and Cholesky succeeds.
void CheckCovariance(const CovarianceMatrix& sigma);

// (ridge / B) I + mean of (phi(tau0) - phi(tau1))(...)^T over the dataset.
// Throws kEmptyDataset.
CovarianceMatrix BuildSigmaOffline(const PreferenceDataset& dataset,
                                   double ridge, double bound);
// Same with the expectation under x ~ d0, tau0 ~ mu0, tau1 ~ mu1 taken by
// enumeration. Throws kCapExceeded.
CovarianceMatrix BuildSigmaOffline(const TokenMdp& mdp, const Policy& mu0,
                                   const Policy& mu1, double ridge,
                                   double bound);
CovarianceMatrix SigmaFromOnline(const CovarianceAccumulator& acc, double bound);

// sqrt(v^T Sigma^{-1} v). Throws kDimensionMismatch.
double WeightedNorm(const Eigen::VectorXd& v, const CovarianceMatrix& sigma);

// sqrt(2) ||phi(d0, teacher) - phi(d0, pistar)||_{Sigma^{-1}}.
double ConcentrabilityLinear(const TokenMdp& mdp, const Policy& teacher,
                             const Policy& pistar, const CovarianceMatrix& sigma);

struct ConcentrabilityProbe {
  // Largest sampled ratio among admissible probes.
  double sup_ratio = 0.0;
  int admissible = 0;
  // Probes skipped because ridge * ||u||^2 > u^T M u; there the linear bound
  // does not apply.
  int skipped = 0;
};

// Samples theta uniformly in the ball and evaluates the concentrability ratio
//   u^T (phi(teacher) - phi(pistar)) / sqrt(u^T M u),  u = theta* - theta,
// with M = sigma - (ridge / B) I the data second moment.
ConcentrabilityProbe SampleConcentrability(const TokenMdp& mdp,
                                           const Policy& teacher,
                                           const Policy& pistar,
                                           const Eigen::VectorXd& theta_star,
                                           const CovarianceMatrix& sigma,
                                           int probes, Rng& rng);

// Worst case of 1 / (p (1 - p)) over |r(tau0) - r(tau1)| <= 2B:
// e^{2B} + e^{-2B} + 2.
double KappaLinear(double bound);

struct LemmaRow {
  int trial = 0;
  double lhs = 0.0;
  double rhs = 0.0;
  // rhs - lhs; negative means the inequality failed.
  double margin = 0.0;
  bool violation = false;
};

struct LemmaReport {
  std::vector<LemmaRow> rows;
  int violations = 0;
  double min_margin = 0.0;
  // l1tv only: violations with kappa halved. Informational.
  int sharpness_violations = 0;
};

// Random tiny instances (V <= 3, H <= 3, up to 3 prompts, random B, theta,
// theta*, annotators). Both sides are exact enumerations over (x, tau0, tau1).
//   l1tv:  E|dr - dr*|^2 <= kappa^2 E TV^2
//   tvlog: E TV^2 <= -2 log E_{o ~ P*} exp(l_r),  l_r = 1/2 log(P_r / P*)
LemmaReport LemmaL1TvCheck(Rng& rng, int trials, double tolerance = 1e-9);
LemmaReport LemmaTvLogExpCheck(Rng& rng, int trials, double tolerance = 1e-9);

// J(pistar, r*) - J(student, r*), exact.
double Suboptimality(const TokenMdp& mdp, const Eigen::VectorXd& theta_star,
                     const Policy& pistar, const Policy& student);

struct RegretCurve {
  std::vector<double> per_step;
  std::vector<double> cumulative;
};
RegretCurve ComputeRegretCurve(const TokenMdp& mdp,
                               std::span<const Policy* const> policies,
                               const Eigen::VectorXd& theta_star,
                               const Policy& pistar);
RegretCurve RegretFromValues(std::span<const double> values, double optimum);

struct RateFit {
  std::vector<double> x;
  std::vector<double> y;
  double slope = 0.0;
  double intercept = 0.0;
  double residual_rms = 0.0;
};

// OLS of log y on log x. Throws kNonPositivePoint for a non-positive or
// non-finite coordinate, kConfigInvalid with fewer than 3 points.
RateFit FitRate(std::span<const double> x, std::span<const double> y);

struct WorstCaseGap {
  double gap = 0.0;
  Eigen::VectorXd theta;
  // Multiplier at which the Lagrangian maximizer became feasible.
  double beta = 0.0;
};

// max theta^T direction over {||theta|| <= B, loglik(theta) >= max_loglik - zeta}.
// The constraint is handled by bisection on the multiplier of the
// Lagrangian form; each multiplier is maximized from `restarts` random
// starts (the first one at the origin).
WorstCaseGap WorstCaseConfidenceGap(const Eigen::VectorXd& direction,
                                    const PreferenceMatrix& data,
                                    double max_loglik, double zeta,
                                    double bound, int restarts, Rng& rng);

// ||g_fd - g|| / max(||g_fd||, ||g||, floor) with central differences of
// step h along each coordinate of x.
double GradientRelativeError(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, const Eigen::VectorXd& analytic, double h,
    double floor = 1e-12);

enum class GradientCheckKind { kClippedSurrogate, kMle, kRewardStep };

std::string_view GradientCheckName(GradientCheckKind kind);

struct GradientCheckReport {
  GradientCheckKind kind;
  int configurations = 0;
  double max_relative_error = 0.0;
  // 1e-6 for the likelihood, 1e-4 otherwise.
  double tolerance = 0.0;
  bool passed() const { return max_relative_error <= tolerance; }
};

// Random configurations checked against central differences. Clipped
// configurations with a ratio within 1e-3 of a kink are redrawn.
GradientCheckReport RunGradientCheck(GradientCheckKind kind,
                                     int configurations, Rng& rng);

}  // namespace pbkd

#endif  // PBKD_DIAGNOSTICS_H_
