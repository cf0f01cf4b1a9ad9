#include "pbkd/diagnostics.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "pbkd/error.h"
#include "pbkd/evaluation.h"
#include "pbkd/offline.h"
#include "pbkd/online.h"

namespace pbkd {
namespace {

double TrajectoryProbability(const TokenMdp& mdp, const Policy& policy,
                             const Trajectory& t) {
  double p = 1.0;
  std::span<const int> a(t.actions);
  for (int h = 0; h < mdp.horizon() && p != 0.0; ++h) {
    p *= policy.ActionDistribution(mdp, t.prompt, a.subspan(0, h))[a[h]];
  }
  return p;
}

struct PromptSupport {
  std::vector<Eigen::VectorXd> features;
  std::vector<double> p0;
  std::vector<double> p1;
};

PromptSupport Support(const TokenMdp& mdp, const Policy& mu0, const Policy& mu1,
                      int x) {
  PromptSupport s;
  for (const Trajectory& t : EnumerateTrajectories(mdp, x)) {
    s.features.push_back(t.features);
    s.p0.push_back(TrajectoryProbability(mdp, mu0, t));
    s.p1.push_back(TrajectoryProbability(mdp, mu1, t));
  }
  return s;
}

// One random lemma instance, both annotators softmax with random weights.
struct LemmaInstance {
  TokenMdp mdp;
  double bound;
  Eigen::VectorXd theta;
  Eigen::VectorXd theta_star;
  std::vector<PromptSupport> support;
};

Eigen::VectorXd RandomInBall(int d, double radius, Rng& rng) {
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.Normal();
  return v * (radius * std::pow(rng.Uniform(), 1.0 / d) / v.norm());
}

SoftmaxLinearPolicy RandomPolicy(const TokenMdp& mdp, double scale, Rng& rng) {
  SoftmaxLinearPolicy p(mdp);
  for (double& w : p.mutable_weights().reshaped()) w = scale * rng.Normal();
  return p;
}

LemmaInstance DrawInstance(Rng& rng) {
  MdpSpec spec;
  spec.vocab_size = 2 + static_cast<int>(rng.Index(2));
  spec.horizon = 1 + static_cast<int>(rng.Index(3));
  spec.gamma = rng.Bernoulli(0.5) ? 1.0 : 0.5;
  spec.feature_dim = 2 + static_cast<int>(rng.Index(5));
  spec.prompt_count = 1 + static_cast<int>(rng.Index(3));
  spec.context_len = spec.horizon;
  spec.feature_seed = rng.engine()();
  TokenMdp mdp(spec);
  const double bound = 0.1 + 2.9 * rng.Uniform();
  const int d = spec.feature_dim;
  Eigen::VectorXd theta_star = RandomInBall(d, bound, rng);
  // Every fifth instance probes r = r*.
  Eigen::VectorXd theta =
      rng.Index(5) == 0 ? theta_star : RandomInBall(d, bound, rng);
  const SoftmaxLinearPolicy mu0 = RandomPolicy(mdp, 1.5, rng);
  const SoftmaxLinearPolicy mu1 = RandomPolicy(mdp, 1.5, rng);
  std::vector<PromptSupport> support;
  for (int x = 0; x < spec.prompt_count; ++x) {
    support.push_back(Support(mdp, mu0, mu1, x));
  }
  return {std::move(mdp), bound, std::move(theta), std::move(theta_star),
          std::move(support)};
}

// Calls fn(weight, theta^T dphi, theta*^T dphi) over all (x, tau0, tau1).
template <typename Fn>
void ForEachPair(const LemmaInstance& inst, Fn fn) {
  const auto& d0 = inst.mdp.prompt_distribution();
  for (std::size_t x = 0; x < inst.support.size(); ++x) {
    const PromptSupport& s = inst.support[x];
    for (std::size_t i = 0; i < s.features.size(); ++i) {
      for (std::size_t j = 0; j < s.features.size(); ++j) {
        const double w = d0[x] * s.p0[i] * s.p1[j];
        if (w == 0.0) continue;
        const Eigen::VectorXd diff = s.features[i] - s.features[j];
        fn(w, inst.theta.dot(diff), inst.theta_star.dot(diff));
      }
    }
  }
}

void Record(LemmaReport& report, int trial, double lhs, double rhs,
            double tolerance) {
  LemmaRow row{trial, lhs, rhs, rhs - lhs, lhs > rhs + tolerance};
  if (row.violation) ++report.violations;
  report.min_margin =
      report.rows.empty() ? row.margin : std::min(report.min_margin, row.margin);
  report.rows.push_back(row);
}

Eigen::Map<const Eigen::VectorXd> Flat(const Eigen::MatrixXd& m) {
  return {m.data(), m.size()};
}

}  // namespace

void CheckCovariance(const CovarianceMatrix& sigma) {
  const Eigen::MatrixXd& s = sigma.sigma;
  if (s.rows() != s.cols() || s.rows() == 0) {
    Fail(ErrorCode::kDimensionMismatch, "covariance must be square");
  }
  if (!s.allFinite()) Fail(ErrorCode::kNonFinite, "covariance has non-finite entries");
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-10) {
    Fail(ErrorCode::kNonFinite, "covariance is not symmetric");
  }
  if (Eigen::LLT<Eigen::MatrixXd>(s).info() != Eigen::Success) {
    Fail(ErrorCode::kNonFinite, "covariance is not positive definite");
  }
}

CovarianceMatrix BuildSigmaOffline(const PreferenceDataset& dataset,
                                   double ridge, double bound) {
  if (dataset.empty()) Fail(ErrorCode::kEmptyDataset, "sigma needs data");
  if (!(ridge > 0.0) || !(bound > 0.0)) {
    Fail(ErrorCode::kConfigInvalid, "sigma: ridge and bound must be > 0");
  }
  const PreferenceMatrix m = BuildPreferenceMatrix(dataset);
  const int d = static_cast<int>(m.dim());
  CovarianceMatrix out;
  out.sigma = (ridge / bound) * Eigen::MatrixXd::Identity(d, d);
  out.sigma.noalias() +=
      m.diffs.transpose() * m.diffs / static_cast<double>(m.size());
  out.sigma = 0.5 * (out.sigma + out.sigma.transpose()).eval();
  out.ridge = ridge;
  out.bound = bound;
  CheckCovariance(out);
  return out;
}

CovarianceMatrix BuildSigmaOffline(const TokenMdp& mdp, const Policy& mu0,
                                   const Policy& mu1, double ridge,
                                   double bound) {
  mdp.RequireEnumerable();
  if (!(ridge > 0.0) || !(bound > 0.0)) {
    Fail(ErrorCode::kConfigInvalid, "sigma: ridge and bound must be > 0");
  }
  const int d = mdp.feature_dim();
  Eigen::MatrixXd second = Eigen::MatrixXd::Zero(d, d);
  for (int x = 0; x < mdp.prompt_count(); ++x) {
    const double px = mdp.prompt_distribution()[x];
    if (px == 0.0) continue;
    const PromptSupport s = Support(mdp, mu0, mu1, x);
    // tau0 and tau1 are independent given x:
    // E dd^T = E0 ff^T + E1 ff^T - m0 m1^T - m1 m0^T.
    Eigen::VectorXd m0 = Eigen::VectorXd::Zero(d);
    Eigen::VectorXd m1 = Eigen::VectorXd::Zero(d);
    Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t i = 0; i < s.features.size(); ++i) {
      const Eigen::VectorXd& f = s.features[i];
      m0 += s.p0[i] * f;
      m1 += s.p1[i] * f;
      s2.noalias() += (s.p0[i] + s.p1[i]) * f * f.transpose();
    }
    second += px * (s2 - m0 * m1.transpose() - m1 * m0.transpose());
  }
  CovarianceMatrix out;
  out.sigma = (ridge / bound) * Eigen::MatrixXd::Identity(d, d) +
              0.5 * (second + second.transpose());
  out.ridge = ridge;
  out.bound = bound;
  CheckCovariance(out);
  return out;
}

CovarianceMatrix SigmaFromOnline(const CovarianceAccumulator& acc, double bound) {
  CovarianceMatrix out{acc.sigma(), acc.ridge(), bound, SigmaSource::kOnline};
  CheckCovariance(out);
  return out;
}

double WeightedNorm(const Eigen::VectorXd& v, const CovarianceMatrix& sigma) {
  if (v.size() != sigma.sigma.rows()) {
    Fail(ErrorCode::kDimensionMismatch, "weighted norm: vector and sigma differ");
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(sigma.sigma);
  if (llt.info() != Eigen::Success) {
    Fail(ErrorCode::kNonFinite, "covariance is not positive definite");
  }
  return std::sqrt(std::max(0.0, v.dot(llt.solve(v))));
}

double ConcentrabilityLinear(const TokenMdp& mdp, const Policy& teacher,
                             const Policy& pistar, const CovarianceMatrix& sigma) {
  const Eigen::VectorXd diff =
      FeatureExpectation(mdp, teacher) - FeatureExpectation(mdp, pistar);
  return std::sqrt(2.0) * WeightedNorm(diff, sigma);
}

ConcentrabilityProbe SampleConcentrability(const TokenMdp& mdp,
                                           const Policy& teacher,
                                           const Policy& pistar,
                                           const Eigen::VectorXd& theta_star,
                                           const CovarianceMatrix& sigma,
                                           int probes, Rng& rng) {
  const int d = static_cast<int>(theta_star.size());
  if (sigma.sigma.rows() != d) {
    Fail(ErrorCode::kDimensionMismatch, "concentrability: theta* and sigma differ");
  }
  const double lambda = sigma.ridge / sigma.bound;
  const Eigen::MatrixXd moment =
      sigma.sigma - lambda * Eigen::MatrixXd::Identity(d, d);
  const Eigen::VectorXd diff =
      FeatureExpectation(mdp, teacher) - FeatureExpectation(mdp, pistar);
  ConcentrabilityProbe out;
  for (int i = 0; i < probes; ++i) {
    const Eigen::VectorXd u = theta_star - RandomInBall(d, sigma.bound, rng);
    const double denom2 = u.dot(moment * u);
    if (lambda * u.squaredNorm() > denom2 || denom2 <= 0.0) {
      ++out.skipped;
      continue;
    }
    out.sup_ratio = std::max(out.sup_ratio, u.dot(diff) / std::sqrt(denom2));
    ++out.admissible;
  }
  return out;
}

double KappaLinear(double bound) {
  return std::exp(2.0 * bound) + std::exp(-2.0 * bound) + 2.0;
}

LemmaReport LemmaL1TvCheck(Rng& rng, int trials, double tolerance) {
  LemmaReport report;
  for (int trial = 0; trial < trials; ++trial) {
    const LemmaInstance inst = DrawInstance(rng);
    double lhs = 0.0;
    double tv2 = 0.0;
    ForEachPair(inst, [&](double w, double dr, double dr_star) {
      lhs += w * (dr - dr_star) * (dr - dr_star);
      // TV between two Bernoullis is the gap of their success probabilities.
      const double tv = Sigmoid(dr) - Sigmoid(dr_star);
      tv2 += w * tv * tv;
    });
    const double kappa = KappaLinear(inst.bound);
    Record(report, trial, lhs, kappa * kappa * tv2, tolerance);
    if (lhs > 0.25 * kappa * kappa * tv2 + tolerance) ++report.sharpness_violations;
  }
  return report;
}

LemmaReport LemmaTvLogExpCheck(Rng& rng, int trials, double tolerance) {
  LemmaReport report;
  for (int trial = 0; trial < trials; ++trial) {
    const LemmaInstance inst = DrawInstance(rng);
    double tv2 = 0.0;
    // E_{o ~ P*} exp(l_r) = sum_o sqrt(P_r(o) P*(o)) = 1 - hellinger; kept as
    // the deficit so log1p stays accurate when r is close to r*.
    double hellinger = 0.0;
    ForEachPair(inst, [&](double w, double dr, double dr_star) {
      const double p = Sigmoid(dr);
      const double q = Sigmoid(dr_star);
      tv2 += w * (p - q) * (p - q);
      const double a = std::sqrt(p) - std::sqrt(q);
      const double b = std::sqrt(Sigmoid(-dr)) - std::sqrt(Sigmoid(-dr_star));
      hellinger += w * 0.5 * (a * a + b * b);
    });
    Record(report, trial, tv2, -2.0 * std::log1p(-hellinger), tolerance);
  }
  return report;
}

double Suboptimality(const TokenMdp& mdp, const Eigen::VectorXd& theta_star,
                     const Policy& pistar, const Policy& student) {
  return ExactValue(mdp, pistar, theta_star) - ExactValue(mdp, student, theta_star);
}

RegretCurve RegretFromValues(std::span<const double> values, double optimum) {
  RegretCurve out;
  double total = 0.0;
  for (double v : values) {
    const double r = optimum - v;
    CheckFinite(r, "regret");
    total += r;
    out.per_step.push_back(r);
    out.cumulative.push_back(total);
  }
  return out;
}

RegretCurve ComputeRegretCurve(const TokenMdp& mdp,
                               std::span<const Policy* const> policies,
                               const Eigen::VectorXd& theta_star,
                               const Policy& pistar) {
  std::vector<double> values;
  values.reserve(policies.size());
  for (const Policy* p : policies) values.push_back(ExactValue(mdp, *p, theta_star));
  return RegretFromValues(values, ExactValue(mdp, pistar, theta_star));
}

RateFit FitRate(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) {
    Fail(ErrorCode::kDimensionMismatch, "rate fit: x and y lengths differ");
  }
  if (x.size() < 3) Fail(ErrorCode::kConfigInvalid, "rate fit needs >= 3 points");
  const std::size_t n = x.size();
  Eigen::VectorXd lx(n);
  Eigen::VectorXd ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0) || !std::isfinite(x[i]) ||
        !std::isfinite(y[i])) {
      Fail(ErrorCode::kNonPositivePoint,
           "rate fit: point " + std::to_string(i) + " is not positive");
    }
    lx[i] = std::log(x[i]);
    ly[i] = std::log(y[i]);
  }
  const double mx = lx.mean();
  const double my = ly.mean();
  const double sxx = (lx.array() - mx).square().sum();
  if (sxx == 0.0) Fail(ErrorCode::kConfigInvalid, "rate fit: x values are all equal");
  RateFit out;
  out.x.assign(x.begin(), x.end());
  out.y.assign(y.begin(), y.end());
  out.slope = ((lx.array() - mx) * (ly.array() - my)).sum() / sxx;
  out.intercept = my - out.slope * mx;
  const Eigen::ArrayXd resid = ly.array() - out.intercept - out.slope * lx.array();
  out.residual_rms = std::sqrt(resid.square().mean());
  return out;
}

WorstCaseGap WorstCaseConfidenceGap(const Eigen::VectorXd& direction,
                                    const PreferenceMatrix& data,
                                    double max_loglik, double zeta,
                                    double bound, int restarts, Rng& rng) {
  if (data.size() == 0) Fail(ErrorCode::kEmptyDataset, "confidence set needs data");
  if (direction.size() != data.dim()) {
    Fail(ErrorCode::kDimensionMismatch, "direction and data dimensions differ");
  }
  if (restarts < 1 || zeta < 0.0) {
    Fail(ErrorCode::kConfigInvalid, "restarts must be >= 1 and zeta >= 0");
  }
  const int d = static_cast<int>(direction.size());
  constexpr int kBisectSteps = 60;
  constexpr int kSteps = 200;
  const double floor = max_loglik - zeta;
  WorstCaseGap best;
  best.gap = -std::numeric_limits<double>::infinity();
  auto consider = [&](const Eigen::VectorXd& theta, double beta) {
    if (LogLik(theta, data) < floor) return false;
    const double g = theta.dot(direction);
    if (g > best.gap) best = {g, theta, beta};
    return true;
  };

  const double dnorm = direction.norm();
  const Eigen::VectorXd free_max =
      dnorm > 0.0 ? Eigen::VectorXd(bound / dnorm * direction)
                  : Eigen::VectorXd(Eigen::VectorXd::Zero(d));
  if (consider(free_max, 0.0)) return best;

  auto solve = [&](const Eigen::VectorXd& start, double beta, int steps) {
    return MaximizeInner(start, direction, &data, beta, bound, steps, 1.0).theta;
  };
  // Bracket the smallest feasible multiplier, then bisect in log space.
  double lo = 0.0;
  double hi = 1.0;
  Eigen::VectorXd warm = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd theta = solve(warm, hi, kBisectSteps);
  while (!consider(theta, hi)) {
    lo = hi;
    hi *= 4.0;
    if (hi > 1e12) {
      Fail(ErrorCode::kNonFinite, "confidence set looks empty; is max_loglik the maximum?");
    }
    warm = theta;
    theta = solve(warm, hi, kBisectSteps);
  }
  for (int it = 0; it < 40 && hi - lo > 1e-4 * hi; ++it) {
    const double mid = lo == 0.0 ? 0.5 * hi : std::sqrt(lo * hi);
    theta = solve(warm, mid, kBisectSteps);
    if (consider(theta, mid)) {
      hi = mid;
    } else {
      lo = mid;
    }
    warm = theta;
  }
  // Restarts at the final multiplier; the origin counts as the first start.
  for (int r = 0; r < restarts; ++r) {
    const Eigen::VectorXd start =
        r == 0 ? Eigen::VectorXd(Eigen::VectorXd::Zero(d)) : RandomInBall(d, bound, rng);
    consider(solve(start, hi, kSteps), hi);
  }
  return best;
}

double GradientRelativeError(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, const Eigen::VectorXd& analytic, double h,
    double floor) {
  if (analytic.size() != x.size()) {
    Fail(ErrorCode::kDimensionMismatch, "gradient and point dimensions differ");
  }
  Eigen::VectorXd fd(x.size());
  Eigen::VectorXd probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    fd[i] = (up - down) / (2.0 * h);
  }
  const double scale = std::max({fd.norm(), analytic.norm(), floor});
  return (fd - analytic).norm() / scale;
}

std::string_view GradientCheckName(GradientCheckKind kind) {
  switch (kind) {
    case GradientCheckKind::kClippedSurrogate: return "clipped_surrogate";
    case GradientCheckKind::kMle: return "mle";
    case GradientCheckKind::kRewardStep: return "reward_step";
  }
  return "unknown";
}

GradientCheckReport RunGradientCheck(GradientCheckKind kind,
                                     int configurations, Rng& rng) {
  GradientCheckReport report{kind, 0, 0.0,
                             kind == GradientCheckKind::kMle ? 1e-6 : 1e-4};
  auto random_prefs = [&rng](int n, int d) {
    PreferenceMatrix m;
    m.diffs.resize(n, d);
    m.signs.resize(n);
    for (int i = 0; i < n; ++i) {
      m.diffs.row(i) = RandomInBall(d, 2.0, rng).transpose();
      m.signs[i] = rng.Bernoulli(0.5) ? 1.0 : -1.0;
    }
    return m;
  };
  while (report.configurations < configurations) {
    double err = 0.0;
    switch (kind) {
      case GradientCheckKind::kMle: {
        const int d = 2 + static_cast<int>(rng.Index(9));
        const PreferenceMatrix m = random_prefs(5 + static_cast<int>(rng.Index(60)), d);
        const Eigen::VectorXd theta = RandomInBall(d, 3.0, rng);
        err = GradientRelativeError(
            [&m](const Eigen::VectorXd& t) { return LogLik(t, m); }, theta,
            LogLikGradient(theta, m), 1e-5);
        break;
      }
      case GradientCheckKind::kRewardStep: {
        const int d = 2 + static_cast<int>(rng.Index(9));
        const PreferenceMatrix m = random_prefs(5 + static_cast<int>(rng.Index(60)), d);
        const Eigen::VectorXd dir = RandomInBall(d, 5.0, rng);
        const Eigen::VectorXd theta = RandomInBall(d, 2.0, rng);
        const double beta = std::exp(4.0 * rng.Uniform() - 2.0);
        err = GradientRelativeError(
            [&](const Eigen::VectorXd& t) { return InnerObjective(t, dir, &m, beta); },
            theta, InnerGradient(theta, dir, &m, beta), 1e-5);
        break;
      }
      case GradientCheckKind::kClippedSurrogate: {
        MdpSpec spec;
        spec.vocab_size = 2 + static_cast<int>(rng.Index(2));
        spec.horizon = 2 + static_cast<int>(rng.Index(2));
        spec.feature_dim = 6;
        spec.prompt_count = 2;
        spec.context_len = 1 + static_cast<int>(rng.Index(2));
        spec.feature_seed = rng.engine()();
        const TokenMdp mdp(spec);
        const SoftmaxLinearPolicy snapshot = RandomPolicy(mdp, 1.0, rng);
        SoftmaxLinearPolicy policy = snapshot;
        policy.mutable_weights() += RandomPolicy(mdp, 0.15, rng).weights();
        const Eigen::VectorXd theta = RandomInBall(6, 1.0, rng);
        std::vector<Trajectory> trajs;
        std::vector<double> returns;
        for (int i = 0; i < 30; ++i) {
          trajs.push_back(Rollout(mdp, snapshot, mdp.SamplePrompt(rng), rng));
          returns.push_back(theta.dot(trajs.back().features));
        }
        const double clip = 0.2;
        const ClippedBatch batch = MakeClippedBatch(
            mdp, snapshot, std::move(trajs), std::vector<double>(30, 1.0 / 30),
            returns, true);
        bool near_kink = false;
        for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
          const double rho = std::exp(policy.LogProb(mdp, batch.trajectories[i]) -
                                      batch.old_log_probs[i]);
          near_kink |= std::abs(rho - (1.0 - clip)) < 1e-3 ||
                       std::abs(rho - (1.0 + clip)) < 1e-3;
        }
        if (near_kink) continue;
        const Eigen::MatrixXd grad =
            ClippedSurrogateGradient(mdp, policy, batch, clip);
        SoftmaxLinearPolicy probe = policy;
        const Eigen::Index rows = policy.weights().rows();
        const Eigen::Index cols = policy.weights().cols();
        err = GradientRelativeError(
            [&](const Eigen::VectorXd& w) {
              probe.mutable_weights() = w.reshaped(rows, cols);
              return ClippedSurrogate(mdp, probe, batch, clip);
            },
            Flat(policy.weights()), Flat(grad), 1e-6);
        break;
      }
    }
    report.max_relative_error = std::max(report.max_relative_error, err);
    ++report.configurations;
  }
  return report;
}

}  // namespace pbkd
