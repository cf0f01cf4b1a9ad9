#ifndef PBKD_HARNESS_H_
#define PBKD_HARNESS_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "pbkd/diagnostics.h"
#include "pbkd/error.h"
#include "pbkd/evaluation.h"
#include "pbkd/mdp.h"
#include "pbkd/offline.h"
#include "pbkd/online.h"
#include "pbkd/policy.h"
#include "pbkd/preference_data.h"

namespace pbkd {

inline constexpr std::string_view kConfigSchema = "pbkd.experiment/1";
inline constexpr std::string_view kVersion = "0.4.0";
// Default output root when neither --out nor the config names one.
inline constexpr const char* kOutputRootEnv = "PBKD_OUTPUT_ROOT";

enum class Algorithm { kBc, kBestOfN, kPbkdOffline, kPbkdOnline, kMmOffline, kMmOnline };

std::string_view AlgorithmName(Algorithm a);
// Throws kConfigInvalid.
Algorithm ParseAlgorithm(std::string_view name);

// The synthetic oracle and annotators. theta* is drawn on the B-sphere from
// `reward_seed`; the teacher is the softened optimum of
//   theta_E = B normalize(theta* + teacher_perturbation * u),
// u a random unit vector from the same stream (temperature 0: deterministic
// DP optimum). Offline pairs come from mu0 = softened optimum of theta_E at
// `mu0_temperature` against a uniform mu1.
struct TaskSpec {
  double bound = 1.0;
  std::uint64_t reward_seed = 5;
  double teacher_perturbation = 2.5;
  double teacher_temperature = 0.05;
  double mu0_temperature = 2.0;
};

enum class InitKind { kUniform, kBc };
enum class WarmStartKind { kNone, kOffline };

struct BcSpec {
  int demos = 200;
  int max_epochs = 100;
};

struct BestOfNSpec {
  int n = 8;
  // Rollouts per value estimate.
  int eval_samples = 2000;
};

struct DataSpec {
  int n = 1000;
  // JSONL records to load instead of generating; empty generates.
  std::string path;
};

struct ExperimentConfig {
  // Method name used by compare; defaults to the algorithm name.
  std::string label;
  MdpSpec mdp;
  TaskSpec task;
  Algorithm algorithm = Algorithm::kPbkdOffline;
  InitKind init = InitKind::kBc;
  BcSpec bc;
  BestOfNSpec best_of_n;
  DataSpec data;
  OfflineConfig offline;
  OnlineConfig online;
  // Online algorithms only: start from an offline solve on generated data.
  WarmStartKind warm_start = WarmStartKind::kNone;
  std::uint64_t seed = 0;
  std::string output_dir;
};

// Throws kConfigInvalid naming the offending field.
void ValidateConfig(const ExperimentConfig& config);

// Full snapshot with every default filled in; only the sections the
// algorithm reads are emitted.
nlohmann::ordered_json ConfigToJson(const ExperimentConfig& config);
// Unknown keys, sections the algorithm does not use, a wrong schema id and
// type mismatches are all kConfigInvalid.
ExperimentConfig ConfigFromJson(const nlohmann::json& j);
ExperimentConfig LoadConfig(const std::filesystem::path& path);

// Named starting points: offline-reference, online-reference, bc, best-of-n,
// mm-offline, mm-online, ordering-bc, ordering-offline, ordering-online.
ExperimentConfig PresetConfig(std::string_view name);
std::vector<std::string_view> PresetNames();

struct Task {
  TokenMdp mdp;
  Eigen::VectorXd theta_star;
  Eigen::VectorXd theta_teacher;
  TabularPolicy teacher;
  TabularPolicy mu0;
  SoftmaxLinearPolicy mu1;
  TabularPolicy optimal;
  double j_optimal = 0.0;
  double j_teacher = 0.0;
};
Task BuildTask(const ExperimentConfig& config);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

// Every cell is written with round-trip precision. Throws kNonFinite
// rather than writing NaN or infinity.
std::string TableToCsv(const Table& table);

struct RunResult {
  ExperimentConfig config;
  Table trace;
  SoftmaxLinearPolicy policy;
  Eigen::VectorXd theta;
  PreferenceDataset dataset;
  double j_student = 0.0;
  double j_teacher = 0.0;
  double j_optimal = 0.0;
  // Online algorithms only.
  std::optional<double> regret_cumulative;
};

RunResult RunExperiment(const ExperimentConfig& config);

// Deterministic id from the config snapshot.
std::string RunId(const ExperimentConfig& config);

// Writes <root>/run-<id>/{config.json, trace.csv, dataset.jsonl, model.json,
// summary.json} and returns the run directory.
std::filesystem::path WriteArtifact(const RunResult& result,
                                    const std::filesystem::path& root);

// --out, then the config's output_dir, then $PBKD_OUTPUT_ROOT, then "runs".
std::filesystem::path ResolveOutputRoot(const std::string& cli_out,
                                        const ExperimentConfig& config);

enum class SweepAxis { kN, kT };
SweepAxis ParseSweepAxis(std::string_view name);

struct SweepSpec {
  SweepAxis axis = SweepAxis::kN;
  std::vector<int> values;
  int seeds = 5;
  // 0: hardware concurrency.
  int threads = 0;
};

struct SweepCell {
  int value = 0;
  std::uint64_t seed = 0;
  double metric = 0.0;
};

// A cell that threw; the sweep keeps going without it.
struct SweepFailure {
  int value = 0;
  std::uint64_t seed = 0;
  ErrorCode code = ErrorCode::kNonFinite;
  std::string message;
};

struct SweepResult {
  SweepSpec spec;
  // "subopt" for N, "regret" (cumulative) for T.
  std::string quantity;
  std::vector<SweepCell> cells;
  // value, seeds, mean, se.
  Table summary;
  RateFit fit;
  // Per-iteration regret averaged over seeds, T axis only.
  std::vector<double> mean_regret_curve;
  std::vector<SweepFailure> failures;
};

// Runs the (value, seed) cross product with seeds config.seed + i.
// Throws kConfigInvalid for fewer than 3 values, non-increasing values or
// an axis that does not apply to the algorithm.
SweepResult RunSweep(const ExperimentConfig& base, const SweepSpec& spec);
// summary.csv, cells.csv, fit.json (+ failures.json when a cell failed).
void WriteSweep(const SweepResult& result, const std::filesystem::path& dir);

// Reads a sweep summary.csv and fits log mean vs log value.
RateFit RatesFromSummary(const std::filesystem::path& summary_csv);

struct RunSummary {
  std::string label;
  std::uint64_t seed = 0;
  nlohmann::json mdp;
  Eigen::VectorXd theta_star;
  double j_rstar = 0.0;
  std::optional<double> regret;
};
RunSummary LoadRunSummary(const std::filesystem::path& run_dir);
RunSummary SummarizeRun(const RunResult& result);

struct MethodStat {
  std::string label;
  int n = 0;
  double mean = 0.0;
  double se = 0.0;
};

struct AdjacentGap {
  std::string lower;
  std::string upper;
  // mean(upper) - mean(lower) over seeds present in both.
  double gap = 0.0;
  double paired_se = 0.0;
  bool exceeds_se = false;
};

struct CompareReport {
  std::string metric;
  // In order of first appearance.
  std::vector<MethodStat> methods;
  std::vector<AdjacentGap> gaps;
  // Every adjacent gap >= 0.
  bool monotone = false;
};

// metric "j_rstar" or "regret". Throws kIncompatibleRuns when runs differ in
// mdp or theta*, kConfigInvalid for an unknown metric.
CompareReport CompareRuns(const std::vector<RunSummary>& runs,
                          std::string_view metric);

// |pdl_gap(Q^teacher_r) - (J(teacher, r) - J(student, r))| and the pointwise
// Bellman inversion error on random tiny instances; lhs holds the error and
// rhs the tolerance.
LemmaReport PdlIdentityCheck(Rng& rng, int trials, double tolerance = 1e-8);
LemmaReport BellmanInversionCheck(Rng& rng, int trials, double tolerance = 1e-10);

}  // namespace pbkd

#endif  // PBKD_HARNESS_H_
