// Command-line front end for the experiment harness.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pbkd/diagnostics.h"
#include "pbkd/error.h"
#include "pbkd/harness.h"

namespace {

using namespace pbkd;

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int ExitCodeFor(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonFinite:
    case ErrorCode::kNonPositivePoint:
      return kExitNumeric;
    default:
      return kExitConfig;
  }
}

std::vector<int> ParseValues(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = std::string::npos;
    }
    if (used != item.size()) {
      Fail(ErrorCode::kConfigInvalid, "values: '" + item + "' is not an integer");
    }
    out.push_back(v);
  }
  return out;
}

void PrintLemma(const char* name, const LemmaReport& r) {
  std::printf("check,trials,violations,min_margin\n%s,%zu,%d,%.6g\n", name, r.rows.size(),
              r.violations, r.min_margin);
}

std::filesystem::path SweepDir(const std::string& out, const ExperimentConfig& c,
                               const std::string& axis, const std::string& values, int seeds) {
  if (!out.empty()) return out;
  const std::string key = RunId(c) + axis + values + std::to_string(seeds);
  char id[17];
  std::snprintf(id, sizeof(id), "%016llx",
                static_cast<unsigned long long>(HashName(key)));
  ExperimentConfig no_dir = c;
  return ResolveOutputRoot("", no_dir) / (std::string("sweep-") + id);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference-based knowledge distillation experiments"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string preset = "offline-reference";
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-config", "Write a config preset as JSON");
  gen->add_option("--preset", preset, "Preset name")->capture_default_str();
  gen->add_option("--out", gen_out, "Output file (default stdout)");
  bool list_presets = false;
  gen->add_flag("--list", list_presets, "List preset names");

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("--config", config_path, "Config file")->required();
  auto* seed_opt = run->add_option("--seed", seed, "Override the master seed");
  run->add_option("--out", out_dir, "Output root");

  std::string axis;
  std::string values;
  int seeds = 5;
  int threads = 0;
  auto* sweep = app.add_subcommand("sweep", "Sweep N or T across seeds");
  sweep->add_option("--config", config_path, "Config file")->required();
  sweep->add_option("--axis", axis, "N or T")->required();
  sweep->add_option("--values", values, "Comma-separated increasing values")->required();
  sweep->add_option("--seeds", seeds, "Seeds per value")->capture_default_str();
  sweep->add_option("--threads", threads, "Worker threads (0: all cores)");
  sweep->add_option("--out", out_dir, "Sweep output directory");

  std::vector<std::string> run_dirs;
  std::string metric;
  auto* compare = app.add_subcommand("compare", "Compare run artifacts");
  compare->add_option("--runs", run_dirs, "Run directories")->required();
  compare->add_option("--metric", metric, "j_rstar or regret")
      ->required()
      ->check(CLI::IsMember({"j_rstar", "regret"}));

  std::string check;
  int trials = 1000;
  std::uint64_t diag_seed = 1;
  auto* diag = app.add_subcommand("diag", "Numerical self-checks");
  diag->add_option("--check", check, "l1tv, tvlog, pdl or gradients")
      ->required()
      ->check(CLI::IsMember({"l1tv", "tvlog", "pdl", "gradients"}));
  diag->add_option("--trials", trials, "Random instances")->capture_default_str();
  diag->add_option("--seed", diag_seed, "Seed")->capture_default_str();

  std::string input;
  std::string quantity;
  auto* rates = app.add_subcommand("rates", "Fit a log-log rate to a sweep summary");
  rates->add_option("--input", input, "summary.csv from a sweep")->required();
  rates->add_option("--quantity", quantity, "subopt or regret")
      ->required()
      ->check(CLI::IsMember({"subopt", "regret"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      if (list_presets) {
        for (std::string_view name : PresetNames()) std::cout << name << "\n";
        return 0;
      }
      const std::string text = ConfigToJson(PresetConfig(preset)).dump(2) + "\n";
      if (gen_out.empty()) {
        std::cout << text;
      } else {
        std::ofstream f(gen_out);
        f << text;
        if (!f) Fail(ErrorCode::kIo, "cannot write " + gen_out);
      }
      return 0;
    }
    if (*run) {
      ExperimentConfig c = LoadConfig(config_path);
      if (*seed_opt) c.seed = seed;
      const RunResult r = RunExperiment(c);
      const auto dir = WriteArtifact(r, ResolveOutputRoot(out_dir, c));
      std::printf("run_dir,j_rstar,j_teacher,j_optimal\n%s,%.10g,%.10g,%.10g\n",
                  dir.string().c_str(), r.j_student, r.j_teacher, r.j_optimal);
      return 0;
    }
    if (*sweep) {
      const ExperimentConfig c = LoadConfig(config_path);
      SweepSpec spec{ParseSweepAxis(axis), ParseValues(values), seeds, threads};
      const SweepResult r = RunSweep(c, spec);
      const auto dir = SweepDir(out_dir, c, axis, values, seeds);
      WriteSweep(r, dir);
      std::cout << TableToCsv(r.summary);
      for (const SweepFailure& f : r.failures) {
        std::fprintf(stderr, "cell %s=%d seed %llu failed: %s\n", axis.c_str(), f.value,
                     static_cast<unsigned long long>(f.seed), f.message.c_str());
      }
      if (r.fit.x.size() >= 3) {
        std::printf("slope,%.6g\n", r.fit.slope);
      }
      std::printf("sweep_dir,%s\n", dir.string().c_str());
      if (!r.failures.empty()) return ExitCodeFor(r.failures.front().code);
      return 0;
    }
    if (*compare) {
      std::vector<RunSummary> runs;
      for (const std::string& d : run_dirs) runs.push_back(LoadRunSummary(d));
      const CompareReport rep = CompareRuns(runs, metric);
      std::printf("method,n,mean,se\n");
      for (const MethodStat& m : rep.methods) {
        std::printf("%s,%d,%.10g,%.6g\n", m.label.c_str(), m.n, m.mean, m.se);
      }
      std::printf("lower,upper,gap,paired_se,exceeds_se\n");
      for (const AdjacentGap& g : rep.gaps) {
        std::printf("%s,%s,%.10g,%.6g,%s\n", g.lower.c_str(), g.upper.c_str(), g.gap,
                    g.paired_se, g.exceeds_se ? "yes" : "no");
      }
      std::printf("monotone,%s\n", rep.monotone ? "yes" : "no");
      return 0;
    }
    if (*diag) {
      if (trials < 1) Fail(ErrorCode::kConfigInvalid, "trials: must be >= 1");
      Rng rng(diag_seed);
      if (check == "gradients") {
        bool ok = true;
        std::printf("check,configurations,max_relative_error,tolerance,passed\n");
        for (GradientCheckKind k : {GradientCheckKind::kClippedSurrogate, GradientCheckKind::kMle,
                                    GradientCheckKind::kRewardStep}) {
          const GradientCheckReport r = RunGradientCheck(k, std::min(trials, 50), rng);
          std::printf("%s,%d,%.3g,%.0e,%s\n", std::string(GradientCheckName(k)).c_str(),
                      r.configurations, r.max_relative_error, r.tolerance,
                      r.passed() ? "yes" : "no");
          ok = ok && r.passed();
        }
        return ok ? 0 : kExitNumeric;
      }
      LemmaReport r;
      if (check == "l1tv") {
        r = LemmaL1TvCheck(rng, trials);
      } else if (check == "tvlog") {
        r = LemmaTvLogExpCheck(rng, trials);
      } else {
        r = PdlIdentityCheck(rng, trials);
      }
      PrintLemma(check.c_str(), r);
      return r.violations == 0 ? 0 : kExitNumeric;
    }
    if (*rates) {
      const std::filesystem::path fit_json = std::filesystem::path(input).parent_path() / "fit.json";
      if (std::filesystem::exists(fit_json)) {
        std::ifstream f(fit_json);
        const auto j = nlohmann::json::parse(f, nullptr, false);
        if (!j.is_discarded() && j.contains("quantity") && j["quantity"] != quantity) {
          Fail(ErrorCode::kConfigInvalid, "quantity: sweep measured " +
                                              j["quantity"].get<std::string>());
        }
      }
      const RateFit fit = RatesFromSummary(input);
      std::printf("quantity,points,slope,intercept,residual_rms\n%s,%zu,%.6g,%.6g,%.3g\n",
                  quantity.c_str(), fit.x.size(), fit.slope, fit.intercept,
                  fit.residual_rms);
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return ExitCodeFor(e.code());
  }
  return 0;
}
