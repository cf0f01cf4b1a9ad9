#include "pbkd/harness.h"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "pbkd/baselines.h"
#include "pbkd/error.h"
#include "pbkd/mm.h"
#include "pbkd/reward_model.h"

#ifndef PBKD_BUILD_ID
#define PBKD_BUILD_ID "dev"
#endif

namespace pbkd {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

bool UsesData(const ExperimentConfig& c) {
  switch (c.algorithm) {
    case Algorithm::kBestOfN:
    case Algorithm::kPbkdOffline:
    case Algorithm::kMmOffline:
      return true;
    case Algorithm::kPbkdOnline:
    case Algorithm::kMmOnline:
      return c.warm_start == WarmStartKind::kOffline;
    case Algorithm::kBc:
      return false;
  }
  return false;
}

bool IsOnline(Algorithm a) {
  return a == Algorithm::kPbkdOnline || a == Algorithm::kMmOnline;
}
bool UsesInit(Algorithm a) {
  return a != Algorithm::kBc && a != Algorithm::kBestOfN;
}
bool UsesOffline(const ExperimentConfig& c) {
  return c.algorithm == Algorithm::kPbkdOffline ||
         c.algorithm == Algorithm::kMmOffline ||
         (IsOnline(c.algorithm) && c.warm_start == WarmStartKind::kOffline);
}
bool UsesBc(const ExperimentConfig& c) {
  return c.algorithm == Algorithm::kBc || c.algorithm == Algorithm::kBestOfN ||
         (UsesInit(c.algorithm) && c.init == InitKind::kBc);
}

// Strict reader for one JSON object: every key must be consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) Fail(ErrorCode::kConfigInvalid, Name("") + "expected an object");
  }

  bool Has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  void Get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.push_back(key);
    try {
      const json& v = j_.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw json::type_error::create(302, "not a boolean", &v);
      } else if constexpr (std::is_arithmetic_v<T>) {
        if (!v.is_number()) throw json::type_error::create(302, "not a number", &v);
        if constexpr (std::is_integral_v<T>) {
          if (!v.is_number_integer()) {
            throw json::type_error::create(302, "not an integer", &v);
          }
          if constexpr (std::is_unsigned_v<T>) {
            if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
              throw json::type_error::create(302, "negative", &v);
            }
          }
        }
      }
      out = v.get<T>();
    } catch (const json::exception&) {
      Fail(ErrorCode::kConfigInvalid, Name(key) + "wrong type");
    }
  }

  template <typename E>
  void GetEnum(const std::string& key, E& out,
               std::initializer_list<std::pair<const char*, E>> names) {
    if (!j_.contains(key)) return;
    std::string s;
    Get(key, s);
    for (const auto& [name, value] : names) {
      if (s == name) {
        out = value;
        return;
      }
    }
    Fail(ErrorCode::kConfigInvalid, Name(key) + "unknown value '" + s + "'");
  }

  const json* Child(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    used_.push_back(key);
    return &j_.at(key);
  }

  void Reject(const std::string& key, const std::string& why) {
    if (j_.contains(key)) Fail(ErrorCode::kConfigInvalid, Name(key) + why);
  }

  void Finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (std::find(used_.begin(), used_.end(), key) == used_.end()) {
        Fail(ErrorCode::kConfigInvalid, Name(key) + "unknown key");
      }
    }
  }

  std::string Name(const std::string& key) const {
    std::string n = path_;
    if (!key.empty()) n += n.empty() ? key : "." + key;
    return n + ": ";
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> used_;
};

const char* ModeName(ValueMode m) { return m == ValueMode::kExact ? "exact" : "mc"; }

ordered_json MdpToJson(const MdpSpec& s) {
  return {{"vocab_size", s.vocab_size},     {"horizon", s.horizon},
          {"gamma", s.gamma},               {"feature_dim", s.feature_dim},
          {"prompt_count", s.prompt_count}, {"context_len", s.context_len},
          {"feature_seed", s.feature_seed}, {"enumeration_cap", s.enumeration_cap},
          {"prompt_distribution", s.prompt_distribution}};
}

void ReadMdp(const json& j, MdpSpec& s) {
  Section sec(j, "mdp");
  sec.Get("vocab_size", s.vocab_size);
  sec.Get("horizon", s.horizon);
  sec.Get("gamma", s.gamma);
  sec.Get("feature_dim", s.feature_dim);
  sec.Get("prompt_count", s.prompt_count);
  sec.Get("context_len", s.context_len);
  sec.Get("feature_seed", s.feature_seed);
  sec.Get("enumeration_cap", s.enumeration_cap);
  sec.Get("prompt_distribution", s.prompt_distribution);
  sec.Finish();
}

ordered_json OfflineToJson(const OfflineConfig& c) {
  return {{"beta", c.beta},
          {"reward_steps", c.reward_steps},
          {"policy_steps", c.policy_steps},
          {"rounds", c.rounds},
          {"reward_lr", c.reward_lr},
          {"policy_lr", c.policy_lr},
          {"mode", ModeName(c.mode)},
          {"mc_samples", c.mc_samples},
          {"baseline", c.baseline},
          {"policy_update",
           c.policy_update == PolicyUpdate::kNatural ? "natural" : "gradient"}};
}

void ReadOffline(const json& j, OfflineConfig& c) {
  Section sec(j, "offline");
  sec.Get("beta", c.beta);
  sec.Get("reward_steps", c.reward_steps);
  sec.Get("policy_steps", c.policy_steps);
  sec.Get("rounds", c.rounds);
  sec.Get("reward_lr", c.reward_lr);
  sec.Get("policy_lr", c.policy_lr);
  sec.GetEnum("mode", c.mode, {{"exact", ValueMode::kExact}, {"mc", ValueMode::kMonteCarlo}});
  sec.Get("mc_samples", c.mc_samples);
  sec.Get("baseline", c.baseline);
  sec.GetEnum("policy_update", c.policy_update,
              {{"gradient", PolicyUpdate::kGradient}, {"natural", PolicyUpdate::kNatural}});
  sec.Finish();
}

ordered_json OnlineToJson(const OnlineConfig& c) {
  return {{"iterations", c.iterations},
          {"pref_batch", c.pref_batch},
          {"opt_batch", c.opt_batch},
          {"beta", c.beta},
          {"clip", c.clip},
          {"alpha", c.alpha},
          {"reward_steps", c.reward_steps},
          {"policy_steps", c.policy_steps},
          {"reward_lr", c.reward_lr},
          {"policy_lr", c.policy_lr},
          {"lr_schedule", c.lr_schedule == LrSchedule::kInvSqrt ? "inv_sqrt" : "constant"},
          {"mode", ModeName(c.mode)},
          {"baseline", c.baseline},
          {"labeling", c.labeling == LabelMode::kOracle ? "oracle" : "forced"},
          {"ridge", c.ridge},
          {"loglik_batch", c.loglik_batch},
          {"snapshot_every", c.snapshot_every}};
}

void ReadOnline(const json& j, OnlineConfig& c) {
  Section sec(j, "online");
  sec.Get("iterations", c.iterations);
  sec.Get("pref_batch", c.pref_batch);
  sec.Get("opt_batch", c.opt_batch);
  sec.Get("beta", c.beta);
  sec.Get("clip", c.clip);
  sec.Get("alpha", c.alpha);
  sec.Get("reward_steps", c.reward_steps);
  sec.Get("policy_steps", c.policy_steps);
  sec.Get("reward_lr", c.reward_lr);
  sec.Get("policy_lr", c.policy_lr);
  sec.GetEnum("lr_schedule", c.lr_schedule,
              {{"constant", LrSchedule::kConstant}, {"inv_sqrt", LrSchedule::kInvSqrt}});
  sec.GetEnum("mode", c.mode, {{"exact", ValueMode::kExact}, {"mc", ValueMode::kMonteCarlo}});
  sec.Get("baseline", c.baseline);
  sec.GetEnum("labeling", c.labeling,
              {{"oracle", LabelMode::kOracle}, {"forced", LabelMode::kForced}});
  sec.Get("ridge", c.ridge);
  sec.Get("loglik_batch", c.loglik_batch);
  sec.Get("snapshot_every", c.snapshot_every);
  sec.Finish();
}

Eigen::VectorXd GaussianDirection(int d, double norm, Rng& rng) {
  Eigen::VectorXd v(d);
  for (int i = 0; i < d; ++i) v[i] = rng.Normal();
  return v * (norm / v.norm());
}

std::string FormatDouble(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void WriteFile(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  if (!out) Fail(ErrorCode::kIo, "cannot write " + path.string());
}

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Fail(ErrorCode::kIo, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<double> ToVector(const Eigen::VectorXd& v) {
  return {v.data(), v.data() + v.size()};
}

Table OfflineTrace(const std::vector<SolverTraceRow>& rows) {
  Table t{{"round", "gap", "loglik", "theta_norm", "j_student_rstar", "inner_start",
           "inner_end"},
          {}};
  for (const SolverTraceRow& r : rows) {
    t.rows.push_back({static_cast<double>(r.round), r.gap, r.loglik, r.theta_norm,
                      r.j_student_rstar, r.inner_start, r.inner_end});
  }
  return t;
}

Table OnlineTrace(const std::vector<OnlineTraceRow>& rows) {
  Table t{{"t", "n_t", "j_student_rstar", "j_teacher_rstar", "gap_estimate", "loglik",
           "theta_norm", "sigma_logdet", "regret_cumulative"},
          {}};
  for (const OnlineTraceRow& r : rows) {
    t.rows.push_back({static_cast<double>(r.t), static_cast<double>(r.n_t),
                      r.j_student_rstar, r.j_teacher_rstar, r.gap_estimate, r.loglik,
                      r.theta_norm, r.sigma_logdet, r.regret_cumulative});
  }
  return t;
}

struct Streams {
  std::uint64_t data;
  std::uint64_t demos;
  std::uint64_t solver;
  std::uint64_t eval;
};

Streams MakeStreams(const ExperimentConfig& c) {
  return {DeriveSeed(c.seed, "data", static_cast<std::uint64_t>(c.data.n)),
          DeriveSeed(c.seed, "demos"), DeriveSeed(c.seed, "solver"),
          DeriveSeed(c.seed, "eval")};
}

SoftmaxLinearPolicy FitBc(const ExperimentConfig& c, const Task& task,
                          std::uint64_t seed, Table* trace) {
  Rng rng(seed);
  std::vector<Trajectory> demos;
  demos.reserve(c.bc.demos);
  for (int i = 0; i < c.bc.demos; ++i) {
    demos.push_back(Rollout(task.mdp, task.teacher, task.mdp.SamplePrompt(rng), rng));
  }
  BcOptions options;
  options.max_epochs = c.bc.max_epochs;
  BcResult fit = BehaviorCloningFit(task.mdp, demos, SoftmaxLinearPolicy(task.mdp), options);
  if (trace != nullptr) {
    *trace = {{"epoch", "loss"}, {}};
    for (std::size_t e = 0; e < fit.losses.size(); ++e) {
      trace->rows.push_back({static_cast<double>(e), fit.losses[e]});
    }
  }
  return std::move(fit.policy);
}

PreferenceDataset LoadOrGenerate(const ExperimentConfig& c, const Task& task,
                                 std::uint64_t seed) {
  if (!c.data.path.empty()) {
    std::ifstream in(c.data.path);
    if (!in) Fail(ErrorCode::kIo, "data.path: cannot read " + c.data.path);
    return ReadRecords(in, task.mdp);
  }
  Rng rng(seed);
  return GenerateOffline(task.mdp, task.mu0, task.mu1,
                         LinearReward{task.theta_star, c.task.bound}, c.data.n, rng);
}

OfflineConfig ResolvedOffline(const ExperimentConfig& c, const Streams& s) {
  OfflineConfig o = c.offline;
  o.bound = c.task.bound;
  o.seed = s.solver;
  return o;
}

OnlineConfig ResolvedOnline(const ExperimentConfig& c, const Streams& s) {
  OnlineConfig o = c.online;
  o.bound = c.task.bound;
  o.seed = DeriveSeed(s.solver, "online");
  return o;
}

double Mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Standard error of the mean; 0 for a single value.
double StdErr(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = Mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

std::vector<std::string> SplitCsvLine(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  return out;
}

// Tiny random instance shared by the pdl and Bellman checks.
struct TinyInstance {
  TokenMdp mdp;
  SoftmaxLinearPolicy teacher;
  SoftmaxLinearPolicy student;
  Eigen::VectorXd theta;
};

TinyInstance DrawTiny(Rng& rng) {
  MdpSpec spec;
  spec.vocab_size = 2 + rng.Index(2);
  spec.horizon = 1 + rng.Index(4);
  spec.gamma = rng.Bernoulli(0.5) ? 0.5 : 1.0;
  spec.feature_dim = 2 + rng.Index(5);
  spec.prompt_count = 1 + rng.Index(3);
  spec.context_len = 1 + rng.Index(spec.horizon);
  spec.feature_seed = rng.engine()();
  TokenMdp mdp(spec);
  auto random_policy = [&](double scale) {
    SoftmaxLinearPolicy p(mdp);
    for (double& w : p.mutable_weights().reshaped()) w = scale * rng.Normal();
    return p;
  };
  SoftmaxLinearPolicy teacher = random_policy(1.5);
  SoftmaxLinearPolicy student = random_policy(1.5);
  Eigen::VectorXd theta = GaussianDirection(spec.feature_dim, 1.0, rng);
  return {std::move(mdp), std::move(teacher), std::move(student), std::move(theta)};
}

}  // namespace

std::string_view AlgorithmName(Algorithm a) {
  switch (a) {
    case Algorithm::kBc: return "bc";
    case Algorithm::kBestOfN: return "best-of-n";
    case Algorithm::kPbkdOffline: return "pbkd-offline";
    case Algorithm::kPbkdOnline: return "pbkd-online";
    case Algorithm::kMmOffline: return "mm-offline";
    case Algorithm::kMmOnline: return "mm-online";
  }
  return "unknown";
}

Algorithm ParseAlgorithm(std::string_view name) {
  for (Algorithm a : {Algorithm::kBc, Algorithm::kBestOfN, Algorithm::kPbkdOffline,
                      Algorithm::kPbkdOnline, Algorithm::kMmOffline, Algorithm::kMmOnline}) {
    if (AlgorithmName(a) == name) return a;
  }
  Fail(ErrorCode::kConfigInvalid, "algorithm: unknown '" + std::string(name) + "'");
}

void ValidateConfig(const ExperimentConfig& c) {
  auto bad = [](const std::string& msg) { Fail(ErrorCode::kConfigInvalid, msg); };
  const MdpSpec& m = c.mdp;
  if (m.vocab_size < 2) bad("mdp.vocab_size: must be >= 2");
  if (m.horizon < 1) bad("mdp.horizon: must be >= 1");
  if (!(m.gamma >= 0.0 && m.gamma <= 1.0)) bad("mdp.gamma: must be in [0, 1]");
  if (m.feature_dim < 1) bad("mdp.feature_dim: must be >= 1");
  if (m.prompt_count < 1) bad("mdp.prompt_count: must be >= 1");
  if (m.context_len < 1) bad("mdp.context_len: must be >= 1");
  if (!m.prompt_distribution.empty() &&
      static_cast<int>(m.prompt_distribution.size()) != m.prompt_count) {
    bad("mdp.prompt_distribution: length must equal prompt_count");
  }
  if (!(c.task.bound > 0.0)) bad("task.bound: must be > 0");
  if (!(c.task.teacher_temperature >= 0.0)) bad("task.teacher_temperature: must be >= 0");
  if (!(c.task.mu0_temperature > 0.0)) bad("task.mu0_temperature: must be > 0");
  if (!(c.task.teacher_perturbation >= 0.0)) bad("task.teacher_perturbation: must be >= 0");
  if (UsesBc(c)) {
    if (c.bc.demos < 1) bad("bc.demos: must be >= 1");
    if (c.bc.max_epochs < 1) bad("bc.max_epochs: must be >= 1");
  }
  if (c.algorithm == Algorithm::kBestOfN) {
    if (c.best_of_n.n < 1) bad("best_of_n.n: must be >= 1");
    if (c.best_of_n.eval_samples < 1) bad("best_of_n.eval_samples: must be >= 1");
  }
  if (UsesData(c) && c.data.path.empty() && c.data.n < 1) bad("data.n: must be >= 1");
  if (!IsOnline(c.algorithm) && c.warm_start != WarmStartKind::kNone) {
    bad("warm_start: only online algorithms take a warm start");
  }
  if (UsesOffline(c)) {
    OfflineConfig o = c.offline;
    o.bound = c.task.bound;
    ValidateOfflineConfig(o);
  }
  if (IsOnline(c.algorithm)) {
    OnlineConfig o = c.online;
    o.bound = c.task.bound;
    ValidateOnlineConfig(o);
  }
}

ordered_json ConfigToJson(const ExperimentConfig& c) {
  ordered_json j;
  j["schema"] = kConfigSchema;
  j["label"] = c.label.empty() ? std::string(AlgorithmName(c.algorithm)) : c.label;
  j["algorithm"] = AlgorithmName(c.algorithm);
  j["seed"] = c.seed;
  if (!c.output_dir.empty()) j["output_dir"] = c.output_dir;
  j["mdp"] = MdpToJson(c.mdp);
  j["task"] = {{"bound", c.task.bound},
               {"reward_seed", c.task.reward_seed},
               {"teacher_perturbation", c.task.teacher_perturbation},
               {"teacher_temperature", c.task.teacher_temperature},
               {"mu0_temperature", c.task.mu0_temperature}};
  if (UsesInit(c.algorithm)) j["init"] = c.init == InitKind::kBc ? "bc" : "uniform";
  if (IsOnline(c.algorithm)) {
    j["warm_start"] = c.warm_start == WarmStartKind::kOffline ? "offline" : "none";
  }
  if (UsesBc(c)) j["bc"] = {{"demos", c.bc.demos}, {"max_epochs", c.bc.max_epochs}};
  if (c.algorithm == Algorithm::kBestOfN) {
    j["best_of_n"] = {{"n", c.best_of_n.n}, {"eval_samples", c.best_of_n.eval_samples}};
  }
  if (UsesData(c)) {
    ordered_json d = {{"n", c.data.n}};
    if (!c.data.path.empty()) d["path"] = c.data.path;
    j["data"] = d;
  }
  if (UsesOffline(c)) j["offline"] = OfflineToJson(c.offline);
  if (IsOnline(c.algorithm)) j["online"] = OnlineToJson(c.online);
  return j;
}

ExperimentConfig ConfigFromJson(const json& j) {
  Section top(j, "");
  std::string schema;
  if (!top.Has("schema")) Fail(ErrorCode::kConfigInvalid, "schema: missing");
  top.Get("schema", schema);
  if (schema != kConfigSchema) {
    Fail(ErrorCode::kConfigInvalid, "schema: expected '" + std::string(kConfigSchema) +
                                        "', got '" + schema + "'");
  }
  ExperimentConfig c;
  std::string algorithm;
  if (!top.Has("algorithm")) Fail(ErrorCode::kConfigInvalid, "algorithm: missing");
  top.Get("algorithm", algorithm);
  c.algorithm = ParseAlgorithm(algorithm);
  const std::string used_by = " not used by algorithm " + algorithm;
  top.Get("label", c.label);
  top.Get("seed", c.seed);
  top.Get("output_dir", c.output_dir);
  if (const json* m = top.Child("mdp")) ReadMdp(*m, c.mdp);
  if (const json* t = top.Child("task")) {
    Section sec(*t, "task");
    sec.Get("bound", c.task.bound);
    sec.Get("reward_seed", c.task.reward_seed);
    sec.Get("teacher_perturbation", c.task.teacher_perturbation);
    sec.Get("teacher_temperature", c.task.teacher_temperature);
    sec.Get("mu0_temperature", c.task.mu0_temperature);
    sec.Finish();
  }
  if (UsesInit(c.algorithm)) {
    top.GetEnum("init", c.init, {{"uniform", InitKind::kUniform}, {"bc", InitKind::kBc}});
  } else {
    top.Reject("init", used_by);
  }
  if (IsOnline(c.algorithm)) {
    top.GetEnum("warm_start", c.warm_start,
                {{"none", WarmStartKind::kNone}, {"offline", WarmStartKind::kOffline}});
  } else {
    top.Reject("warm_start", used_by);
  }
  if (UsesBc(c)) {
    if (const json* b = top.Child("bc")) {
      Section sec(*b, "bc");
      sec.Get("demos", c.bc.demos);
      sec.Get("max_epochs", c.bc.max_epochs);
      sec.Finish();
    }
  } else {
    top.Reject("bc", used_by);
  }
  if (c.algorithm == Algorithm::kBestOfN) {
    if (const json* b = top.Child("best_of_n")) {
      Section sec(*b, "best_of_n");
      sec.Get("n", c.best_of_n.n);
      sec.Get("eval_samples", c.best_of_n.eval_samples);
      sec.Finish();
    }
  } else {
    top.Reject("best_of_n", used_by);
  }
  if (UsesData(c)) {
    if (const json* d = top.Child("data")) {
      Section sec(*d, "data");
      sec.Get("n", c.data.n);
      sec.Get("path", c.data.path);
      sec.Finish();
    }
  } else {
    top.Reject("data", used_by);
  }
  if (UsesOffline(c)) {
    if (const json* o = top.Child("offline")) ReadOffline(*o, c.offline);
  } else {
    top.Reject("offline", used_by);
  }
  if (IsOnline(c.algorithm)) {
    if (const json* o = top.Child("online")) ReadOnline(*o, c.online);
  } else {
    top.Reject("online", used_by);
  }
  top.Finish();
  ValidateConfig(c);
  return c;
}

ExperimentConfig LoadConfig(const std::filesystem::path& path) {
  const std::string text = ReadFile(path);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    Fail(ErrorCode::kConfigInvalid, path.string() + ": " + e.what());
  }
  return ConfigFromJson(j);
}

std::vector<std::string_view> PresetNames() {
  return {"offline-reference", "online-reference", "bc",
          "best-of-n",         "mm-offline",       "mm-online",
          "ordering-bc",       "ordering-offline", "ordering-online"};
}

ExperimentConfig PresetConfig(std::string_view name) {
  ExperimentConfig c;
  c.mdp.vocab_size = 3;
  c.mdp.horizon = 3;
  c.mdp.gamma = 1.0;
  c.mdp.feature_dim = 8;
  c.mdp.prompt_count = 16;
  c.mdp.context_len = 2;
  c.mdp.feature_seed = 11;
  c.offline.beta = 1.0;
  c.offline.rounds = 200;
  c.offline.policy_lr = 1.0;
  c.offline.policy_update = PolicyUpdate::kNatural;
  c.online.iterations = 200;
  c.online.pref_batch = 16;
  c.online.opt_batch = 64;
  c.online.policy_lr = 20.0;
  c.online.lr_schedule = LrSchedule::kInvSqrt;

  if (name == "offline-reference" || name == "ordering-offline") {
    c.algorithm = Algorithm::kPbkdOffline;
    c.data.n = name == "offline-reference" ? 1000 : 500;
    if (name == "ordering-offline") c.label = "offline";
  } else if (name == "online-reference") {
    c.algorithm = Algorithm::kPbkdOnline;
    c.task.teacher_perturbation = 0.0;
    c.init = InitKind::kUniform;
  } else if (name == "bc" || name == "ordering-bc") {
    c.algorithm = Algorithm::kBc;
  } else if (name == "best-of-n") {
    c.algorithm = Algorithm::kBestOfN;
  } else if (name == "mm-offline") {
    c.algorithm = Algorithm::kMmOffline;
  } else if (name == "mm-online") {
    c.algorithm = Algorithm::kMmOnline;
    c.init = InitKind::kUniform;
    c.task.teacher_perturbation = 0.0;
    c.online.iterations = 50;
  } else if (name == "ordering-online") {
    c.algorithm = Algorithm::kPbkdOnline;
    c.label = "online";
    c.data.n = 500;
    c.warm_start = WarmStartKind::kOffline;
    c.online.iterations = 20;
    c.online.beta = 64.0;
  } else {
    Fail(ErrorCode::kConfigInvalid, "preset: unknown '" + std::string(name) + "'");
  }
  return c;
}

Task BuildTask(const ExperimentConfig& c) {
  TokenMdp mdp(c.mdp);
  mdp.RequireEnumerable();
  const int d = c.mdp.feature_dim;
  const double B = c.task.bound;
  Rng rng(c.task.reward_seed);
  Eigen::VectorXd theta_star = GaussianDirection(d, B, rng);
  Eigen::VectorXd theta_teacher =
      theta_star + GaussianDirection(d, c.task.teacher_perturbation, rng);
  if (theta_teacher.norm() == 0.0) {
    Fail(ErrorCode::kConfigInvalid, "task.teacher_perturbation: teacher reward is zero");
  }
  theta_teacher *= B / theta_teacher.norm();
  TabularPolicy teacher = c.task.teacher_temperature > 0.0
                              ? SoftenedOptimalPolicy(mdp, theta_teacher,
                                                      c.task.teacher_temperature)
                              : DpOptimalPolicy(mdp, theta_teacher);
  TabularPolicy mu0 = SoftenedOptimalPolicy(mdp, theta_teacher, c.task.mu0_temperature);
  TabularPolicy optimal = DpOptimalPolicy(mdp, theta_star);
  const double j_opt = ExactValue(mdp, optimal, theta_star);
  const double j_teacher = ExactValue(mdp, teacher, theta_star);
  SoftmaxLinearPolicy mu1(mdp);
  return {std::move(mdp), std::move(theta_star), std::move(theta_teacher),
          std::move(teacher), std::move(mu0), std::move(mu1), std::move(optimal),
          j_opt, j_teacher};
}

std::string TableToCsv(const Table& table) {
  std::string out;
  for (std::size_t i = 0; i < table.header.size(); ++i) {
    if (i) out += ',';
    out += table.header[i];
  }
  out += '\n';
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    if (row.size() != table.header.size()) {
      Fail(ErrorCode::kDimensionMismatch, "table row width differs from header");
    }
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (!std::isfinite(row[i])) {
        Fail(ErrorCode::kNonFinite,
             "row " + std::to_string(r) + " column " + table.header[i] + " is not finite");
      }
      if (i) out += ',';
      out += FormatDouble(row[i]);
    }
    out += '\n';
  }
  return out;
}

RunResult RunExperiment(const ExperimentConfig& config) {
  ValidateConfig(config);
  const Task task = BuildTask(config);
  const Streams streams = MakeStreams(config);
  const LinearReward rstar{task.theta_star, config.task.bound};
  const TokenMdp& mdp = task.mdp;

  RunResult out{config, {}, SoftmaxLinearPolicy(mdp), Eigen::VectorXd(), {}, 0.0,
                task.j_teacher, task.j_optimal, std::nullopt};
  if (out.config.label.empty()) out.config.label = AlgorithmName(config.algorithm);

  auto init_policy = [&]() {
    return config.init == InitKind::kBc ? FitBc(config, task, streams.demos, nullptr)
                                        : SoftmaxLinearPolicy(mdp);
  };

  switch (config.algorithm) {
    case Algorithm::kBc: {
      out.policy = FitBc(config, task, streams.demos, &out.trace);
      break;
    }
    case Algorithm::kBestOfN: {
      out.policy = FitBc(config, task, streams.demos, nullptr);
      out.dataset = LoadOrGenerate(config, task, streams.data);
      const MleFit mle = FitMle(out.dataset, mdp, config.task.bound);
      out.theta = mle.reward.theta;
      out.trace = {{"n", "j_rstar_estimate", "stderr"}, {}};
      Rng rng(streams.eval);
      std::vector<int> ladder;
      for (int k = 1; k < config.best_of_n.n; k *= 2) ladder.push_back(k);
      ladder.push_back(config.best_of_n.n);
      for (int k : ladder) {
        std::vector<double> values;
        for (int i = 0; i < config.best_of_n.eval_samples; ++i) {
          const Trajectory t =
              BestOfN(mdp, out.policy, mle.reward, mdp.SamplePrompt(rng), k, rng);
          values.push_back(TrajReward(rstar, t));
        }
        out.trace.rows.push_back({static_cast<double>(k), Mean(values), StdErr(values)});
      }
      out.j_student = out.trace.rows.back()[1];
      CheckFinite(out.j_student, "best-of-n value");
      return out;
    }
    case Algorithm::kPbkdOffline:
    case Algorithm::kMmOffline: {
      out.dataset = LoadOrGenerate(config, task, streams.data);
      const SoftmaxLinearPolicy init = init_policy();
      const OfflineConfig oc = ResolvedOffline(config, streams);
      if (config.algorithm == Algorithm::kPbkdOffline) {
        SolverResult r = SolveOffline(mdp, task.teacher, out.dataset, init, oc,
                                      &task.theta_star);
        out.policy = std::move(r.policy);
        out.theta = std::move(r.theta);
        out.trace = OfflineTrace(r.trace);
      } else {
        MmConfig mc;
        mc.offline = oc;
        MmResult r = SolveMm(mdp, task.teacher, out.dataset, init, mc, &rstar);
        out.policy = std::move(r.policy);
        out.theta = std::move(r.q.w);
        out.trace = OfflineTrace(r.offline_trace);
      }
      break;
    }
    case Algorithm::kPbkdOnline:
    case Algorithm::kMmOnline: {
      SoftmaxLinearPolicy start = init_policy();
      PreferenceDataset warm_data;
      Eigen::VectorXd warm_theta;
      const bool warm = config.warm_start == WarmStartKind::kOffline;
      const OnlineConfig online = ResolvedOnline(config, streams);
      if (warm) {
        warm_data = LoadOrGenerate(config, task, streams.data);
        const OfflineConfig oc = ResolvedOffline(config, streams);
        if (config.algorithm == Algorithm::kPbkdOnline) {
          SolverResult r = SolveOffline(mdp, task.teacher, warm_data, start, oc,
                                        &task.theta_star);
          start = std::move(r.policy);
          warm_theta = std::move(r.theta);
        } else {
          MmConfig mc;
          mc.offline = oc;
          MmResult r = SolveMm(mdp, task.teacher, warm_data, start, mc, &rstar);
          start = std::move(r.policy);
        }
      }
      if (config.algorithm == Algorithm::kPbkdOnline) {
        OnlineWarmStart ws;
        if (warm) {
          ws.data = &warm_data;
          ws.theta = warm_theta;
        }
        OnlineResult r = RunOnline(mdp, task.teacher, start, online, &rstar, ws);
        out.policy = std::move(r.policy);
        out.theta = std::move(r.theta);
        out.dataset = std::move(r.dataset);
        out.trace = OnlineTrace(r.trace);
      } else {
        MmConfig mc;
        mc.mode = MmMode::kOnline;
        mc.online = online;
        MmResult r = SolveMm(mdp, task.teacher, warm_data, start, mc, &rstar);
        out.policy = std::move(r.policy);
        out.theta = std::move(r.q.w);
        out.dataset = std::move(r.dataset);
        out.trace = OnlineTrace(r.online_trace);
      }
      out.regret_cumulative = out.trace.rows.back().back();
      break;
    }
  }
  out.j_student = ExactValue(mdp, out.policy, task.theta_star);
  CheckFinite(out.j_student, "student value");
  return out;
}

std::string RunId(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(HashName(ConfigToJson(config).dump())));
  return buf;
}

RunSummary SummarizeRun(const RunResult& r) {
  RunSummary s;
  s.label = r.config.label.empty() ? std::string(AlgorithmName(r.config.algorithm))
                                   : r.config.label;
  s.seed = r.config.seed;
  s.mdp = json::parse(MdpToJson(r.config.mdp).dump());
  s.theta_star = BuildTask(r.config).theta_star;
  s.j_rstar = r.j_student;
  s.regret = r.regret_cumulative;
  return s;
}

std::filesystem::path WriteArtifact(const RunResult& r, const std::filesystem::path& root) {
  const std::filesystem::path dir = root / ("run-" + RunId(r.config));
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) Fail(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  // Trace first: a non-finite value aborts before anything else is written.
  const std::string trace = TableToCsv(r.trace);
  WriteFile(dir / "config.json", ConfigToJson(r.config).dump(2) + "\n");
  WriteFile(dir / "trace.csv", trace);
  {
    std::ostringstream ds;
    WriteRecords(ds, r.dataset);
    WriteFile(dir / "dataset.jsonl", ds.str());
  }
  {
    std::ostringstream ps;
    WritePolicyRecord(ps, r.policy);
    WriteFile(dir / "policy.txt", ps.str());
  }
  WriteFile(dir / "model.json",
            ordered_json{{"theta", ToVector(r.theta)}, {"bound", r.config.task.bound}}.dump(2) +
                "\n");
  const RunSummary s = SummarizeRun(r);
  ordered_json summary = {{"label", s.label},
                          {"algorithm", AlgorithmName(r.config.algorithm)},
                          {"seed", s.seed},
                          {"mdp", s.mdp},
                          {"theta_star", ToVector(s.theta_star)},
                          {"j_rstar", r.j_student},
                          {"j_teacher", r.j_teacher},
                          {"j_optimal", r.j_optimal},
                          {"subopt", r.j_optimal - r.j_student},
                          {"regret", r.regret_cumulative ? json(*r.regret_cumulative) : json()},
                          {"fingerprint",
                           {{"version", kVersion}, {"seed", r.config.seed},
                            {"build", PBKD_BUILD_ID}}}};
  WriteFile(dir / "summary.json", summary.dump(2) + "\n");
  return dir;
}

std::filesystem::path ResolveOutputRoot(const std::string& cli_out,
                                        const ExperimentConfig& config) {
  if (!cli_out.empty()) return cli_out;
  if (!config.output_dir.empty()) return config.output_dir;
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') {
    return env;
  }
  return "runs";
}

SweepAxis ParseSweepAxis(std::string_view name) {
  if (name == "N") return SweepAxis::kN;
  if (name == "T") return SweepAxis::kT;
  Fail(ErrorCode::kConfigInvalid, "axis: expected N or T, got '" + std::string(name) + "'");
}

SweepResult RunSweep(const ExperimentConfig& base, const SweepSpec& spec) {
  if (spec.values.size() < 3) Fail(ErrorCode::kConfigInvalid, "values: need >= 3 entries");
  for (std::size_t i = 1; i < spec.values.size(); ++i) {
    if (spec.values[i] <= spec.values[i - 1]) {
      Fail(ErrorCode::kConfigInvalid, "values: must be strictly increasing");
    }
  }
  if (spec.values.front() < 1) Fail(ErrorCode::kConfigInvalid, "values: must be >= 1");
  if (spec.seeds < 1) Fail(ErrorCode::kConfigInvalid, "seeds: must be >= 1");
  if (spec.axis == SweepAxis::kN && !UsesData(base)) {
    Fail(ErrorCode::kConfigInvalid,
         "axis: N needs an algorithm that reads offline data, not " +
             std::string(AlgorithmName(base.algorithm)));
  }
  if (spec.axis == SweepAxis::kT && !IsOnline(base.algorithm)) {
    Fail(ErrorCode::kConfigInvalid, "axis: T needs an online algorithm, not " +
                                        std::string(AlgorithmName(base.algorithm)));
  }
  ValidateConfig(base);

  SweepResult out;
  out.spec = spec;
  out.quantity = spec.axis == SweepAxis::kN ? "subopt" : "regret";
  const std::size_t n_cells = spec.values.size() * static_cast<std::size_t>(spec.seeds);
  out.cells.resize(n_cells);
  std::vector<std::vector<double>> curves(n_cells);
  std::vector<std::optional<std::string>> failures(n_cells);
  std::vector<ErrorCode> codes(n_cells, ErrorCode::kNonFinite);

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < n_cells; i = next++) {
      const int value = spec.values[i / spec.seeds];
      ExperimentConfig c = base;
      c.seed = base.seed + i % spec.seeds;
      if (spec.axis == SweepAxis::kN) {
        c.data.n = value;
      } else {
        c.online.iterations = value;
      }
      out.cells[i] = {value, c.seed, 0.0};
      try {
        const RunResult r = RunExperiment(c);
        out.cells[i].metric = spec.axis == SweepAxis::kN ? r.j_optimal - r.j_student
                                                         : *r.regret_cumulative;
        if (spec.axis == SweepAxis::kT) {
          for (const auto& row : r.trace.rows) curves[i].push_back(r.j_optimal - row[2]);
        }
      } catch (const Error& e) {
        failures[i] = e.what();
        codes[i] = e.code();
      }
    }
  };
  int threads = spec.threads > 0 ? spec.threads
                                 : static_cast<int>(std::thread::hardware_concurrency());
  threads = std::clamp(threads, 1, static_cast<int>(n_cells));
  std::vector<std::thread> pool;
  for (int t = 1; t < threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  out.summary = {{"value", "seeds", "mean", "se"}, {}};
  std::vector<double> xs;
  std::vector<double> ys;
  for (std::size_t v = 0; v < spec.values.size(); ++v) {
    std::vector<double> metrics;
    for (int s = 0; s < spec.seeds; ++s) {
      const std::size_t i = v * spec.seeds + s;
      if (!failures[i]) metrics.push_back(out.cells[i].metric);
    }
    if (metrics.empty()) continue;
    out.summary.rows.push_back({static_cast<double>(spec.values[v]),
                                static_cast<double>(metrics.size()), Mean(metrics),
                                StdErr(metrics)});
    xs.push_back(spec.values[v]);
    ys.push_back(Mean(metrics));
  }
  if (spec.axis == SweepAxis::kT) {
    const std::size_t last = spec.values.size() - 1;
    int used = 0;
    for (int s = 0; s < spec.seeds; ++s) {
      const auto& curve = curves[last * spec.seeds + s];
      if (curve.empty()) continue;
      if (out.mean_regret_curve.empty()) out.mean_regret_curve.assign(curve.size(), 0.0);
      for (std::size_t t = 0; t < curve.size(); ++t) out.mean_regret_curve[t] += curve[t];
      ++used;
    }
    for (double& r : out.mean_regret_curve) r /= used;
  }
  for (std::size_t i = 0; i < n_cells; ++i) {
    if (failures[i]) {
      out.failures.push_back({out.cells[i].value, out.cells[i].seed, codes[i], *failures[i]});
    }
  }
  if (xs.size() >= 3) {
    try {
      out.fit = FitRate(xs, ys);
    } catch (const Error& e) {
      out.failures.push_back({0, 0, e.code(), std::string("rate fit: ") + e.what()});
    }
  }
  return out;
}

void WriteSweep(const SweepResult& r, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) Fail(ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
  WriteFile(dir / "summary.csv", TableToCsv(r.summary));
  Table cells{{"value", "seed", r.quantity}, {}};
  for (const SweepCell& c : r.cells) {
    const bool failed = std::any_of(r.failures.begin(), r.failures.end(), [&](const auto& f) {
      return f.value == c.value && f.seed == c.seed;
    });
    if (!failed) cells.rows.push_back({double(c.value), double(c.seed), c.metric});
  }
  WriteFile(dir / "cells.csv", TableToCsv(cells));
  if (!r.mean_regret_curve.empty()) {
    Table curve{{"t", "regret"}, {}};
    for (std::size_t t = 0; t < r.mean_regret_curve.size(); ++t) {
      curve.rows.push_back({double(t + 1), r.mean_regret_curve[t]});
    }
    WriteFile(dir / "regret_curve.csv", TableToCsv(curve));
  }
  if (r.fit.x.size() >= 3) {
    WriteFile(dir / "fit.json",
              ordered_json{{"axis", r.spec.axis == SweepAxis::kN ? "N" : "T"},
                           {"quantity", r.quantity},
                           {"slope", r.fit.slope},
                           {"intercept", r.fit.intercept},
                           {"residual_rms", r.fit.residual_rms}}
                      .dump(2) +
                  "\n");
  }
  if (!r.failures.empty()) {
    ordered_json f = ordered_json::array();
    for (const SweepFailure& x : r.failures) {
      f.push_back({{"value", x.value},
                   {"seed", x.seed},
                   {"code", ErrorCodeName(x.code)},
                   {"message", x.message}});
    }
    WriteFile(dir / "failures.json", f.dump(2) + "\n");
  }
}

RateFit RatesFromSummary(const std::filesystem::path& summary_csv) {
  std::istringstream in(ReadFile(summary_csv));
  std::string line;
  if (!std::getline(in, line)) Fail(ErrorCode::kIo, summary_csv.string() + ": empty file");
  const std::vector<std::string> header = SplitCsvLine(line);
  auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      Fail(ErrorCode::kConfigInvalid, summary_csv.string() + ": no '" + name + "' column");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t cx = column("value");
  const std::size_t cy = column("mean");
  std::vector<double> xs;
  std::vector<double> ys;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = SplitCsvLine(line);
    if (cells.size() != header.size()) {
      Fail(ErrorCode::kConfigInvalid, summary_csv.string() + ": ragged row");
    }
    try {
      xs.push_back(std::stod(cells[cx]));
      ys.push_back(std::stod(cells[cy]));
    } catch (const std::exception&) {
      Fail(ErrorCode::kConfigInvalid, summary_csv.string() + ": unparsable number");
    }
  }
  return FitRate(xs, ys);
}

RunSummary LoadRunSummary(const std::filesystem::path& run_dir) {
  json j;
  try {
    j = json::parse(ReadFile(run_dir / "summary.json"));
    RunSummary s;
    s.label = j.at("label").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.mdp = j.at("mdp");
    const auto theta = j.at("theta_star").get<std::vector<double>>();
    s.theta_star = Eigen::Map<const Eigen::VectorXd>(theta.data(), theta.size());
    s.j_rstar = j.at("j_rstar").get<double>();
    if (!j.at("regret").is_null()) s.regret = j.at("regret").get<double>();
    return s;
  } catch (const json::exception& e) {
    Fail(ErrorCode::kIo, (run_dir / "summary.json").string() + ": " + e.what());
  }
}

CompareReport CompareRuns(const std::vector<RunSummary>& runs, std::string_view metric) {
  if (metric != "j_rstar" && metric != "regret") {
    Fail(ErrorCode::kConfigInvalid, "metric: expected j_rstar or regret");
  }
  if (runs.empty()) Fail(ErrorCode::kConfigInvalid, "runs: none given");
  for (const RunSummary& r : runs) {
    if (r.mdp != runs.front().mdp) {
      Fail(ErrorCode::kIncompatibleRuns, "runs '" + runs.front().label + "' and '" + r.label +
                                             "' use different mdp specs");
    }
    if (r.theta_star.size() != runs.front().theta_star.size() ||
        r.theta_star != runs.front().theta_star) {
      Fail(ErrorCode::kIncompatibleRuns, "runs '" + runs.front().label + "' and '" + r.label +
                                             "' use different oracle rewards");
    }
    if (metric == "regret" && !r.regret) {
      Fail(ErrorCode::kIncompatibleRuns, "run '" + r.label + "' has no regret");
    }
  }
  CompareReport out;
  out.metric = metric;
  std::vector<std::string> order;
  std::map<std::string, std::map<std::uint64_t, double>> by_label;
  for (const RunSummary& r : runs) {
    if (!by_label.count(r.label)) order.push_back(r.label);
    by_label[r.label][r.seed] = metric == "regret" ? *r.regret : r.j_rstar;
  }
  for (const std::string& label : order) {
    std::vector<double> v;
    for (const auto& [seed, x] : by_label[label]) v.push_back(x);
    out.methods.push_back({label, static_cast<int>(v.size()), Mean(v), StdErr(v)});
  }
  out.monotone = true;
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto& lo = by_label[order[i - 1]];
    const auto& hi = by_label[order[i]];
    std::vector<double> diffs;
    for (const auto& [seed, x] : hi) {
      if (auto it = lo.find(seed); it != lo.end()) diffs.push_back(x - it->second);
    }
    AdjacentGap g{order[i - 1], order[i], out.methods[i].mean - out.methods[i - 1].mean,
                  0.0, false};
    if (!diffs.empty()) {
      g.gap = Mean(diffs);
      g.paired_se = StdErr(diffs);
    }
    g.exceeds_se = std::abs(g.gap) > g.paired_se;
    out.monotone = out.monotone && g.gap >= 0.0;
    out.gaps.push_back(g);
  }
  return out;
}

LemmaReport PdlIdentityCheck(Rng& rng, int trials, double tolerance) {
  LemmaReport report;
  for (int trial = 0; trial < trials; ++trial) {
    const TinyInstance inst = DrawTiny(rng);
    const QTable q =
        QTeacherExact(inst.mdp, inst.teacher, LinearStepReward(inst.mdp, inst.theta));
    const double pdl = PdlGap(inst.mdp, inst.teacher, inst.student, AsQFunction(inst.mdp, q),
                              ValueMode::kExact, 1, rng);
    const double diff = ExactValue(inst.mdp, inst.teacher, inst.theta) -
                        ExactValue(inst.mdp, inst.student, inst.theta);
    const double err = std::abs(pdl - diff);
    LemmaRow row{trial, err, tolerance, tolerance - err, err > tolerance};
    report.violations += row.violation;
    report.min_margin = trial == 0 ? row.margin : std::min(report.min_margin, row.margin);
    report.rows.push_back(row);
  }
  return report;
}

LemmaReport BellmanInversionCheck(Rng& rng, int trials, double tolerance) {
  LemmaReport report;
  for (int trial = 0; trial < trials; ++trial) {
    const TinyInstance inst = DrawTiny(rng);
    const TokenMdp& mdp = inst.mdp;
    const StepRewardFn r = LinearStepReward(mdp, inst.theta);
    const QTable q = QTeacherExact(mdp, inst.teacher, r);
    const QFunction f = AsQFunction(mdp, q);
    double err = 0.0;
    for (int x = 0; x < mdp.prompt_count(); ++x) {
      for (int h = 0; h < mdp.horizon(); ++h) {
        const std::int64_t width = mdp.LevelOffset(h + 1) - mdp.LevelOffset(h);
        for (std::int64_t code = 0; code < width; ++code) {
          const std::vector<int> s = DecodePrefix(mdp, h, code);
          for (int a = 0; a < mdp.vocab_size(); ++a) {
            err = std::max(err, std::abs(InducedReward(mdp, inst.teacher, f, x, s, a) -
                                         r(x, s, a)));
          }
        }
      }
    }
    LemmaRow row{trial, err, tolerance, tolerance - err, err > tolerance};
    report.violations += row.violation;
    report.min_margin = trial == 0 ? row.margin : std::min(report.min_margin, row.margin);
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace pbkd
