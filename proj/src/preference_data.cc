#include "pbkd/preference_data.h"

#include <algorithm>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "pbkd/error.h"
#include "pbkd/reward_model.h"

namespace pbkd {
namespace {

constexpr int kRecordVersion = 1;

PreferenceSample DrawPair(const TokenMdp& mdp, const Policy& p0,
                          const Policy& p1, std::uint64_t seed, Rng& rng) {
  PreferenceSample s;
  s.seed = seed;
  s.prompt = mdp.SamplePrompt(rng);
  s.traj0 = Rollout(mdp, p0, s.prompt, rng);
  s.traj1 = Rollout(mdp, p1, s.prompt, rng);
  return s;
}

}  // namespace

std::string_view ProvenanceName(Provenance p) {
  switch (p) {
    case Provenance::kOfflineBtl:
      return "offline-btl";
    case Provenance::kOnlineForced:
      return "online-forced";
    case Provenance::kOnlineBtl:
      return "online-btl";
  }
  return "unknown";
}

Provenance ParseProvenance(std::string_view name) {
  for (Provenance p : {Provenance::kOfflineBtl, Provenance::kOnlineForced,
                       Provenance::kOnlineBtl}) {
    if (ProvenanceName(p) == name) return p;
  }
  Fail(ErrorCode::kIo, "unknown provenance '" + std::string(name) + "'");
}

int PreferenceDataset::max_iteration() const {
  int m = -1;
  for (const auto& s : samples_) m = std::max(m, s.iteration);
  return m;
}

void PreferenceDataset::Extend(std::span<const PreferenceSample> samples) {
  int floor = samples_.empty() ? -1 : samples_.back().iteration;
  for (const PreferenceSample& s : samples) {
    if (s.label != 0 && s.label != 1) {
      Fail(ErrorCode::kMalformedTrajectory, "label must be 0 or 1");
    }
    if (s.traj0.prompt != s.prompt || s.traj1.prompt != s.prompt) {
      Fail(ErrorCode::kMalformedTrajectory,
           "both trajectories must share the sample's prompt");
    }
    if (s.iteration < floor) {
      Fail(ErrorCode::kIterationOrderViolation,
           "iteration " + std::to_string(s.iteration) + " after " +
               std::to_string(floor));
    }
    floor = s.iteration;
  }
  samples_.insert(samples_.end(), samples.begin(), samples.end());
}

void PreferenceDataset::Add(PreferenceSample sample) {
  Extend(std::span<const PreferenceSample>(&sample, 1));
}

PreferenceDataset Append(PreferenceDataset dataset,
                         std::span<const PreferenceSample> samples) {
  dataset.Extend(samples);
  return dataset;
}

PreferenceDataset GenerateOffline(const TokenMdp& mdp, const Policy& mu0,
                                  const Policy& mu1, const LinearReward& rstar,
                                  int n, Rng& rng) {
  if (n < 1) Fail(ErrorCode::kConfigInvalid, "dataset size must be >= 1");
  PreferenceDataset dataset;
  dataset.metadata().seeds.push_back(rng.seed());
  std::vector<PreferenceSample> samples;
  samples.reserve(n);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t seed = rng.engine()();
    Rng local(seed);
    PreferenceSample s = DrawPair(mdp, mu0, mu1, seed, local);
    s.label = local.Bernoulli(BtlProb(rstar, s.traj0, s.traj1)) ? 1 : 0;
    s.provenance = Provenance::kOfflineBtl;
    s.iteration = -1;
    samples.push_back(std::move(s));
  }
  dataset.Extend(samples);
  return dataset;
}

PreferenceSample GenerateOnlineSample(const TokenMdp& mdp,
                                      const Policy& teacher,
                                      const Policy& student, int iteration,
                                      LabelMode labeling,
                                      const LinearReward* rstar, Rng& rng) {
  if (labeling == LabelMode::kOracle && rstar == nullptr) {
    Fail(ErrorCode::kMissingOracle, "oracle labels need the true reward");
  }
  const std::uint64_t seed = rng.engine()();
  Rng local(seed);
  PreferenceSample s = DrawPair(mdp, teacher, student, seed, local);
  s.iteration = iteration;
  if (labeling == LabelMode::kForced) {
    s.label = 1;
    s.provenance = Provenance::kOnlineForced;
  } else {
    s.label = local.Bernoulli(BtlProb(*rstar, s.traj0, s.traj1)) ? 1 : 0;
    s.provenance = Provenance::kOnlineBtl;
  }
  return s;
}

void WriteRecords(std::ostream& out, const PreferenceDataset& dataset) {
  for (const PreferenceSample& s : dataset.samples()) {
    nlohmann::ordered_json j;
    j["version"] = kRecordVersion;
    j["o"] = s.label;
    j["x"] = s.prompt;
    j["actions0"] = s.traj0.actions;
    j["actions1"] = s.traj1.actions;
    j["provenance"] = ProvenanceName(s.provenance);
    j["iteration"] = s.iteration;
    j["seeds"] = std::vector<std::uint64_t>{s.seed};
    out << j.dump() << '\n';
  }
}

PreferenceDataset ReadRecords(std::istream& in, const TokenMdp& mdp) {
  PreferenceDataset dataset;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.at("version").get<int>() != kRecordVersion) {
        Fail(ErrorCode::kIo, "unsupported record version");
      }
      PreferenceSample s;
      s.label = j.at("o").get<int>();
      s.prompt = j.at("x").get<int>();
      s.traj0 = MakeTrajectory(mdp, s.prompt,
                               j.at("actions0").get<std::vector<int>>());
      s.traj1 = MakeTrajectory(mdp, s.prompt,
                               j.at("actions1").get<std::vector<int>>());
      s.provenance = ParseProvenance(j.at("provenance").get<std::string>());
      s.iteration = j.at("iteration").get<int>();
      const auto seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
      s.seed = seeds.empty() ? 0 : seeds.front();
      dataset.Add(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      Fail(ErrorCode::kIo,
           "record line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return dataset;
}

}  // namespace pbkd
