#ifndef PBKD_PREFERENCE_DATA_H_
#define PBKD_PREFERENCE_DATA_H_

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pbkd/mdp.h"
#include "pbkd/policy.h"
#include "pbkd/rng.h"

namespace pbkd {

struct LinearReward;

enum class Provenance { kOfflineBtl, kOnlineForced, kOnlineBtl };

std::string_view ProvenanceName(Provenance p);
Provenance ParseProvenance(std::string_view name);

// Label 1 means traj0 is preferred over traj1.
struct PreferenceSample {
  int label = 1;
  int prompt = 0;
  Trajectory traj0;
  Trajectory traj1;
  Provenance provenance = Provenance::kOfflineBtl;
  // -1 for offline data.
  int iteration = -1;
  std::uint64_t seed = 0;
};

struct DatasetMetadata {
  std::string annotator0;
  std::string annotator1;
  std::vector<std::uint64_t> seeds;
};

// Append-only ordered collection; iteration indices never decrease.
class PreferenceDataset {
 public:
  PreferenceDataset() = default;

  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  const std::vector<PreferenceSample>& samples() const { return samples_; }
  const PreferenceSample& operator[](std::size_t i) const { return samples_[i]; }

  DatasetMetadata& metadata() { return metadata_; }
  const DatasetMetadata& metadata() const { return metadata_; }

  // Throws kIterationOrderViolation if any new iteration index is below the
  // current maximum (or below an earlier sample in `samples`).
  void Extend(std::span<const PreferenceSample> samples);
  void Add(PreferenceSample sample);

  int max_iteration() const;

 private:
  std::vector<PreferenceSample> samples_;
  DatasetMetadata metadata_;
};

PreferenceDataset Append(PreferenceDataset dataset,
                         std::span<const PreferenceSample> samples);

// x ~ d0, traj0 ~ mu0|x, traj1 ~ mu1|x, o ~ Bernoulli(BTL under r*).
PreferenceDataset GenerateOffline(const TokenMdp& mdp, const Policy& mu0,
                                  const Policy& mu1, const LinearReward& rstar,
                                  int n, Rng& rng);

enum class LabelMode { kForced, kOracle };

// traj0 from the teacher, traj1 from the student. Forced mode always labels
// the teacher as preferred; oracle mode draws the label from BTL under r*.
// Throws kMissingOracle for oracle mode without r*.
PreferenceSample GenerateOnlineSample(const TokenMdp& mdp,
                                      const Policy& teacher,
                                      const Policy& student, int iteration,
                                      LabelMode labeling,
                                      const LinearReward* rstar, Rng& rng);

// One JSON object per line: version, o, x, actions0, actions1, provenance,
// iteration, seeds. Features are recomputed from the mdp on read.
void WriteRecords(std::ostream& out, const PreferenceDataset& dataset);
PreferenceDataset ReadRecords(std::istream& in, const TokenMdp& mdp);

}  // namespace pbkd

#endif  // PBKD_PREFERENCE_DATA_H_
