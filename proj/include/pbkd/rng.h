#ifndef PBKD_RNG_H_
#define PBKD_RNG_H_

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include <Eigen/Dense>

namespace pbkd {

std::uint64_t SplitMix64(std::uint64_t x);

// FNV-1a, used to turn stream names into seed offsets.
std::uint64_t HashName(std::string_view name);

// Derives an independent seed for the named sub-stream of `master`. Streams
// are keyed by (name, index) so adding a consumer never shifts another one.
std::uint64_t DeriveSeed(std::uint64_t master, std::string_view stream,
                         std::uint64_t index = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  // Uniform on [0, 1) with 53 random bits.
  double Uniform();
  double Normal();
  bool Bernoulli(double p) { return Uniform() < p; }
  // Uniform integer in [0, n).
  int Index(int n);
  // Samples an index from a probability vector by inverse CDF. The last
  // non-zero entry absorbs any rounding slack.
  int Categorical(const Eigen::VectorXd& probs);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace pbkd

#endif  // PBKD_RNG_H_
