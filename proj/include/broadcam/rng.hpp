#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string_view>

namespace broadcam {

// Seeded generator with platform-stable output. The engine is std::mt19937_64
// (its sequence is fixed by the standard); the distributions below are our
// own so results do not depend on the standard library vendor. Substreams are
// derived by hashing (seed, stream) with SplitMix64.
class Rng {
 public:
  static constexpr std::string_view kName = "mt19937_64/splitmix64-v1";

  explicit Rng(std::uint64_t seed);
  Rng(std::uint64_t seed, std::uint64_t stream);

  // Independent generator for a sub-task, e.g. one per sample.
  Rng split(std::uint64_t stream) const { return Rng(seed_, stream_ * 0x9e3779b97f4a7c15ULL + stream + 1); }

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                              // [0, 1)
  double uniform(double lo, double hi);
  std::uint64_t uniform_int(std::uint64_t n);    // [0, n)
  int uniform_int(int lo, int hi);               // [lo, hi]
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace broadcam
