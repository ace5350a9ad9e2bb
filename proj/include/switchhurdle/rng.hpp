#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace switchhurdle {

/// Seeded generator with a platform-independent uniform mapping. Subsystem
/// streams are derived with split() so one root seed drives everything.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  bool bernoulli(double p) { return uniform() < p; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller.
  double normal();

  /// Independent child stream keyed by a tag; does not advance this stream.
  Rng split(std::string_view tag) const;
  Rng split(std::uint64_t key) const;

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace switchhurdle
