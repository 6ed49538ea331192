#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace advobj {

/// Deterministic random source. The engine is std::mt19937_64, whose output
/// sequence is fixed by the standard; the distributions are implemented here
/// so that draws are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  /// Standard normal (Box-Muller, one draw per call).
  double normal();

 private:
  std::mt19937_64 engine_;
};

/// Seed for a named sub-component: splitmix64(seed ^ fnv1a64(name)).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view component);

std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace advobj
