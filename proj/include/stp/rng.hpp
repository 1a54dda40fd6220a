#pragma once

#include <cstdint>
#include <random>

namespace stp {

/// Seeded generator with platform-independent uniform and normal draws
/// (std:: distributions are implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : engine_() % n; }
  /// Standard normal via Box-Muller; consumes two uniforms per draw.
  double normal();

  /// Independent stream derived from (seed, a, b) by SplitMix64 mixing.
  static Rng derive(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

 private:
  std::mt19937_64 engine_;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace stp
