#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string_view>

namespace kforge {

// Seeded generator with platform-stable derived draws. The standard
// distributions are implementation-defined, so uniform/normal are spelled out.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  /// Independent generator for a named purpose, so adding draws to one
  /// stream never shifts another.
  static Rng stream(std::uint64_t seed, std::string_view name);

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n);
  double normal();

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

class InvalidDistributionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Inverse-CDF draw from a categorical distribution using one uniform.
std::size_t categorical_sample(std::span<const double> probs, Rng& rng);

}  // namespace kforge
