#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace recas {

/// splitmix64 generator with hand-written distributions. The whole stream,
/// including normal and Poisson draws, is specified here so other
/// implementations of the wire protocol can replay it exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : state_(seed) {}

  std::uint64_t next_u64() noexcept {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept { return std::uint64_t(uniform() * double(n)) % n; }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Box-Muller; consumes two uniforms per call, no cached second value.
  double normal(double mean = 0.0, double sd = 1.0) noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Knuth's multiplication method, split into chunks of mean <= 256.
  std::uint64_t poisson(double mean) noexcept {
    if (!(mean > 0.0)) return 0;
    std::uint64_t total = 0;
    while (mean > 0.0) {
      const double chunk = mean > 256.0 ? 256.0 : mean;
      mean -= chunk;
      const double limit = std::exp(-chunk);
      double prod = uniform();
      while (prod > limit) {
        ++total;
        prod *= uniform();
      }
    }
    return total;
  }

 private:
  std::uint64_t state_;
};

/// Order-sensitive mixing of stream identifiers into one seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
  Rng r(a ^ (b * 0xD1B54A32D192ED03ULL));
  return r.next_u64();
}

/// FNV-1a, used to turn slide ids into stream identifiers.
inline std::uint64_t hash_string(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace recas
