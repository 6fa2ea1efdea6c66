#pragma once

#include <cmath>
#include <cstdint>

namespace scalelab {

// Counter-based deterministic RNG (splitmix64 over seed + counter).
// A draw sequence is a pure function of (seed, counter), so results do not
// depend on evaluation order, thread count, or platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed) {}

  uint64_t next_u64() { return mix64(seed_ + kGolden * ++counter_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; consumes two raw draws per call.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

  // Normal redrawn until |z| <= cut.
  double truncated_normal(double cut = 2.0) {
    double z = normal();
    while (std::fabs(z) > cut) z = normal();
    return z;
  }

  // Integer in [0, n).
  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  uint64_t seed() const { return seed_; }
  uint64_t counter() const { return counter_; }

  // Derive a named sub-stream seed; used to give each parameter tensor its
  // own stream independent of initialization order.
  static uint64_t derive(uint64_t seed, uint64_t stream) {
    return mix64(mix64(seed + kGolden) ^ mix64(stream + 0x8000000000000001ULL));
  }

  static uint64_t mix64(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  static uint64_t hash_str(const char* s) {
    // FNV-1a
    uint64_t h = 0xCBF29CE484222325ULL;
    for (; *s; ++s) h = (h ^ static_cast<unsigned char>(*s)) * 0x100000001B3ULL;
    return h;
  }

 private:
  static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
  static constexpr double kPi = 3.14159265358979323846;
  uint64_t seed_ = 0;
  uint64_t counter_ = 0;
};

}  // namespace scalelab
