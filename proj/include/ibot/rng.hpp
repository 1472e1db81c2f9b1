#pragma once

// Counter-based PRNG used everywhere randomness is needed.
// The generator is a SplitMix64 counter stream: draw i of a stream seeded
// with s is splitmix64(s + i * GOLDEN). Identical (seed, draw index) pairs
// produce identical values on every platform; independent streams are
// derived by hashing (seed, stream index). Changing this scheme is a
// format-breaking change (documented in the README).

#include <cmath>
#include <cstdint>
#include <numbers>

namespace ibot {

inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  std::uint64_t next_u64() { return splitmix64(seed_ + counter_++ * 0x9E3779B97F4A7C15ULL); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    return n ? next_u64() % n : 0;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // standard normal via Box-Muller (one value per call, no cached state)
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  // Independent stream for worker / sample `index`.
  Rng derive(std::uint64_t index) const {
    return Rng(splitmix64(seed_ ^ splitmix64(index + 0x51ED270B7A4FC1E5ULL)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace ibot
