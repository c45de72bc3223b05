#pragma once

// Deterministic random streams. Every stochastic component takes an explicit
// Rng; there is no global generator state anywhere in the library. Streams
// are split by label so that two call sites never share a sequence, and a
// child stream depends only on (parent seed, label), not on how many numbers
// the parent has produced.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace das1d {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += kGolden;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

inline std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

}  // namespace detail

// Derives the seed for trial `index` of a study. Bijective in `index` for a
// fixed base, so per-trial seeds never collide.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t x = base ^ ((index + 1) * detail::kGolden);
  return detail::splitmix64(x);
}

// xoshiro256++ seeded through splitmix64.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& w : state_) w = detail::splitmix64(x);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result =
        detail::rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = detail::rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  int uniform_int(int n) {
    int v = static_cast<int>(uniform() * static_cast<double>(n));
    return v < n ? v : n - 1;
  }

  // Standard normal, Box-Muller with a cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent child stream. Depends only on this stream's seed and the
  // label, never on consumption, so call order elsewhere cannot shift it.
  Rng split(std::uint64_t salt) const {
    std::uint64_t x = seed_ ^ (salt * detail::kGolden + 0x9E3779B9ull);
    return Rng(detail::splitmix64(x));
  }

  Rng split(std::string_view label) const {
    return split(detail::fnv1a64(label));
  }

 private:
  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace das1d
