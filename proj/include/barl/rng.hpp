#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <string_view>
#include <vector>

namespace barl {

/// Deterministic counter-friendly RNG (splitmix64). All randomness in the
/// project flows through keyed streams of this generator so that any draw is
/// reproducible from (seed, purpose, counters) alone, independent of the
/// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double unif() { return static_cast<double>(u64() >> 11) * 0x1.0p-53; }

  double unif(double lo, double hi) { return lo + (hi - lo) * unif(); }

  /// Uniform integer in [lo, hi], inclusive.
  int64_t unif_int(int64_t lo, int64_t hi) {
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(u64() % span);
  }

  bool coin() { return (u64() & 1ull) != 0; }

  /// Standard normal via Box-Muller; stateless (no cached second draw).
  double normal() {
    double u1 = unif();
    if (u1 < 0x1.0p-53) u1 = 0x1.0p-53;
    double u2 = unif();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(unif_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

/// FNV-1a fold of a label and counters into a stream key. Distinct purposes
/// get distinct labels so streams never collide across subsystems.
inline uint64_t rng_key(std::string_view label, std::initializer_list<uint64_t> counters) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffull;
      h *= 0x100000001b3ull;
    }
  };
  for (char c : label) {
    h ^= static_cast<uint8_t>(c);
    h *= 0x100000001b3ull;
  }
  for (uint64_t v : counters) mix(v);
  return h;
}

inline Rng rng_stream(uint64_t seed, std::string_view label, std::initializer_list<uint64_t> counters = {}) {
  return Rng(rng_key(label, counters) ^ (seed * 0x9e3779b97f4a7c15ull));
}

}  // namespace barl
