#pragma once

// Portable draws on top of mt19937_64. The std distributions are
// implementation-defined, which would break byte-identical reports across
// standard libraries.

#include <cstdint>
#include <random>

namespace remo {

using Rng = std::mt19937_64;

inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform_real(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Unbiased integer in [0, n).
inline std::uint64_t uniform_below(Rng& rng, std::uint64_t n) {
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t v;
  do {
    v = rng();
  } while (v >= limit);
  return v % n;
}

inline bool fair_coin(Rng& rng) { return (rng() >> 63) != 0; }

// Stable per-purpose seed so sub-streams do not overlap.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t purpose) {
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (purpose + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace remo
