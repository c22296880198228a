#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace convattn {

using Rng = std::mt19937_64;

// All randomness in a run derives from one seed. Each consumer draws from a
// named stream ("init", "dropout", "shuffle", "synth") with an optional index
// (epoch, step, ...), so streams never interfere with each other.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (char ch : stream) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ULL;
  }
  return splitmix64(splitmix64(seed ^ h) + index);
}

inline Rng make_rng(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0) {
  return Rng(stream_seed(seed, stream, index));
}

/// Uniform double in [0, 1) with 53 random bits; independent of the
/// standard library's distribution implementation.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

// Box-Muller; one draw per call.
inline double normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

}  // namespace convattn
