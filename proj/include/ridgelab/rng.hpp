#pragma once

#include <cmath>
#include <cstdint>

namespace ridgelab::rng {

/// Counter-based deterministic random numbers.
///
/// Every draw is a pure function of a seed and a few integer coordinates
/// (stream id, indices). Values do not depend on draw order or thread
/// scheduling, so any parallel evaluation of the same keys reproduces the same
/// stream bit-for-bit.

// Named streams so independent consumers never collide on the same keys.
enum Stream : std::uint64_t {
  kFrozenWx = 0x11,
  kFrozenWt = 0x12,
  kFrozenBias = 0x13,
  kKernelNoise = 0x21,
  kLossNoise = 0x22,
  kSamplerInit = 0x31,
  kSamplerNoise = 0x32,
  kInitA = 0x41,
  kMlpInit = 0x42,
  kMlpNoise = 0x43,
};

// SplitMix64 finalizer.
inline std::uint64_t mix(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t key(std::uint64_t seed, std::uint64_t stream,
                         std::uint64_t i = 0, std::uint64_t j = 0,
                         std::uint64_t k = 0, std::uint64_t l = 0) {
  std::uint64_t h = mix(seed);
  h = mix(h ^ stream);
  h = mix(h ^ i);
  h = mix(h ^ j);
  h = mix(h ^ k);
  h = mix(h ^ l);
  return h;
}

// Uniform in (0, 1]; never returns 0 so it is safe under log().
inline double uniform(std::uint64_t k) {
  return static_cast<double>((k >> 11) + 1) * 0x1.0p-53;
}

/// Standard normal via Box-Muller on two decorrelated halves of the key.
inline double gaussian(std::uint64_t k) {
  const double u1 = uniform(k);
  const double u2 = uniform(mix(k ^ 0xd1b54a32d192ed03ull));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

inline double gaussian(std::uint64_t seed, std::uint64_t stream,
                       std::uint64_t i = 0, std::uint64_t j = 0,
                       std::uint64_t k = 0, std::uint64_t l = 0) {
  return gaussian(key(seed, stream, i, j, k, l));
}

}  // namespace ridgelab::rng
