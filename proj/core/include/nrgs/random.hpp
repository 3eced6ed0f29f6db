#pragma once

#include <cstdint>
#include <random>

namespace nrgs {

/// Derives an independent, reproducible stream from a master seed and a
/// purpose tag (splitmix64 of the pair), so adding consumers never shifts
/// another consumer's sequence.
inline uint64_t deriveSeed(uint64_t master, uint64_t purpose) {
  uint64_t z = master + 0x9e3779b97f4a7c15ULL * (purpose + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::mt19937_64 makeRng(uint64_t master, uint64_t purpose) {
  return std::mt19937_64(deriveSeed(master, purpose));
}

}  // namespace nrgs
