#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace tempo {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// Engine whose stream is a pure function of the key tuple.
inline std::mt19937_64 keyed_engine(std::initializer_list<std::uint64_t> key) {
  std::uint64_t h = 0x5EEDF00DULL;
  for (std::uint64_t k : key) h = splitmix64(h ^ splitmix64(k));
  return std::mt19937_64(h);
}

// Uniform in [0, 1) from the top 53 bits; stable across standard libraries.
inline double uniform01(std::mt19937_64& engine) {
  return static_cast<double>(engine() >> 11) * 0x1.0p-53;
}

}  // namespace tempo
