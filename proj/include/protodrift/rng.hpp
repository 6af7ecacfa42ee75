#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace protodrift {

using Rng = std::mt19937_64;

// splitmix64 finalizer; derives independent child seeds from (seed, stream).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
  // FNV-1a of the tag selects the stream.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed, h);
}

inline Rng make_rng(std::uint64_t seed, std::string_view tag) { return Rng(mix_seed(seed, tag)); }

}  // namespace protodrift
