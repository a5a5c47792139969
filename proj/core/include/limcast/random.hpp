#pragma once

#include <cstdint>
#include <random>

namespace limcast {

using Rng = std::mt19937_64;

/// splitmix64 finaliser, used to decorrelate neighbouring seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent generator for member / replicate `index` of a seeded run.
/// Results do not depend on the order in which substreams are consumed.
inline Rng substream(std::uint64_t seed, std::uint64_t index) {
  return Rng(mix_seed(mix_seed(seed) ^ mix_seed(index + 0x5851f42d4c957f2dULL)));
}

}  // namespace limcast
