#pragma once

#include <cstdint>
#include <random>

namespace hardaware {

/// SplitMix64 finalizer; decorrelates derived seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent generator for (seed, stream, index). All randomness in a run is
/// derived this way, so a step can be replayed without carrying RNG state.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return std::mt19937_64(mix_seed(mix_seed(mix_seed(seed) ^ stream) ^ index));
}

/// Named streams keep unrelated consumers of one seed apart.
namespace streams {
inline constexpr std::uint64_t kInit = 0x11;
inline constexpr std::uint64_t kShuffle = 0x22;
inline constexpr std::uint64_t kDropout = 0x33;
inline constexpr std::uint64_t kLatent = 0x44;
inline constexpr std::uint64_t kPerturb = 0x55;
inline constexpr std::uint64_t kHardLabels = 0x66;
inline constexpr std::uint64_t kSubset = 0x77;
inline constexpr std::uint64_t kSynthetic = 0x88;
inline constexpr std::uint64_t kGanData = 0x99;
inline constexpr std::uint64_t kSyntheticDropout = 0xaa;
}  // namespace streams

}  // namespace hardaware
