// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>

namespace m3jepa {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Independent child seed for a named sub-stream, e.g. derive_seed(seed, {kTagBatches, task, epoch}).
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(seed);
  for (auto p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

namespace stream {
inline constexpr std::uint64_t kMixing = 1;
inline constexpr std::uint64_t kReadout = 2;
inline constexpr std::uint64_t kSamples = 3;
inline constexpr std::uint64_t kInit = 4;
inline constexpr std::uint64_t kBatches = 5;
inline constexpr std::uint64_t kDropout = 6;
}  // namespace stream

}  // namespace m3jepa
