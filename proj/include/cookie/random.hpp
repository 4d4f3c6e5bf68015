#pragma once

#include <cstdint>
#include <initializer_list>

namespace cookie {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stable seed derivation: derive_seed(global, {sample, view, ...}).
/// Depends only on its arguments, never on call order.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) noexcept {
  std::uint64_t h = mix64(base);
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

/// Named sub-streams of the global seed.
enum class SeedStream : std::uint64_t {
  init = 1,
  corpus = 2,
  shuffle = 3,
  augment = 4,
  dropout = 5,
  caption_pick = 6,
  bench = 7,
  sts = 8,
  split = 9,
};

constexpr std::uint64_t stream_seed(std::uint64_t global, SeedStream s) noexcept {
  return derive_seed(global, {static_cast<std::uint64_t>(s)});
}

}  // namespace cookie
