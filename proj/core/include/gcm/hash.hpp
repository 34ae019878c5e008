#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace gcm {

inline constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;

// 64-bit FNV-1a. Stable across platforms; used for fingerprints and for
// deriving per-task RNG seeds.
constexpr std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t state = kFnvOffset) {
  for (unsigned char c : bytes) {
    state ^= c;
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::string hex64(std::uint64_t v);

// Seed for a named sub-stream of `base`.
std::uint64_t derive_seed(std::uint64_t base, std::string_view key);

}  // namespace gcm
