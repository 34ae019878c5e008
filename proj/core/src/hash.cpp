#include "gcm/hash.hpp"

#include <cstdio>

namespace gcm {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view key) {
  const std::string prefix = std::to_string(base) + ":";
  std::uint64_t h = fnv1a64(key, fnv1a64(prefix));
  // splitmix64 finalizer
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

}  // namespace gcm
