#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string_view>

namespace pmkv {

namespace detail {

inline std::uint64_t mum(std::uint64_t a, std::uint64_t b) {
  const unsigned __int128 r = static_cast<unsigned __int128>(a) * b;
  return static_cast<std::uint64_t>(r) ^ static_cast<std::uint64_t>(r >> 64);
}

inline std::uint64_t fmix64(std::uint64_t h) {
  h ^= h >> 33;
  h *= 0xff51afd7ed558ccdull;
  h ^= h >> 33;
  h *= 0xc4ceb9fe1a85ec53ull;
  h ^= h >> 33;
  return h;
}

}  // namespace detail

/// Seeded 64-bit hash of a byte string. The seed lives in the pool root so
/// that bucket placement is stable across restarts.
inline std::uint64_t hash64(std::span<const std::uint8_t> key, std::uint64_t seed) {
  constexpr std::uint64_t k0 = 0xa0761d6478bd642full;
  constexpr std::uint64_t k1 = 0xe7037ed1a0b428dbull;
  constexpr std::uint64_t k2 = 0x8ebc6af09c88c6e3ull;
  const std::uint8_t* p = key.data();
  std::size_t n = key.size();
  std::uint64_t h = detail::mum(seed ^ k0, static_cast<std::uint64_t>(n) ^ k1);
  while (n >= 8) {
    std::uint64_t w;
    std::memcpy(&w, p, 8);
    h = detail::mum(w ^ k1, h ^ k2);
    p += 8;
    n -= 8;
  }
  if (n > 0) {
    std::uint64_t w = 0;
    std::memcpy(&w, p, n);
    h = detail::mum(w ^ k2 ^ (static_cast<std::uint64_t>(n) << 56), h ^ k0);
  }
  return detail::fmix64(h ^ seed);
}

inline std::uint64_t hash64(std::string_view key, std::uint64_t seed) {
  return hash64(std::span(reinterpret_cast<const std::uint8_t*>(key.data()), key.size()), seed);
}

}  // namespace pmkv
