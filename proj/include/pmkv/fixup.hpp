#pragma once

#include <pmkv/error.hpp>

#include <cstdint>
#include <string>

namespace pmkv {

/// Translates an absolute address saved while the pool was mapped at
/// old_base to the same byte under new_base.
inline std::uint64_t fixup_address(std::uint64_t old_addr, std::uint64_t old_base,
                                   std::uint64_t new_base, std::uint64_t pool_size) {
  if (old_addr < old_base || old_addr - old_base >= pool_size)
    throw Error(Errc::address_out_of_pool, std::to_string(old_addr) + " not in pool mapped at " +
                                               std::to_string(old_base));
  return old_addr - old_base + new_base;
}

inline bool address_in_pool(std::uint64_t addr, std::uint64_t base, std::uint64_t pool_size) {
  return addr >= base && addr - base < pool_size;
}

}  // namespace pmkv
