#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace pmkv {

enum class Errc {
  io_failure,
  size_too_small,
  bad_magic,
  version_mismatch,
  out_of_bounds,
  misaligned_offset,
  pool_invalidated,
  log_region_full,
  corrupt_log,
  out_of_memory,
  double_free,
  stale_handle,
  corrupt_bitmap,
  corrupt_pool,
  mode_mismatch,
  invalid_key,
  key_too_large,
  value_too_large,
  address_out_of_pool,
  snapshot_region_overflow,
  protocol_error,
  bind_failure,
  invalid_argument,
};

inline std::string_view errc_name(Errc code) {
  switch (code) {
    case Errc::io_failure: return "io-failure";
    case Errc::size_too_small: return "size-too-small";
    case Errc::bad_magic: return "bad-magic";
    case Errc::version_mismatch: return "version-mismatch";
    case Errc::out_of_bounds: return "out-of-bounds";
    case Errc::misaligned_offset: return "misaligned-offset";
    case Errc::pool_invalidated: return "pool-invalidated";
    case Errc::log_region_full: return "log-region-full";
    case Errc::corrupt_log: return "corrupt-log";
    case Errc::out_of_memory: return "out-of-memory";
    case Errc::double_free: return "double-free";
    case Errc::stale_handle: return "stale-handle";
    case Errc::corrupt_bitmap: return "corrupt-bitmap";
    case Errc::corrupt_pool: return "corrupt-pool";
    case Errc::mode_mismatch: return "mode-mismatch";
    case Errc::invalid_key: return "invalid-key";
    case Errc::key_too_large: return "key-too-large";
    case Errc::value_too_large: return "value-too-large";
    case Errc::address_out_of_pool: return "address-out-of-pool";
    case Errc::snapshot_region_overflow: return "snapshot-region-overflow";
    case Errc::protocol_error: return "protocol-error";
    case Errc::bind_failure: return "bind-failure";
    case Errc::invalid_argument: return "invalid-argument";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& detail)
      : std::runtime_error(std::string(errc_name(code)) + ": " + detail), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

// Thrown from the persistence primitives when an injected crash point is
// reached. Deliberately not derived from Error: nothing should catch it
// except a crash harness.
struct CrashInjected {
  unsigned long long event_index;
};

}  // namespace pmkv
