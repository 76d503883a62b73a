#pragma once

// Emulated persistent-memory pool.
//
// A pool keeps two byte images of the same file: the working image (what
// loads observe, i.e. the CPU caches plus media) and the durable image (what
// survives power loss). Stores touch only the working image. flush() marks
// the 64-byte lines covering a range as pending and fence() copies every
// pending line into the durable image. Every flush and every fence is one
// numbered event; a crash can be injected at any event index.

#include <pmkv/error.hpp>

#include <sys/mman.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

namespace pmkv {

static_assert(std::endian::native == std::endian::little,
              "pool images are little-endian and accessed with memcpy");

inline constexpr std::uint64_t kCacheLine = 64;
inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kMinPoolSize = 1ull << 20;
inline constexpr std::uint64_t kDefaultPoolSize = 256ull << 20;
inline constexpr std::uint64_t kDefaultLogSize = 4ull << 20;
inline constexpr std::uint32_t kPoolVersion = 1;
inline constexpr char kPoolMagic[8] = {'P', 'M', 'K', 'V', 'P', 'O', 'O', 'L'};

// Fixed region placement. The root and allocation table get one page each.
inline constexpr std::uint64_t kRootOffset = 1 * kPageSize;
inline constexpr std::uint64_t kRootSize = kPageSize;
inline constexpr std::uint64_t kAllocTableOffset = 2 * kPageSize;
inline constexpr std::uint64_t kAllocTableSize = kPageSize;
inline constexpr std::uint64_t kLogRegionOffset = 3 * kPageSize;

inline constexpr std::uint64_t align_up(std::uint64_t v, std::uint64_t a) {
  return (v + a - 1) / a * a;
}

/// On-media pool header, packed little-endian at offset 0 in field order.
struct PoolHeader {
  char magic[8] = {};
  std::uint32_t version = 0;
  std::uint64_t pool_size = 0;
  std::uint64_t root_offset = 0;
  std::uint64_t alloc_table_offset = 0;
  std::uint64_t log_region_offset = 0;
  std::uint64_t log_region_size = 0;
  std::uint64_t heap_offset = 0;

  static constexpr std::size_t kEncodedSize = 8 + 4 + 6 * 8;

  void encode(std::span<std::uint8_t, kEncodedSize> out) const {
    std::uint8_t* p = out.data();
    std::memcpy(p, magic, 8);
    std::memcpy(p + 8, &version, 4);
    const std::uint64_t fields[6] = {pool_size,         root_offset,     alloc_table_offset,
                                     log_region_offset, log_region_size, heap_offset};
    std::memcpy(p + 12, fields, sizeof(fields));
  }

  static PoolHeader decode(std::span<const std::uint8_t, kEncodedSize> in) {
    PoolHeader h;
    const std::uint8_t* p = in.data();
    std::memcpy(h.magic, p, 8);
    std::memcpy(&h.version, p + 8, 4);
    std::uint64_t fields[6];
    std::memcpy(fields, p + 12, sizeof(fields));
    h.pool_size = fields[0];
    h.root_offset = fields[1];
    h.alloc_table_offset = fields[2];
    h.log_region_offset = fields[3];
    h.log_region_size = fields[4];
    h.heap_offset = fields[5];
    return h;
  }

  // Throws bad-magic, version-mismatch or corrupt-pool.
  void validate(std::uint64_t file_size) const {
    if (std::memcmp(magic, kPoolMagic, 8) != 0) throw Error(Errc::bad_magic, "pool header magic");
    if (version != kPoolVersion)
      throw Error(Errc::version_mismatch, "pool version " + std::to_string(version));
    if (pool_size != file_size) throw Error(Errc::corrupt_pool, "pool size does not match file");
    struct Region {
      std::uint64_t off, len;
    };
    const Region regions[] = {{0, kEncodedSize},
                              {root_offset, kRootSize},
                              {alloc_table_offset, kAllocTableSize},
                              {log_region_offset, log_region_size},
                              {heap_offset, pool_size - std::min(heap_offset, pool_size)}};
    for (std::size_t i = 0; i < std::size(regions); ++i) {
      if (regions[i].off > pool_size || regions[i].len > pool_size - regions[i].off)
        throw Error(Errc::corrupt_pool, "region outside pool");
      if (i > 0 && regions[i].off < regions[i - 1].off + regions[i - 1].len)
        throw Error(Errc::corrupt_pool, "overlapping regions");
    }
  }
};

enum class CrashKind { drop_all_pending, adversarial };

/// What survives a crash. DropAllPending keeps exactly the durable image;
/// Adversarial additionally keeps each flushed-but-unfenced line with
/// probability 1/2, drawn reproducibly from rng_seed.
struct CrashPolicy {
  CrashKind kind = CrashKind::drop_all_pending;
  std::uint64_t rng_seed = 0;

  static CrashPolicy drop_all_pending() { return {}; }
  static CrashPolicy adversarial(std::uint64_t seed) { return {CrashKind::adversarial, seed}; }
};

/// The byte image a subsequent open would observe.
struct DurableSnapshot {
  std::vector<std::uint8_t> bytes;
};

struct PoolOptions {
  std::uint64_t log_size = kDefaultLogSize;
  CrashPolicy crash_policy{};
  // Replaces the random mapping base (tests only).
  std::optional<std::uint64_t> forced_base;
};

namespace detail {

class ByteImage {
 public:
  ByteImage() = default;
  explicit ByteImage(std::uint64_t size) : size_(size) {
    // Anonymous mappings come back zeroed; huge pages keep TLB misses from
    // dominating random access to large images.
    void* p = ::mmap(nullptr, size ? size : 1, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED) throw Error(Errc::io_failure, "cannot allocate pool image");
    if (size >= (2u << 20)) ::madvise(p, size, MADV_HUGEPAGE);
    data_ = static_cast<std::uint8_t*>(p);
  }
  ByteImage(ByteImage&& o) noexcept : data_(std::exchange(o.data_, nullptr)), size_(std::exchange(o.size_, 0)) {}
  ByteImage& operator=(ByteImage&& o) noexcept {
    if (this != &o) {
      release();
      data_ = std::exchange(o.data_, nullptr);
      size_ = std::exchange(o.size_, 0);
    }
    return *this;
  }
  ~ByteImage() { release(); }

  std::uint8_t* data() noexcept { return data_; }
  const std::uint8_t* data() const noexcept { return data_; }
  std::uint64_t size() const noexcept { return size_; }

  void prefault() {
    if (!data_) return;
#ifdef MADV_POPULATE_WRITE
    if (::madvise(data_, size_, MADV_POPULATE_WRITE) == 0) return;
#endif
    for (std::uint64_t off = 0; off < size_; off += 4096) {
      volatile std::uint8_t* p = data_ + off;
      *p = *p;
    }
  }

 private:
  void release() noexcept {
    if (data_) ::munmap(data_, size_ ? size_ : 1);
    data_ = nullptr;
  }

  std::uint8_t* data_ = nullptr;
  std::uint64_t size_ = 0;
};

inline std::uint64_t random_base_address() {
  static thread_local std::mt19937_64 rng = [] {
    std::random_device rd;
    std::seed_seq seq{rd(), rd(), rd(), rd()};
    return std::mt19937_64(seq);
  }();
  // 2^35 page-aligned candidates in [4 KiB, 128 TiB).
  return ((rng() & ((1ull << 35) - 1)) + 1) << 12;
}

inline void write_file(const std::filesystem::path& path, const std::uint8_t* data,
                       std::uint64_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw Error(Errc::io_failure, "short write to " + path.string());
}

}  // namespace detail

class Pool {
 public:
  Pool() = default;
  Pool(Pool&&) noexcept = default;
  Pool& operator=(Pool&&) noexcept = default;
  Pool(const Pool&) = delete;
  Pool& operator=(const Pool&) = delete;

  /// Creates a zeroed pool. An empty path yields an in-memory pool whose
  /// durable image is only reachable through crash().
  static Pool create(const std::filesystem::path& path, std::uint64_t size,
                     PoolOptions options = {}) {
    if (size < kMinPoolSize)
      throw Error(Errc::size_too_small, std::to_string(size) + " < " + std::to_string(kMinPoolSize));
    size = align_up(size, kPageSize);
    std::uint64_t log_size = std::min(align_up(options.log_size, kPageSize),
                                      (size / 4) / kPageSize * kPageSize);
    log_size = std::max(log_size, kPageSize);

    Pool pool(path, size, options);
    PoolHeader& h = pool.header_;
    std::memcpy(h.magic, kPoolMagic, 8);
    h.version = kPoolVersion;
    h.pool_size = size;
    h.root_offset = kRootOffset;
    h.alloc_table_offset = kAllocTableOffset;
    h.log_region_offset = kLogRegionOffset;
    h.log_region_size = log_size;
    h.heap_offset = align_up(kLogRegionOffset + log_size, kPageSize);
    if (h.heap_offset + kPageSize > size) throw Error(Errc::size_too_small, "no room for heap");

    std::uint8_t buf[PoolHeader::kEncodedSize];
    h.encode(std::span<std::uint8_t, PoolHeader::kEncodedSize>(buf));
    pool.store(0, buf);
    pool.flush(0, sizeof(buf));
    pool.fence();
    if (!path.empty()) pool.persist_to_file();
    return pool;
  }

  static Pool open(const std::filesystem::path& path, PoolOptions options = {}) {
    std::error_code ec;
    const auto file_size = std::filesystem::file_size(path, ec);
    if (ec) throw Error(Errc::io_failure, "cannot stat " + path.string());
    if (file_size < PoolHeader::kEncodedSize) throw Error(Errc::bad_magic, "file too short");
    Pool pool(path, file_size, options);
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io_failure, "cannot open " + path.string());
    in.read(reinterpret_cast<char*>(pool.durable_.data()), static_cast<std::streamsize>(file_size));
    if (!in) throw Error(Errc::io_failure, "short read from " + path.string());
    pool.load_header_and_sync();
    return pool;
  }

  /// Opens an in-memory pool over a crash snapshot.
  static Pool from_snapshot(const DurableSnapshot& snapshot, PoolOptions options = {}) {
    if (snapshot.bytes.size() < PoolHeader::kEncodedSize)
      throw Error(Errc::bad_magic, "snapshot too short");
    Pool pool({}, snapshot.bytes.size(), options);
    std::memcpy(pool.durable_.data(), snapshot.bytes.data(), snapshot.bytes.size());
    pool.load_header_and_sync();
    return pool;
  }

  bool valid() const noexcept { return working_.data() != nullptr && !invalidated_; }
  bool crashed() const noexcept { return crashed_; }
  std::uint64_t size() const noexcept { return working_.size(); }
  std::uint64_t base_address() const noexcept { return base_address_; }
  const PoolHeader& header() const noexcept { return header_; }
  const std::filesystem::path& path() const noexcept { return path_; }
  const CrashPolicy& crash_policy() const noexcept { return options_.crash_policy; }

  /// Backs both images with real pages now, so timed code does not pay for
  /// first-touch faults on the emulator's shadow copy. Contents and event
  /// counts are unchanged.
  void prefault() {
    working_.prefault();
    durable_.prefault();
  }

  void store(std::uint64_t offset, std::span<const std::uint8_t> bytes) {
    check_mutable();
    check_range(offset, bytes.size());
    if (!bytes.empty()) std::memcpy(working_.data() + offset, bytes.data(), bytes.size());
  }

  template <class T>
    requires std::is_trivially_copyable_v<T>
  void store_value(std::uint64_t offset, const T& value) {
    check_mutable();
    check_range(offset, sizeof(T));
    std::memcpy(working_.data() + offset, &value, sizeof(T));
  }

  void load(std::uint64_t offset, std::span<std::uint8_t> out) const {
    check_readable();
    check_range(offset, out.size());
    if (!out.empty()) std::memcpy(out.data(), working_.data() + offset, out.size());
  }

  std::vector<std::uint8_t> load(std::uint64_t offset, std::uint64_t len) const {
    std::vector<std::uint8_t> out(len);
    load(offset, out);
    return out;
  }

  template <class T>
    requires std::is_trivially_copyable_v<T>
  T load_value(std::uint64_t offset) const {
    check_readable();
    check_range(offset, sizeof(T));
    T value;
    std::memcpy(&value, working_.data() + offset, sizeof(T));
    return value;
  }

  /// Zero-copy read access to the working image. Valid until the pool is
  /// closed, crashed or moved.
  std::span<const std::uint8_t> view(std::uint64_t offset, std::uint64_t len) const {
    check_readable();
    check_range(offset, len);
    return {working_.data() + offset, len};
  }

  void flush(std::uint64_t offset, std::uint64_t len) {
    check_range(offset, len);
    begin_event();
    if (len == 0) return;
    const std::uint64_t first = offset / kCacheLine;
    const std::uint64_t last = (offset + len - 1) / kCacheLine;
    for (std::uint64_t line = first; line <= last; ++line) {
      std::uint64_t& word = pending_mask_[line / 64];
      const std::uint64_t bit = 1ull << (line % 64);
      if (!(word & bit)) {
        word |= bit;
        pending_lines_.push_back(line);
        __builtin_prefetch(durable_.data() + line * kCacheLine, 1);
      }
    }
  }

  void fence() {
    begin_event();
    for (std::uint64_t line : pending_lines_) {
      std::memcpy(durable_.data() + line * kCacheLine, working_.data() + line * kCacheLine, kCacheLine);
      pending_mask_[line / 64] &= ~(1ull << (line % 64));
    }
    pending_lines_.clear();
    ++fence_count_;
  }

  /// Store, flush and fence of one aligned 8-byte word.
  void durable_store8(std::uint64_t offset, std::uint64_t value) {
    if (offset % 8 != 0) throw Error(Errc::misaligned_offset, std::to_string(offset));
    store_value(offset, value);
    flush(offset, 8);
    fence();
  }

  /// Simulates power loss. Returns the image a later open() observes and
  /// writes it to the backing file, if any. The pool is unusable afterwards.
  DurableSnapshot crash() {
    if (!working_.data() || invalidated_) throw Error(Errc::pool_invalidated, "crash on dead pool");
    DurableSnapshot snap;
    snap.bytes.assign(durable_.data(), durable_.data() + durable_.size());
    if (options_.crash_policy.kind == CrashKind::adversarial) {
      std::mt19937_64 rng(options_.crash_policy.rng_seed);
      for (std::uint64_t line : pending_lines_) {
        if (rng() & 1)
          std::memcpy(snap.bytes.data() + line * kCacheLine, working_.data() + line * kCacheLine,
                      kCacheLine);
      }
    }
    if (!path_.empty()) detail::write_file(path_, snap.bytes.data(), snap.bytes.size());
    invalidated_ = true;
    return snap;
  }

  /// Clean shutdown: writes the durable image back to the file. Unfenced
  /// lines are not part of it.
  void close() {
    if (!working_.data() || invalidated_ || crashed_) return;
    if (!path_.empty()) persist_to_file();
    invalidated_ = true;
  }

  // Crash injection: the event with this index throws CrashInjected instead
  // of taking effect, and so does every later mutation.
  void crash_at_event(std::optional<std::uint64_t> event_index) { crash_at_ = event_index; }

  std::uint64_t event_counter() const noexcept { return events_; }
  std::uint64_t fence_count() const noexcept { return fence_count_; }
  std::size_t pending_line_count() const noexcept { return pending_lines_.size(); }
  bool line_pending(std::uint64_t line) const { return (pending_mask_.at(line / 64) >> (line % 64)) & 1; }

  std::span<const std::uint8_t> working_image() const { return {working_.data(), working_.size()}; }
  std::span<const std::uint8_t> durable_image() const { return {durable_.data(), durable_.size()}; }

 private:
  Pool(std::filesystem::path path, std::uint64_t size, PoolOptions options)
      : path_(std::move(path)),
        options_(options),
        working_(size),
        durable_(size),
        pending_mask_(size / kCacheLine / 64 + 1, 0),
        base_address_(options.forced_base ? *options.forced_base : detail::random_base_address()) {
    if (base_address_ == 0 || base_address_ % kPageSize != 0)
      throw Error(Errc::invalid_argument, "base address must be nonzero and page aligned");
    pending_lines_.reserve(8192);
  }

  void load_header_and_sync() {
    header_ = PoolHeader::decode(
        std::span<const std::uint8_t, PoolHeader::kEncodedSize>(durable_.data(), PoolHeader::kEncodedSize));
    header_.validate(durable_.size());
    std::memcpy(working_.data(), durable_.data(), durable_.size());
  }

  void persist_to_file() { detail::write_file(path_, durable_.data(), durable_.size()); }

  void begin_event() {
    check_mutable();
    if (crash_at_ && events_ == *crash_at_) [[unlikely]] {
      crashed_ = true;
      throw_crash(events_);
    }
    ++events_;
  }

  void check_mutable() const {
    if (crashed_) [[unlikely]]
      throw_crash(events_);
    if (!working_.data() || invalidated_) [[unlikely]]
      throw_invalidated();
  }

  void check_readable() const {
    if (!working_.data() || invalidated_) [[unlikely]]
      throw_invalidated();
  }

  void check_range(std::uint64_t offset, std::uint64_t len) const {
    if (offset > working_.size() || len > working_.size() - offset) [[unlikely]]
      throw_out_of_bounds(offset, len);
  }

  [[noreturn, gnu::noinline, gnu::cold]] static void throw_crash(std::uint64_t event) { throw CrashInjected{event}; }

  [[noreturn, gnu::noinline, gnu::cold]] static void throw_invalidated() {
    throw Error(Errc::pool_invalidated, "pool is closed");
  }

  [[noreturn, gnu::noinline, gnu::cold]] static void throw_out_of_bounds(std::uint64_t offset, std::uint64_t len) {
    throw Error(Errc::out_of_bounds, "[" + std::to_string(offset) + ", +" + std::to_string(len) + ")");
  }

  std::filesystem::path path_;
  PoolOptions options_;
  PoolHeader header_;
  detail::ByteImage working_;
  detail::ByteImage durable_;
  std::vector<std::uint64_t> pending_mask_;  // one bit per line
  std::vector<std::uint64_t> pending_lines_;
  std::uint64_t base_address_ = 0;
  std::uint64_t events_ = 0;
  std::uint64_t fence_count_ = 0;
  std::optional<std::uint64_t> crash_at_;
  bool crashed_ = false;
  bool invalidated_ = false;
};

}  // namespace pmkv
