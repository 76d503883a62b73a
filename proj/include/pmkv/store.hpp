#pragma once

// Key-value store over an emulated PM pool.
//
//   FullyPersistent  hash index and records in the pool. Stored pointers are
//                    absolute addresses under the mapping base of the last
//                    run and are rewritten on open.
//   Hybrid           records in the pool, index in DRAM. Open rebuilds the
//                    index by enumerating typed allocations or walking slabs.
//   SnapshotBaseline everything in DRAM, periodically serialized into one of
//                    two pool regions.
//
// Root record (page at PoolHeader::root_offset, 8-byte fields):
//   +0 mode  +8 alloc_strategy  +16 hash_seed  +24 ht_base_addr
//   +32 ht0_entries_addr  +40 ht1_entries_addr  +48 old_base_address
//   +56 fixup_target_base  +64 kv_count  +72 snapshot_selector

#include <pmkv/alloc.hpp>
#include <pmkv/error.hpp>
#include <pmkv/fixup.hpp>
#include <pmkv/hash.hpp>
#include <pmkv/pool.hpp>
#include <pmkv/tx.hpp>
#include <pmkv/volatile_table.hpp>

#include <zlib.h>

#include <array>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pmkv {

enum class Mode : std::uint64_t { fully_persistent = 1, hybrid = 2, snapshot = 3 };
enum class AllocStrategy : std::uint64_t { per_object = 1, slab = 2 };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::fully_persistent: return "fully-persistent";
    case Mode::hybrid: return "hybrid";
    case Mode::snapshot: return "snapshot";
  }
  return "?";
}

inline std::string_view to_string(AllocStrategy a) {
  return a == AllocStrategy::slab ? "slab" : "per-object";
}

inline std::optional<Mode> parse_mode(std::string_view s) {
  if (s == "fully-persistent" || s == "fp") return Mode::fully_persistent;
  if (s == "hybrid") return Mode::hybrid;
  if (s == "snapshot") return Mode::snapshot;
  return std::nullopt;
}

inline std::optional<AllocStrategy> parse_alloc(std::string_view s) {
  if (s == "per-object" || s == "object") return AllocStrategy::per_object;
  if (s == "slab") return AllocStrategy::slab;
  return std::nullopt;
}

inline constexpr std::uint64_t kMaxKeySize = 64ull << 10;
inline constexpr std::uint64_t kMaxValueSize = 1ull << 20;

// Allocation type numbers. The four Redis object kinds collapse to KEY and
// VALUE because records inline their bytes.
namespace typenum {
inline constexpr std::uint32_t kKey = 1;
inline constexpr std::uint32_t kValue = 2;
inline constexpr std::uint32_t kEntry = 3;
inline constexpr std::uint32_t kTable = 4;
inline constexpr std::uint32_t kDict = 5;
}  // namespace typenum

namespace root {
inline constexpr std::uint64_t kMode = 0;
inline constexpr std::uint64_t kAllocStrategy = 8;
inline constexpr std::uint64_t kHashSeed = 16;
inline constexpr std::uint64_t kHtBaseAddr = 24;
inline constexpr std::uint64_t kHt0EntriesAddr = 32;
inline constexpr std::uint64_t kHt1EntriesAddr = 40;
inline constexpr std::uint64_t kOldBaseAddress = 48;
inline constexpr std::uint64_t kFixupTargetBase = 56;
inline constexpr std::uint64_t kKvCount = 64;
inline constexpr std::uint64_t kSnapshotSelector = 72;
}  // namespace root

struct SnapshotPolicy {
  double period_seconds = 3.0;
  std::uint64_t every_k_modifications = 0;  // 0 disables the count trigger
};

struct StoreConfig {
  std::filesystem::path path;  // empty: in-memory pool
  Mode mode = Mode::hybrid;
  AllocStrategy alloc = AllocStrategy::per_object;
  std::uint32_t tx_batch = 1;
  SnapshotPolicy snapshot_policy{};
  std::uint64_t pool_size = kDefaultPoolSize;
  PoolOptions pool_options{};
  std::uint64_t initial_buckets = 16;
  std::optional<std::uint64_t> hash_seed;
  SlabConfig slab{};
  // Observes recovery phase boundaries: (name, true) on entry, (name, false) on exit.
  std::function<void(std::string_view, bool)> phase_hook;
};

struct RecoveryReport {
  double elapsed_ms = 0;
  double phase1_ms = 0;
  double phase2_ms = 0;
  std::uint64_t keys_recovered = 0;
  std::uint64_t phase1_visits = 0;
  std::uint64_t volatile_allocations = 0;  // made by the DRAM index while rebuilding
  bool log_rolled_back = false;
  bool fresh = false;
};

struct StoreStats {
  std::vector<std::uint64_t> resize_key_counts;
  std::uint64_t heap_allocations = 0;
  std::uint64_t acked_ops = 0;
  std::uint64_t snapshots = 0;
  TxStats tx{};
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

inline std::span<const std::uint8_t> bytes_of(std::string_view s) {
  return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

inline std::string_view chars_of(std::span<const std::uint8_t> b) {
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

inline void put_u32(std::vector<std::uint8_t>& buf, std::size_t at, std::uint32_t v) { std::memcpy(buf.data() + at, &v, 4); }
inline void put_u64(std::vector<std::uint8_t>& buf, std::size_t at, std::uint64_t v) { std::memcpy(buf.data() + at, &v, 8); }

inline std::uint64_t random_seed() {
  std::random_device rd;
  return (static_cast<std::uint64_t>(rd()) << 32) ^ rd();
}

struct StoreState {
  StoreConfig config;
  Pool pool;
  std::unique_ptr<TxManager> txm;
  std::unique_ptr<ObjectAllocator> objects;
  std::unique_ptr<SlabAllocator> slabs;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> resize_key_counts;

  std::uint64_t root_at(std::uint64_t field) const { return pool.header().root_offset + field; }
  std::uint64_t root_u64(std::uint64_t field) const { return pool.load_value<std::uint64_t>(root_at(field)); }

  void phase(std::string_view name, bool begin) const {
    if (config.phase_hook) config.phase_hook(name, begin);
  }

  std::uint64_t heap_top() const { return objects ? objects->heap_top() : pool.size(); }

  bool in_heap(std::uint64_t off, std::uint64_t len) const { return in_span(off, len, pool.header().heap_offset, heap_top()); }

  static bool in_span(std::uint64_t off, std::uint64_t len, std::uint64_t lo, std::uint64_t hi) {
    return off >= lo && off <= hi && len <= hi - off;
  }
};

// Record layouts shared by the modes.
//   KeyRecord:   u32 key_len | u32 val_len_hint | u64 val_record_offset | key
//   ValueRecord: u32 val_len | u32 pad | value
//   Entry:       u64 next_addr | u64 key_addr | u64 val_addr
//   Slab item:   u64 next_addr | u32 key_len | u32 val_len | key | value
inline constexpr std::uint64_t kKeyRecordHeader = 16;
inline constexpr std::uint64_t kValueRecordHeader = 8;
inline constexpr std::uint64_t kEntrySize = 24;
inline constexpr std::uint64_t kItemHeader = 16;
inline constexpr std::size_t kFixupFenceLines = 4096;

class Backend {
 public:
  explicit Backend(StoreState& s) : s_(s) {}
  virtual ~Backend() = default;

  virtual void init(TxHandle&) {}
  virtual RecoveryReport recover() = 0;
  virtual void set(TxHandle* tx, std::string_view key, std::string_view value) = 0;
  virtual std::optional<std::string> get(std::string_view key) = 0;
  virtual bool del(TxHandle* tx, std::string_view key) = 0;
  virtual std::size_t size() const = 0;
  virtual void for_each(const std::function<void(std::string_view, std::string_view)>& fn) const = 0;
  virtual void batch_committed() {}
  virtual void batch_aborted() {}
  virtual bool snapshot_tick(double) { return false; }
  virtual std::uint64_t snapshots() const { return 0; }

 protected:
  StoreState& s_;
  std::vector<std::uint8_t> buf_;
};

// ---------------------------------------------------------------------------
// Fully persistent: chained table of absolute addresses inside the pool.
// Derived supplies the node format; every node keeps `next_addr` at +0.

template <class Derived>
class FullyPersistentBackend : public Backend {
 public:
  using Backend::Backend;

  void init(TxHandle& tx) override {
    const std::uint64_t n = s_.config.initial_buckets;
    if (n == 0 || (n & (n - 1)) != 0) throw Error(Errc::invalid_argument, "initial_buckets must be a power of two");
    ObjHandle dict = s_.objects->alloc(tx, 16, typenum::kDict);
    const std::uint64_t dict_words[2] = {n, n - 1};
    tx.store_value(dict.offset, dict_words);
    ObjHandle table = alloc_zeroed_table(tx, n);
    tx.store_value(s_.root_at(root::kHtBaseAddr), to_addr(dict.offset));
    tx.store_value(s_.root_at(root::kHt0EntriesAddr), to_addr(table.offset));
    tx.store_value(s_.root_at(root::kHt1EntriesAddr), std::uint64_t{0});
    tx.store_value(s_.root_at(root::kKvCount), std::uint64_t{0});
  }

  std::size_t size() const override { return s_.root_u64(root::kKvCount); }

  std::optional<std::string> get(std::string_view key) override {
    const auto found = find(key, hash64(key, s_.seed));
    if (!found) return std::nullopt;
    return std::string(chars_of(self().value_view(found->node)));
  }

  void set(TxHandle* tx, std::string_view key, std::string_view value) override {
    const std::uint64_t h = hash64(key, s_.seed);
    if (const auto found = find(key, h)) {
      self().replace_value(*tx, *found, key, value);
      return;
    }
    const std::uint64_t count = s_.root_u64(root::kKvCount);
    if (count >= bucket_count()) {
      resize(*tx);
      s_.resize_key_counts.push_back(count);
    }
    const std::uint64_t slot = buckets_off() + (h & (bucket_count() - 1)) * 8;
    const std::uint64_t node = self().make_node(*tx, key, value, s_.pool.template load_value<std::uint64_t>(slot));
    tx->store_value(slot, to_addr(node));
    tx->store_value(s_.root_at(root::kKvCount), count + 1);
  }

  bool del(TxHandle* tx, std::string_view key) override {
    const auto found = find(key, hash64(key, s_.seed));
    if (!found) return false;
    tx->store_value(found->link, s_.pool.template load_value<std::uint64_t>(found->node));
    self().destroy_node(*tx, found->node);
    tx->store_value(s_.root_at(root::kKvCount), s_.root_u64(root::kKvCount) - 1);
    return true;
  }

  void for_each(const std::function<void(std::string_view, std::string_view)>& fn) const override {
    const std::uint64_t buckets = buckets_off();
    const std::uint64_t n = bucket_count();
    for (std::uint64_t b = 0; b < n; ++b) {
      std::uint64_t addr = s_.pool.template load_value<std::uint64_t>(buckets + b * 8);
      while (addr) {
        const std::uint64_t node = to_off(addr);
        fn(chars_of(self().key_view(node)), chars_of(self().value_view(node)));
        addr = s_.pool.template load_value<std::uint64_t>(node);
      }
    }
  }

  std::uint64_t bucket_count() const { return s_.pool.template load_value<std::uint64_t>(to_off(s_.root_u64(root::kHtBaseAddr))); }

  /// Rewrites every stored absolute address for the current mapping base.
  ///
  /// Sources are old_base_address, plus fixup_target_base when a previous
  /// pass was interrupted. Such a half-done pass is first collapsed onto its
  /// own target; then fixup_target_base is set to the new base, the pass
  /// runs, everything is fenced, and old_base_address is switched over.
  RecoveryReport recover() override {
    RecoveryReport report;
    Pool& pool = s_.pool;
    const std::uint64_t size = pool.size();
    const std::uint64_t new_base = pool.base_address();

    auto t1 = Clock::now();
    report.phase1_visits = self().phase1();
    report.phase1_ms = ms_since(t1);

    auto t2 = Clock::now();
    s_.phase("fixup_pass", true);
    std::uint64_t old_base = s_.root_u64(root::kOldBaseAddress);
    const std::uint64_t target = s_.root_u64(root::kFixupTargetBase);
    if (target != 0 && target != old_base) {
      const bool overlap = old_base < target + size && target < old_base + size;
      if (overlap) throw Error(Errc::corrupt_pool, "interrupted fixup with overlapping bases");
      rewrite(Translator{old_base, target, target, size, true}, true);
      pool.fence();
      pool.durable_store8(s_.root_at(root::kOldBaseAddress), target);
      old_base = target;
    }
    if (old_base == new_base) {
      report.keys_recovered = rewrite(Translator{old_base, 0, new_base, size, false}, false);
    } else {
      pool.durable_store8(s_.root_at(root::kFixupTargetBase), new_base);
      report.keys_recovered = rewrite(Translator{old_base, 0, new_base, size, false}, true);
      pool.fence();
      pool.durable_store8(s_.root_at(root::kOldBaseAddress), new_base);
    }
    if (target != 0 || old_base != new_base) pool.durable_store8(s_.root_at(root::kFixupTargetBase), 0);
    s_.phase("fixup_pass", false);
    report.phase2_ms = ms_since(t2);
    if (self().validates_phase1() && report.phase1_visits != report.keys_recovered)
      throw Error(Errc::corrupt_pool, "slab walk and index disagree on item count");
    return report;
  }

 protected:
  struct Found {
    std::uint64_t link;  // pool offset of the pointer that references node
    std::uint64_t node;
  };

  struct Translator {
    std::uint64_t from;
    std::uint64_t alt_from;  // interrupted target, 0 if none
    std::uint64_t to;
    std::uint64_t size;
    bool classify;

    std::uint64_t operator()(std::uint64_t addr) const {
      if (classify && address_in_pool(addr, alt_from, size)) return addr - alt_from + to;
      if (!address_in_pool(addr, from, size)) [[unlikely]]
        unmapped(addr, classify);
      return addr - from + to;
    }

    [[noreturn, gnu::noinline, gnu::cold]] static void unmapped(std::uint64_t addr, bool classify) {
      throw Error(Errc::corrupt_pool,
                  "address " + std::to_string(addr) + (classify ? " matches neither base" : " outside the pool"));
    }

    // Target offset of addr if it maps at all; never throws.
    std::optional<std::uint64_t> peek(std::uint64_t addr) const {
      if (classify && address_in_pool(addr, alt_from, size)) return addr - alt_from;
      if (address_in_pool(addr, from, size)) return addr - from;
      return std::nullopt;
    }
  };

  Derived& self() { return static_cast<Derived&>(*this); }
  const Derived& self() const { return static_cast<const Derived&>(*this); }

  std::uint64_t base() const { return s_.pool.base_address(); }
  std::uint64_t to_addr(std::uint64_t off) const { return off + base(); }
  std::uint64_t to_off(std::uint64_t addr) const {
    if (!address_in_pool(addr, base(), s_.pool.size()))
      throw Error(Errc::corrupt_pool, "address " + std::to_string(addr) + " outside the pool");
    return addr - base();
  }
  std::uint64_t buckets_off() const { return to_off(s_.root_u64(root::kHt0EntriesAddr)); }

  std::optional<Found> find(std::string_view key, std::uint64_t h) const {
    std::uint64_t link = buckets_off() + (h & (bucket_count() - 1)) * 8;
    std::uint64_t addr = s_.pool.template load_value<std::uint64_t>(link);
    while (addr) {
      const std::uint64_t node = to_off(addr);
      if (chars_of(self().key_view(node)) == key) return Found{link, node};
      link = node;
      addr = s_.pool.template load_value<std::uint64_t>(node);
    }
    return std::nullopt;
  }

  ObjHandle alloc_zeroed_table(TxHandle& tx, std::uint64_t buckets) {
    ObjHandle table = s_.objects->alloc(tx, buckets * 8, typenum::kTable);
    static const std::vector<std::uint8_t> zeros(64 << 10, 0);
    for (std::uint64_t at = 0; at < table.size; at += zeros.size()) {
      const std::uint64_t n = std::min<std::uint64_t>(zeros.size(), table.size - at);
      tx.store(table.offset + at, std::span(zeros.data(), n));
    }
    return table;
  }

  /// Stop-the-world doubling inside the caller's transaction. Every moved
  /// node has its next pointer logged.
  void resize(TxHandle& tx) {
    const std::uint64_t old_n = bucket_count();
    const std::uint64_t old_table = buckets_off();
    const std::uint64_t new_n = old_n * 2;
    ObjHandle fresh = alloc_zeroed_table(tx, new_n);
    tx.store_value(s_.root_at(root::kHt1EntriesAddr), to_addr(fresh.offset));
    for (std::uint64_t b = 0; b < old_n; ++b) {
      std::uint64_t addr = s_.pool.template load_value<std::uint64_t>(old_table + b * 8);
      while (addr) {
        const std::uint64_t node = to_off(addr);
        const std::uint64_t next = s_.pool.template load_value<std::uint64_t>(node);
        const std::uint64_t slot = fresh.offset + (hash64(self().key_view(node), s_.seed) & (new_n - 1)) * 8;
        tx.store_value(node, s_.pool.template load_value<std::uint64_t>(slot));
        tx.store_value(slot, addr);
        addr = next;
      }
    }
    const std::uint64_t dict = to_off(s_.root_u64(root::kHtBaseAddr));
    const std::uint64_t dict_words[2] = {new_n, new_n - 1};
    tx.store_value(dict, dict_words);
    const std::uint64_t tables[2] = {to_addr(fresh.offset), 0};
    tx.store_value(s_.root_at(root::kHt0EntriesAddr), tables);
    s_.objects->free(tx, ObjHandle{old_table, old_n * 8, typenum::kTable});
  }

  bool in_pass_heap(std::uint64_t off, std::uint64_t len) const { return StoreState::in_span(off, len, heap_lo_, heap_hi_); }

  // Reads inside a rewrite pass go straight to the working image; callers
  // check bounds with in_pass_heap first.
  template <class T>
  T img_load(std::uint64_t off) const {
    T v;
    std::memcpy(&v, img_ + off, sizeof(T));
    return v;
  }

  static constexpr std::uint64_t kAhead = 48;

  // State of the current rewrite pass.
  std::uint64_t heap_lo_ = 0;
  std::uint64_t heap_hi_ = 0;
  const std::uint8_t* img_ = nullptr;

  // One pass over root, dict, buckets and every chain. Returns nodes seen.
  std::uint64_t rewrite(const Translator& tr, bool write) {
    Pool& pool = s_.pool;
    auto fix_word = [&](std::uint64_t at) -> std::uint64_t {
      const auto addr = pool.load_value<std::uint64_t>(at);
      if (addr == 0) return 0;
      const std::uint64_t moved = tr(addr);
      if (write && moved != addr) {
        pool.store_value(at, moved);
        pool.flush(at, 8);
      }
      return moved;
    };
    if (s_.root_u64(root::kHt1EntriesAddr) != 0)
      throw Error(Errc::corrupt_pool, "rehash target present after log recovery");
    const std::uint64_t dict = fix_word(s_.root_at(root::kHtBaseAddr)) - tr.to;
    const std::uint64_t buckets = fix_word(s_.root_at(root::kHt0EntriesAddr)) - tr.to;
    if (!s_.in_heap(dict, 16)) throw Error(Errc::corrupt_pool, "dict outside heap");
    const auto n = pool.load_value<std::uint64_t>(dict);
    if (n == 0 || (n & (n - 1)) != 0 || !s_.in_heap(buckets, n * 8))
      throw Error(Errc::corrupt_pool, "bucket array malformed");
    const std::uint64_t expected = s_.root_u64(root::kKvCount);
    heap_lo_ = pool.header().heap_offset;
    heap_hi_ = s_.heap_top();
    img_ = pool.view(0, pool.size()).data();
    std::uint64_t count = 0;
    bool line_dirty = false;
    const std::uint64_t limit = pool.size();
    // Chains are pointer chases; request heads kAhead buckets early.
    // Halfway there the head has arrived, and its successor is requested.
    const auto prefetch_node = [&](std::uint64_t addr) -> std::optional<std::uint64_t> {
      const auto at = tr.peek(addr);
      if (!at || *at < kAllocHeaderSize || *at + kEntrySize > limit) return std::nullopt;
      __builtin_prefetch(img_ + *at - kAllocHeaderSize);
      __builtin_prefetch(img_ + *at + kEntrySize - 1);
      return at;
    };
    for (std::uint64_t b = 0; b < n; ++b) {
      if (b + kAhead < n) prefetch_node(img_load<std::uint64_t>(buckets + (b + kAhead) * 8));
      if (b + kAhead / 2 < n) {
        const auto head = tr.peek(img_load<std::uint64_t>(buckets + (b + kAhead / 2) * 8));
        if (head && *head + 8 <= limit) prefetch_node(img_load<std::uint64_t>(*head));
      }
      const std::uint64_t at = buckets + b * 8;
      std::uint64_t addr = img_load<std::uint64_t>(at);
      if (addr) {
        const std::uint64_t moved = tr(addr);
        if (write && moved != addr) {
          pool.store_value(at, moved);
          line_dirty = true;
        }
        addr = moved;
      }
      // Bucket words share lines; flush each line once.
      if (line_dirty && (b + 1 == n || (at + 8) % kCacheLine == 0)) {
        const std::uint64_t line_start = std::max(buckets, at / kCacheLine * kCacheLine);
        pool.flush(line_start, at + 8 - line_start);
        line_dirty = false;
      }
      while (addr) {
        const std::uint64_t node = addr - tr.to;
        if (++count > expected) throw Error(Errc::corrupt_pool, "more chained nodes than kv_count");
        addr = self().fixup_node(node, tr, write);
      }
      // Bounded fences keep the set of unfenced lines small.
      if (pool.pending_line_count() >= kFixupFenceLines) pool.fence();
    }
    img_ = nullptr;
    if (count != expected) throw Error(Errc::corrupt_pool, "chained nodes differ from kv_count");
    return count;
  }
};

class FullyPersistentObjects final : public FullyPersistentBackend<FullyPersistentObjects> {
 public:
  using FullyPersistentBackend::FullyPersistentBackend;

  std::span<const std::uint8_t> key_view(std::uint64_t entry) const {
    const std::uint64_t rec = to_off(s_.pool.load_value<std::uint64_t>(entry + 8));
    const auto len = s_.pool.load_value<std::uint32_t>(rec);
    return s_.pool.view(rec + kKeyRecordHeader, len);
  }

  std::span<const std::uint8_t> value_view(std::uint64_t entry) const {
    const std::uint64_t rec = to_off(s_.pool.load_value<std::uint64_t>(entry + 16));
    const auto len = s_.pool.load_value<std::uint32_t>(rec);
    return s_.pool.view(rec + kValueRecordHeader, len);
  }

  std::uint64_t make_node(TxHandle& tx, std::string_view key, std::string_view value, std::uint64_t next_addr) {
    const std::uint64_t v = write_value(tx, value);
    ObjHandle k = s_.objects->alloc(tx, kKeyRecordHeader + key.size(), typenum::kKey);
    buf_.assign(kKeyRecordHeader + key.size(), 0);
    put_u32(buf_, 0, static_cast<std::uint32_t>(key.size()));
    put_u32(buf_, 4, static_cast<std::uint32_t>(value.size()));
    std::memcpy(buf_.data() + kKeyRecordHeader, key.data(), key.size());
    tx.store(k.offset, buf_);
    ObjHandle e = s_.objects->alloc(tx, kEntrySize, typenum::kEntry);
    const std::uint64_t entry[3] = {next_addr, to_addr(k.offset), to_addr(v)};
    tx.store_value(e.offset, entry);
    return e.offset;
  }

  void replace_value(TxHandle& tx, const Found& f, std::string_view, std::string_view value) {
    const std::uint64_t old = to_off(s_.pool.load_value<std::uint64_t>(f.node + 16));
    const std::uint64_t v = write_value(tx, value);
    tx.store_value(f.node + 16, to_addr(v));
    s_.objects->free(tx, ObjHandle{old, 0, typenum::kValue});
  }

  void destroy_node(TxHandle& tx, std::uint64_t entry) {
    const std::uint64_t k = to_off(s_.pool.load_value<std::uint64_t>(entry + 8));
    const std::uint64_t v = to_off(s_.pool.load_value<std::uint64_t>(entry + 16));
    s_.objects->free(tx, ObjHandle{v, 0, typenum::kValue});
    s_.objects->free(tx, ObjHandle{k, 0, typenum::kKey});
    s_.objects->free(tx, ObjHandle{entry, 0, typenum::kEntry});
  }

  std::uint64_t phase1() { return 0; }
  bool validates_phase1() const { return false; }

  std::uint64_t fixup_node(std::uint64_t entry, const Translator& tr, bool write) {
    if (entry < kAllocHeaderSize || !in_pass_heap(entry - kAllocHeaderSize, kAllocHeaderSize + kEntrySize))
      throw Error(Errc::corrupt_pool, "entry outside heap");
    const auto hdr = img_load<AllocHeader>(entry - kAllocHeaderSize);
    if (hdr.state != AllocHeader::kLive || hdr.typenum != typenum::kEntry || hdr.size != kEntrySize)
      throw Error(Errc::corrupt_pool, "chain reaches a non-entry object");
    const auto fields = img_load<std::array<std::uint64_t, 3>>(entry);
    const std::array<std::uint64_t, 3> moved = {fields[0] ? tr(fields[0]) : 0, tr(fields[1]), tr(fields[2])};
    for (int i = 1; i < 3; ++i) {
      const std::uint64_t rec = moved[i] - tr.to;
      if (rec % 8 != 0 || !in_pass_heap(rec - kAllocHeaderSize, kAllocHeaderSize + 8))
        throw Error(Errc::corrupt_pool, "record pointer outside heap");
    }
    if (write && fields != moved) {
      s_.pool.store_value(entry, moved);
      s_.pool.flush(entry, kEntrySize);
    }
    return moved[0];
  }

 private:
  std::uint64_t write_value(TxHandle& tx, std::string_view value) {
    ObjHandle v = s_.objects->alloc(tx, kValueRecordHeader + value.size(), typenum::kValue);
    buf_.assign(kValueRecordHeader + value.size(), 0);
    put_u32(buf_, 0, static_cast<std::uint32_t>(value.size()));
    std::memcpy(buf_.data() + kValueRecordHeader, value.data(), value.size());
    tx.store(v.offset, buf_);
    return v.offset;
  }
};

// Writes a slab item into a fresh chunk and returns its offset.
inline std::uint64_t write_slab_item(StoreState& s, TxHandle& tx, std::vector<std::uint8_t>& buf, std::string_view key,
                                     std::string_view value, std::uint64_t next_addr) {
  const std::uint64_t need = kItemHeader + key.size() + value.size();
  const auto cls = s.slabs->class_for(need);
  if (!cls) throw Error(Errc::value_too_large, "item of " + std::to_string(need) + " bytes");
  ObjHandle chunk = s.slabs->alloc(tx, *cls);
  tx.add_fresh(chunk.offset, need);
  buf.assign(need, 0);
  put_u64(buf, 0, next_addr);
  put_u32(buf, 8, static_cast<std::uint32_t>(key.size()));
  put_u32(buf, 12, static_cast<std::uint32_t>(value.size()));
  std::memcpy(buf.data() + kItemHeader, key.data(), key.size());
  if (!value.empty()) std::memcpy(buf.data() + kItemHeader + key.size(), value.data(), value.size());
  tx.store(chunk.offset, buf);
  return chunk.offset;
}

inline bool slab_item_sane(const Pool& pool, const ObjHandle& chunk) {
  const auto klen = pool.load_value<std::uint32_t>(chunk.offset + 8);
  const auto vlen = pool.load_value<std::uint32_t>(chunk.offset + 12);
  return klen >= 1 && klen <= kMaxKeySize && vlen <= kMaxValueSize &&
         kItemHeader + std::uint64_t{klen} + vlen <= chunk.size;
}

class FullyPersistentSlab final : public FullyPersistentBackend<FullyPersistentSlab> {
 public:
  using FullyPersistentBackend::FullyPersistentBackend;

  std::span<const std::uint8_t> key_view(std::uint64_t item) const {
    return s_.pool.view(item + kItemHeader, s_.pool.load_value<std::uint32_t>(item + 8));
  }

  std::span<const std::uint8_t> value_view(std::uint64_t item) const {
    const auto klen = s_.pool.load_value<std::uint32_t>(item + 8);
    return s_.pool.view(item + kItemHeader + klen, s_.pool.load_value<std::uint32_t>(item + 12));
  }

  std::uint64_t make_node(TxHandle& tx, std::string_view key, std::string_view value, std::uint64_t next_addr) {
    return write_slab_item(s_, tx, buf_, key, value, next_addr);
  }

  void replace_value(TxHandle& tx, const Found& f, std::string_view key, std::string_view value) {
    const std::uint64_t item = make_node(tx, key, value, s_.pool.load_value<std::uint64_t>(f.node));
    tx.store_value(f.link, to_addr(item));
    s_.slabs->free(tx, ObjHandle{f.node, 0, 0});
  }

  void destroy_node(TxHandle& tx, std::uint64_t item) { s_.slabs->free(tx, ObjHandle{item, 0, 0}); }

  // Walk every slab, validating each live item on its own.
  std::uint64_t phase1() {
    const Pool& pool = s_.pool;
    return s_.slabs->walk([&pool](const ObjHandle& chunk) {
      if (!slab_item_sane(pool, chunk)) throw Error(Errc::corrupt_pool, "malformed slab item");
    });
  }
  bool validates_phase1() const { return true; }

  std::uint64_t fixup_node(std::uint64_t item, const Translator& tr, bool write) {
    if (!in_pass_heap(item, kItemHeader)) throw Error(Errc::corrupt_pool, "item outside heap");
    const auto next = img_load<std::uint64_t>(item);
    const auto klen = img_load<std::uint32_t>(item + 8);
    const auto vlen = img_load<std::uint32_t>(item + 12);
    if (klen == 0 || klen > kMaxKeySize || vlen > kMaxValueSize || !in_pass_heap(item, kItemHeader + klen + vlen))
      throw Error(Errc::corrupt_pool, "item length out of range");
    const std::uint64_t moved = next ? tr(next) : 0;
    if (write && moved != next) {
      s_.pool.store_value(item, moved);
      s_.pool.flush(item, 8);
    }
    return moved;
  }
};

// ---------------------------------------------------------------------------
// Hybrid: DRAM index over durable records.

struct HybridLoc {
  std::uint64_t rec = 0;  // KeyRecord or slab item
  std::uint64_t val = 0;  // ValueRecord (per-object only)
};

template <class Derived, class Index>
class HybridBackend : public Backend {
 public:
  explicit HybridBackend(StoreState& s) : Backend(s), index_(s.config.initial_buckets) {}

  std::size_t size() const override { return index_.size(); }

  std::optional<std::string> get(std::string_view key) override {
    const HybridLoc* loc = find(key, hash64(key, s_.seed));
    if (!loc) return std::nullopt;
    return std::string(chars_of(self().value_view(*loc)));
  }

  void set(TxHandle* tx, std::string_view key, std::string_view value) override {
    const std::uint64_t h = hash64(key, s_.seed);
    if (HybridLoc* loc = find(key, h)) {
      const HybridLoc before = *loc;
      *loc = self().replace_value(*tx, before, key, value);
      undo_.push_back({Undo::kRestore, h, *loc, before});
      return;
    }
    const HybridLoc loc = self().make_record(*tx, key, value);
    const std::size_t before = index_.size();
    if (index_.insert(h, loc)) s_.resize_key_counts.push_back(before);
    undo_.push_back({Undo::kErase, h, loc, {}});
  }

  bool del(TxHandle* tx, std::string_view key) override {
    const std::uint64_t h = hash64(key, s_.seed);
    HybridLoc* loc = find(key, h);
    if (!loc) return false;
    const HybridLoc gone = *loc;
    self().destroy_record(*tx, gone);
    index_.erase(h, [&](const HybridLoc& l) { return l.rec == gone.rec; });
    undo_.push_back({Undo::kReinsert, h, {}, gone});
    return true;
  }

  void for_each(const std::function<void(std::string_view, std::string_view)>& fn) const override {
    index_.for_each([&](const HybridLoc& loc) { fn(chars_of(self().key_view(loc)), chars_of(self().value_view(loc))); });
  }

  void batch_committed() override { undo_.clear(); }

  void batch_aborted() override {
    for (auto it = undo_.rbegin(); it != undo_.rend(); ++it) {
      const auto same_rec = [rec = it->now.rec](const HybridLoc& l) { return l.rec == rec; };
      switch (it->kind) {
        case Undo::kErase: index_.erase(it->hash, same_rec); break;
        case Undo::kRestore:
          if (HybridLoc* l = index_.find(it->hash, same_rec)) *l = it->before;
          break;
        case Undo::kReinsert: index_.insert(it->hash, it->before); break;
      }
    }
    undo_.clear();
  }

  /// Phase 1 discovers records in the pool, phase 2 re-inserts them.
  RecoveryReport recover() override {
    RecoveryReport report;
    std::vector<HybridLoc> found;
    auto t1 = Clock::now();
    s_.phase("iteration", true);
    self().discover(found);
    s_.phase("iteration", false);
    report.phase1_ms = ms_since(t1);
    report.phase1_visits = found.size();

    auto t2 = Clock::now();
    s_.phase("reinsertion", true);
    self().reset_index(found.size());
    std::vector<std::uint64_t> hashes(found.size());
    for (std::size_t i = 0; i < found.size(); ++i) hashes[i] = hash64(self().key_view(found[i]), s_.seed);
    constexpr std::size_t kAhead = 16;
    for (std::size_t i = 0; i < found.size(); ++i) {
      if (i + kAhead < found.size()) index_.prefetch(hashes[i + kAhead]);
      index_.insert(hashes[i], found[i]);
    }
    s_.phase("reinsertion", false);
    report.phase2_ms = ms_since(t2);
    report.keys_recovered = index_.size();
    report.volatile_allocations = index_.allocations();
    if (s_.root_u64(root::kOldBaseAddress) != s_.pool.base_address())
      s_.pool.durable_store8(s_.root_at(root::kOldBaseAddress), s_.pool.base_address());
    return report;
  }

 protected:
  struct Undo {
    enum Kind { kErase, kRestore, kReinsert } kind;
    std::uint64_t hash;
    HybridLoc now;
    HybridLoc before;
  };

  Derived& self() { return static_cast<Derived&>(*this); }
  const Derived& self() const { return static_cast<const Derived&>(*this); }

  HybridLoc* find(std::string_view key, std::uint64_t h) {
    return index_.find(h, [&](const HybridLoc& l) { return chars_of(self().key_view(l)) == key; });
  }

  Index index_;
  std::vector<Undo> undo_;
};

// One heap node per key, like a general-purpose dictionary entry.
class HybridObjects final : public HybridBackend<HybridObjects, NodeHashTable<HybridLoc>> {
 public:
  using HybridBackend::HybridBackend;

  std::span<const std::uint8_t> key_view(const HybridLoc& l) const {
    return s_.pool.view(l.rec + kKeyRecordHeader, s_.pool.load_value<std::uint32_t>(l.rec));
  }

  std::span<const std::uint8_t> value_view(const HybridLoc& l) const {
    return s_.pool.view(l.val + kValueRecordHeader, s_.pool.load_value<std::uint32_t>(l.val));
  }

  HybridLoc make_record(TxHandle& tx, std::string_view key, std::string_view value) {
    const std::uint64_t v = write_value(tx, value);
    ObjHandle k = s_.objects->alloc(tx, kKeyRecordHeader + key.size(), typenum::kKey);
    buf_.assign(kKeyRecordHeader + key.size(), 0);
    put_u32(buf_, 0, static_cast<std::uint32_t>(key.size()));
    put_u32(buf_, 4, static_cast<std::uint32_t>(value.size()));
    put_u64(buf_, 8, v);
    std::memcpy(buf_.data() + kKeyRecordHeader, key.data(), key.size());
    tx.store(k.offset, buf_);
    return {k.offset, v};
  }

  HybridLoc replace_value(TxHandle& tx, const HybridLoc& loc, std::string_view, std::string_view value) {
    const std::uint64_t v = write_value(tx, value);
    std::uint8_t patch[12];
    const auto hint = static_cast<std::uint32_t>(value.size());
    std::memcpy(patch, &hint, 4);
    std::memcpy(patch + 4, &v, 8);
    tx.store(loc.rec + 4, patch);
    s_.objects->free(tx, ObjHandle{loc.val, 0, typenum::kValue});
    return {loc.rec, v};
  }

  void destroy_record(TxHandle& tx, const HybridLoc& loc) {
    s_.objects->free(tx, ObjHandle{loc.val, 0, typenum::kValue});
    s_.objects->free(tx, ObjHandle{loc.rec, 0, typenum::kKey});
  }

  void reset_index(std::size_t) { index_.clear(s_.config.initial_buckets); }

  // Enumerate KEY allocations and follow each record's value offset.
  void discover(std::vector<HybridLoc>& out) const {
    const ObjectAllocator& objects = *s_.objects;
    for (auto h = objects.iter_first(typenum::kKey); h; h = objects.iter_next(*h)) {
      const auto klen = s_.pool.load_value<std::uint32_t>(h->offset);
      const auto val = s_.pool.load_value<std::uint64_t>(h->offset + 8);
      if (klen == 0 || klen > kMaxKeySize || kKeyRecordHeader + klen > h->size)
        throw Error(Errc::corrupt_pool, "key record length");
      const auto vhdr = objects.live_header(val);
      if (!vhdr || vhdr->typenum != typenum::kValue)
        throw Error(Errc::corrupt_pool, "dangling value offset in key record");
      const auto vlen = s_.pool.load_value<std::uint32_t>(val);
      if (vlen > kMaxValueSize || kValueRecordHeader + vlen > vhdr->size)
        throw Error(Errc::corrupt_pool, "value record length");
      out.push_back({h->offset, val});
    }
  }

 private:
  std::uint64_t write_value(TxHandle& tx, std::string_view value) {
    ObjHandle v = s_.objects->alloc(tx, kValueRecordHeader + value.size(), typenum::kValue);
    buf_.assign(kValueRecordHeader + value.size(), 0);
    put_u32(buf_, 0, static_cast<std::uint32_t>(value.size()));
    std::memcpy(buf_.data() + kValueRecordHeader, value.data(), value.size());
    tx.store(v.offset, buf_);
    return v.offset;
  }
};

// Chain links sit in preallocated storage, so rebuilding needs no per-item
// allocation.
class HybridSlab final : public HybridBackend<HybridSlab, ChainedHashTable<HybridLoc>> {
 public:
  using HybridBackend::HybridBackend;

  std::span<const std::uint8_t> key_view(const HybridLoc& l) const {
    return s_.pool.view(l.rec + kItemHeader, s_.pool.load_value<std::uint32_t>(l.rec + 8));
  }

  std::span<const std::uint8_t> value_view(const HybridLoc& l) const {
    const auto klen = s_.pool.load_value<std::uint32_t>(l.rec + 8);
    return s_.pool.view(l.rec + kItemHeader + klen, s_.pool.load_value<std::uint32_t>(l.rec + 12));
  }

  HybridLoc make_record(TxHandle& tx, std::string_view key, std::string_view value) {
    return {write_slab_item(s_, tx, buf_, key, value, 0), 0};
  }

  HybridLoc replace_value(TxHandle& tx, const HybridLoc& loc, std::string_view key, std::string_view value) {
    const HybridLoc fresh = make_record(tx, key, value);
    s_.slabs->free(tx, ObjHandle{loc.rec, 0, 0});
    return fresh;
  }

  void destroy_record(TxHandle& tx, const HybridLoc& loc) { s_.slabs->free(tx, ObjHandle{loc.rec, 0, 0}); }

  // The walk already counted the items, so the index is sized once.
  void reset_index(std::size_t items) { index_.reset_for(items, s_.config.initial_buckets); }

  void discover(std::vector<HybridLoc>& out) const {
    const Pool& pool = s_.pool;
    s_.slabs->walk([&](const ObjHandle& chunk) {
      if (!slab_item_sane(pool, chunk)) throw Error(Errc::corrupt_pool, "malformed slab item");
      out.push_back({chunk.offset, 0});
    });
  }
};

// ---------------------------------------------------------------------------
// Snapshot baseline: DRAM map plus double-buffered serialized images.
//
// Image: u64 payload_len | (u32 klen, key, u32 vlen, value)* | u64 count |
//        u32 crc32(pairs, count)
// snapshot_selector = generation << 1 | region (0 = A, 1 = B); 0 = none.

struct SnapshotPair {
  std::string key;
  std::string value;
};

class SnapshotBackend final : public Backend {
 public:
  explicit SnapshotBackend(StoreState& s) : Backend(s), map_(s.config.initial_buckets) {
    const PoolHeader& h = s.pool.header();
    region_size_ = (h.pool_size - h.heap_offset) / 2 / kCacheLine * kCacheLine;
  }

  std::size_t size() const override { return map_.size(); }

  std::optional<std::string> get(std::string_view key) override {
    const SnapshotPair* p = map_.find(hash64(key, s_.seed), [&](const SnapshotPair& e) { return e.key == key; });
    if (!p) return std::nullopt;
    return p->value;
  }

  void set(TxHandle*, std::string_view key, std::string_view value) override {
    const std::uint64_t h = hash64(key, s_.seed);
    if (SnapshotPair* p = map_.find(h, [&](const SnapshotPair& e) { return e.key == key; })) {
      p->value.assign(value);
    } else {
      const std::size_t before = map_.size();
      if (map_.insert(h, SnapshotPair{std::string(key), std::string(value)})) s_.resize_key_counts.push_back(before);
    }
    ++mods_;
  }

  bool del(TxHandle*, std::string_view key) override {
    const bool removed =
        map_.erase(hash64(key, s_.seed), [&](const SnapshotPair& e) { return e.key == key; }).has_value();
    if (removed) ++mods_;
    return removed;
  }

  void for_each(const std::function<void(std::string_view, std::string_view)>& fn) const override {
    map_.for_each([&](const SnapshotPair& p) { fn(p.key, p.value); });
  }

  bool snapshot_tick(double now) override {
    if (!last_) last_ = now;
    const SnapshotPolicy& policy = s_.config.snapshot_policy;
    const bool by_time = policy.period_seconds > 0 && now - *last_ >= policy.period_seconds;
    const bool by_count = policy.every_k_modifications > 0 && mods_ >= policy.every_k_modifications;
    if (!by_time && !by_count) return false;
    write_snapshot();
    last_ = now;
    mods_ = 0;
    return true;
  }

  std::uint64_t snapshots() const override { return snapshots_; }

  void write_snapshot() {
    buf_.assign(8, 0);
    std::uint64_t count = 0;
    map_.for_each([&](const SnapshotPair& p) {
      append_u32(static_cast<std::uint32_t>(p.key.size()));
      buf_.insert(buf_.end(), p.key.begin(), p.key.end());
      append_u32(static_cast<std::uint32_t>(p.value.size()));
      buf_.insert(buf_.end(), p.value.begin(), p.value.end());
      ++count;
    });
    const std::uint64_t payload_len = buf_.size() - 8;
    put_u64(buf_, 0, payload_len);
    const std::size_t count_at = buf_.size();
    buf_.resize(buf_.size() + 12);
    put_u64(buf_, count_at, count);
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, buf_.data() + 8, static_cast<uInt>(payload_len + 8));
    put_u32(buf_, count_at + 8, static_cast<std::uint32_t>(crc));
    if (buf_.size() > region_size_)
      throw Error(Errc::snapshot_region_overflow,
                  std::to_string(buf_.size()) + " > " + std::to_string(region_size_));

    const std::uint64_t selector = s_.root_u64(root::kSnapshotSelector);
    const std::uint64_t region = selector == 0 ? 0 : ((selector & 1) ^ 1);
    const std::uint64_t generation = (selector >> 1) + 1;
    const std::uint64_t at = region_offset(region);
    s_.pool.store(at, buf_);
    s_.pool.flush(at, buf_.size());
    s_.pool.fence();
    s_.pool.durable_store8(s_.root_at(root::kSnapshotSelector), generation << 1 | region);
    ++snapshots_;
  }

  RecoveryReport recover() override {
    RecoveryReport report;
    auto t1 = Clock::now();
    map_.clear(s_.config.initial_buckets);
    const std::uint64_t selector = s_.root_u64(root::kSnapshotSelector);
    if (selector != 0) {
      const std::uint64_t at = region_offset(selector & 1);
      const auto payload_len = s_.pool.load_value<std::uint64_t>(at);
      if (payload_len > region_size_ - 20) throw Error(Errc::corrupt_pool, "snapshot length");
      auto image = s_.pool.view(at + 8, payload_len + 12);
      std::uint64_t count;
      std::uint32_t stored_crc;
      std::memcpy(&count, image.data() + payload_len, 8);
      std::memcpy(&stored_crc, image.data() + payload_len + 8, 4);
      uLong crc = crc32(0L, Z_NULL, 0);
      crc = crc32(crc, image.data(), static_cast<uInt>(payload_len + 8));
      if (static_cast<std::uint32_t>(crc) != stored_crc) throw Error(Errc::corrupt_pool, "snapshot checksum");
      std::uint64_t pos = 0, seen = 0;
      auto take = [&](std::uint64_t n) {
        if (n > payload_len - pos) throw Error(Errc::corrupt_pool, "snapshot truncated");
        auto out = image.subspan(pos, n);
        pos += n;
        return out;
      };
      while (pos < payload_len) {
        std::uint32_t klen, vlen;
        std::memcpy(&klen, take(4).data(), 4);
        std::string key(chars_of(take(klen)));
        std::memcpy(&vlen, take(4).data(), 4);
        std::string value(chars_of(take(vlen)));
        const std::uint64_t h = hash64(key, s_.seed);
        map_.insert(h, SnapshotPair{std::move(key), std::move(value)});
        ++seen;
      }
      if (seen != count) throw Error(Errc::corrupt_pool, "snapshot pair count");
    }
    report.phase1_ms = ms_since(t1);
    report.keys_recovered = map_.size();
    report.phase1_visits = map_.size();
    report.volatile_allocations = map_.allocations();
    return report;
  }

 private:
  std::uint64_t region_offset(std::uint64_t region) const {
    return s_.pool.header().heap_offset + region * region_size_;
  }

  void append_u32(std::uint32_t v) {
    const std::size_t at = buf_.size();
    buf_.resize(at + 4);
    std::memcpy(buf_.data() + at, &v, 4);
  }

  ChainedHashTable<SnapshotPair> map_;
  std::uint64_t region_size_ = 0;
  std::optional<double> last_;
  std::uint64_t mods_ = 0;
  std::uint64_t snapshots_ = 0;
};

}  // namespace detail

class Store {
 public:
  /// Opens (or creates) the pool named by config.path; an empty path gives
  /// a fresh in-memory pool of config.pool_size bytes.
  static Store open(StoreConfig config) {
    Pool pool;
    std::error_code ec;
    if (!config.path.empty() && std::filesystem::exists(config.path, ec))
      pool = Pool::open(config.path, config.pool_options);
    else
      pool = Pool::create(config.path, config.pool_size, config.pool_options);
    return open(std::move(pool), std::move(config));
  }

  /// Takes ownership of an already opened pool and runs recovery. If an
  /// injected crash interrupts recovery and `crashed` is given, it receives
  /// the pool's post-crash image before CrashInjected propagates.
  static Store open(Pool pool, StoreConfig config, DurableSnapshot* crashed = nullptr) {
    Store store;
    store.s_ = std::make_unique<detail::StoreState>();
    store.s_->config = std::move(config);
    store.s_->pool = std::move(pool);
    try {
      store.init();
    } catch (const CrashInjected&) {
      if (crashed) *crashed = store.s_->pool.crash();
      throw;
    }
    return store;
  }

  Store(Store&&) noexcept = default;
  Store& operator=(Store&&) noexcept = default;

  ~Store() {
    if (!s_) return;
    try {
      close();
    } catch (...) {
    }
  }

  Mode mode() const noexcept { return s_->config.mode; }
  AllocStrategy alloc_strategy() const noexcept { return s_->config.alloc; }
  const StoreConfig& config() const noexcept { return s_->config; }
  const RecoveryReport& recovery_report() const noexcept { return report_; }
  std::uint64_t hash_seed() const noexcept { return s_->seed; }

  void set(std::string_view key, std::string_view value) {
    check_key(key);
    if (value.size() > kMaxValueSize) throw Error(Errc::value_too_large, std::to_string(value.size()) + " bytes");
    run_op([&](TxHandle* tx) { backend_->set(tx, key, value); });
  }

  std::optional<std::string> get(std::string_view key) {
    if (key.empty() || key.size() > kMaxKeySize) return std::nullopt;
    return backend_->get(key);
  }

  bool del(std::string_view key) {
    check_key(key);
    bool removed = false;
    run_op([&](TxHandle* tx) { removed = backend_->del(tx, key); });
    return removed;
  }

  /// Commits a partially filled batch.
  void commit_batch() {
    if (!batch_open_) return;
    s_->txm->current().commit();
    batch_open_ = false;
    acked_ += ops_in_batch_;
    ops_in_batch_ = 0;
    backend_->batch_committed();
  }

  /// Snapshot mode only: takes a snapshot when the policy fires at `now`
  /// (seconds on the caller's clock).
  bool snapshot_tick(double now) { return backend_->snapshot_tick(now); }

  std::size_t size() const { return backend_->size(); }

  void for_each(const std::function<void(std::string_view, std::string_view)>& fn) const { backend_->for_each(fn); }

  /// Operations whose effects are durable (or, for the snapshot baseline,
  /// applied to the map).
  std::uint64_t acked_ops() const noexcept { return acked_; }

  StoreStats stats() const {
    StoreStats st;
    st.resize_key_counts = s_->resize_key_counts;
    st.heap_allocations = s_->objects ? s_->objects->stats().heap_allocations : 0;
    st.acked_ops = acked_;
    st.snapshots = backend_->snapshots();
    st.tx = s_->txm->totals();
    return st;
  }

  const std::vector<std::uint64_t>& resize_key_counts() const noexcept { return s_->resize_key_counts; }

  /// (key, value) pairs recovered straight from the pool's allocation
  /// metadata: the typed object list for per-object stores, the slab
  /// bitmaps for slab stores. Cross-checks record counts on the way.
  std::vector<std::pair<std::string, std::string>> durable_pairs() const {
    std::vector<std::pair<std::string, std::string>> out;
    const detail::StoreState& s = *s_;
    const Pool& pool = s.pool;
    if (s.config.mode == Mode::snapshot) {
      for_each([&](std::string_view k, std::string_view v) { out.emplace_back(k, v); });
      return out;
    }
    auto text = [&](std::uint64_t off, std::uint64_t len) { return std::string(detail::chars_of(pool.view(off, len))); };
    auto count_type = [&](std::uint32_t type) {
      std::uint64_t n = 0;
      for (auto h = s.objects->iter_first(type); h; h = s.objects->iter_next(*h)) ++n;
      return n;
    };
    if (s.config.alloc == AllocStrategy::slab) {
      s.slabs->walk([&](const ObjHandle& chunk) {
        const auto klen = pool.load_value<std::uint32_t>(chunk.offset + 8);
        const auto vlen = pool.load_value<std::uint32_t>(chunk.offset + 12);
        out.emplace_back(text(chunk.offset + detail::kItemHeader, klen),
                         text(chunk.offset + detail::kItemHeader + klen, vlen));
      });
    } else if (s.config.mode == Mode::fully_persistent) {
      const std::uint64_t base = pool.base_address();
      for (auto h = s.objects->iter_first(typenum::kEntry); h; h = s.objects->iter_next(*h)) {
        const std::uint64_t k = pool.load_value<std::uint64_t>(h->offset + 8) - base;
        const std::uint64_t v = pool.load_value<std::uint64_t>(h->offset + 16) - base;
        out.emplace_back(text(k + detail::kKeyRecordHeader, pool.load_value<std::uint32_t>(k)),
                         text(v + detail::kValueRecordHeader, pool.load_value<std::uint32_t>(v)));
      }
      if (count_type(typenum::kKey) != out.size())
        throw Error(Errc::corrupt_pool, "key records differ from entries");
    } else {
      for (auto h = s.objects->iter_first(typenum::kKey); h; h = s.objects->iter_next(*h)) {
        const std::uint64_t v = pool.load_value<std::uint64_t>(h->offset + 8);
        out.emplace_back(text(h->offset + detail::kKeyRecordHeader, pool.load_value<std::uint32_t>(h->offset)),
                         text(v + detail::kValueRecordHeader, pool.load_value<std::uint32_t>(v)));
      }
    }
    if (s.config.alloc == AllocStrategy::per_object && count_type(typenum::kValue) != out.size())
      throw Error(Errc::corrupt_pool, "value records differ from keys");
    return out;
  }

  Pool& pool() noexcept { return s_->pool; }
  TxManager& tx_manager() noexcept { return *s_->txm; }
  ObjectAllocator* objects() noexcept { return s_->objects.get(); }
  SlabAllocator* slabs() noexcept { return s_->slabs.get(); }

  void close() {
    if (!s_ || !s_->pool.valid() || s_->pool.crashed()) return;
    commit_batch();
    s_->pool.close();
  }

  DurableSnapshot crash() { return s_->pool.crash(); }

 private:
  Store() = default;

  static void check_key(std::string_view key) {
    if (key.empty()) throw Error(Errc::invalid_key, "empty key");
    if (key.size() > kMaxKeySize) throw Error(Errc::key_too_large, std::to_string(key.size()) + " bytes");
  }

  template <class Fn>
  void run_op(Fn&& fn) {
    if (s_->config.mode == Mode::snapshot) {
      fn(nullptr);
      ++acked_;
      return;
    }
    TxManager& txm = *s_->txm;
    if (!batch_open_) {
      txm.begin();
      batch_open_ = true;
    }
    try {
      fn(&txm.current());
    } catch (const Error&) {
      batch_open_ = false;
      ops_in_batch_ = 0;
      if (txm.active()) txm.current().abort();
      throw;
    }
    if (++ops_in_batch_ >= s_->config.tx_batch) commit_batch();
  }

  void init() {
    detail::StoreState& s = *s_;
    if (s.config.tx_batch == 0) throw Error(Errc::invalid_argument, "tx_batch must be >= 1");
    const auto t0 = detail::Clock::now();
    s.txm = std::make_unique<TxManager>(s.pool);
    report_.log_rolled_back = recover_log(s.pool).rolled_back;

    const std::uint64_t stored_mode = s.root_u64(root::kMode);
    const bool fresh = stored_mode == 0;
    const bool uses_alloc = s.config.mode != Mode::snapshot;
    const std::uint64_t strategy = uses_alloc ? static_cast<std::uint64_t>(s.config.alloc) : 0;
    if (!fresh && (stored_mode != static_cast<std::uint64_t>(s.config.mode) ||
                   s.root_u64(root::kAllocStrategy) != strategy))
      throw Error(Errc::mode_mismatch, "pool holds a " + std::string(to_string(static_cast<Mode>(stored_mode))) +
                                           " store");
    s.seed = fresh ? s.config.hash_seed.value_or(detail::random_seed()) : s.root_u64(root::kHashSeed);

    if (uses_alloc) {
      s.objects = std::make_unique<ObjectAllocator>(s.pool);
      if (s.config.alloc == AllocStrategy::slab) {
        SlabConfig slab = s.config.slab;
        if (slab.max_item == 0) slab.max_item = detail::kItemHeader + kMaxKeySize + kMaxValueSize;
        s.slabs = std::make_unique<SlabAllocator>(*s.objects, *s.txm, slab);
      }
    }

    switch (s.config.mode) {
      case Mode::fully_persistent:
        if (s.config.alloc == AllocStrategy::slab)
          backend_ = std::make_unique<detail::FullyPersistentSlab>(s);
        else
          backend_ = std::make_unique<detail::FullyPersistentObjects>(s);
        break;
      case Mode::hybrid:
        if (s.config.alloc == AllocStrategy::slab)
          backend_ = std::make_unique<detail::HybridSlab>(s);
        else
          backend_ = std::make_unique<detail::HybridObjects>(s);
        break;
      case Mode::snapshot: backend_ = std::make_unique<detail::SnapshotBackend>(s); break;
    }
    s.txm->on_abort([b = backend_.get()] { b->batch_aborted(); });

    if (fresh) {
      TxScope tx(*s.txm);
      const std::uint64_t words[3] = {static_cast<std::uint64_t>(s.config.mode), strategy, s.seed};
      tx->store_value(s.root_at(root::kMode), words);
      tx->store_value(s.root_at(root::kOldBaseAddress), s.pool.base_address());
      tx->store_value(s.root_at(root::kFixupTargetBase), std::uint64_t{0});
      tx->store_value(s.root_at(root::kSnapshotSelector), std::uint64_t{0});
      backend_->init(tx.handle());
      tx.commit();
      report_.fresh = true;
    } else {
      const bool rolled_back = report_.log_rolled_back;
      report_ = backend_->recover();
      report_.log_rolled_back = rolled_back;
    }
    report_.elapsed_ms = detail::ms_since(t0);
  }

  std::unique_ptr<detail::StoreState> s_;
  std::unique_ptr<detail::Backend> backend_;
  RecoveryReport report_;
  bool batch_open_ = false;
  std::uint64_t ops_in_batch_ = 0;
  std::uint64_t acked_ = 0;
};

}  // namespace pmkv
