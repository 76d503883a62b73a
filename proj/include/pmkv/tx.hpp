#pragma once

// Undo-log transactions over a Pool.
//
// Log region layout: the first 8 bytes hold `head`, the number of valid
// entries. Entries start one cache line later and are packed back to back:
//
//   u64 target_offset | u32 length | u32 crc32(target, length, old_bytes)
//   old_bytes, zero padded to a multiple of 8
//
// An entry is written, flushed and fenced before head is bumped with an
// atomic 8-byte store, and head is bumped before the covered range may be
// modified. Commit flushes the modified lines, fences, then clears head.

#include <pmkv/error.hpp>
#include <pmkv/pool.hpp>

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iterator>
#include <map>
#include <span>
#include <utility>
#include <vector>

namespace pmkv {

inline constexpr std::uint64_t kUndoEntryHeaderSize = 16;
inline constexpr std::uint64_t kMaxUndoPayload = 4096;
inline constexpr std::uint64_t kLogEntriesStart = kCacheLine;

struct TxStats {
  std::uint64_t log_entries = 0;
  std::uint64_t bytes_logged = 0;
  std::uint64_t flushes = 0;
  std::uint64_t fences = 0;
  std::uint64_t dirty_lines = 0;

  TxStats& operator+=(const TxStats& o) {
    log_entries += o.log_entries;
    bytes_logged += o.bytes_logged;
    flushes += o.flushes;
    fences += o.fences;
    dirty_lines += o.dirty_lines;
    return *this;
  }
};

struct LogRecovery {
  bool rolled_back = false;
  std::uint64_t entries = 0;
};

namespace detail {

inline std::uint32_t undo_checksum(std::uint64_t target, std::uint32_t length,
                                   std::span<const std::uint8_t> old_bytes) {
  std::uint8_t head[12];
  std::memcpy(head, &target, 8);
  std::memcpy(head + 8, &length, 4);
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, head, sizeof(head));
  crc = crc32(crc, old_bytes.data(), static_cast<uInt>(old_bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

struct ParsedUndoEntry {
  std::uint64_t target;
  std::uint32_t length;
  std::uint64_t data_offset;  // pool offset of old_bytes
};

// Validates and decodes entries [0, head). Fail-stop on any inconsistency.
inline std::vector<ParsedUndoEntry> parse_undo_log(const Pool& pool) {
  const PoolHeader& h = pool.header();
  const std::uint64_t head = pool.load_value<std::uint64_t>(h.log_region_offset);
  std::vector<ParsedUndoEntry> entries;
  std::uint64_t pos = kLogEntriesStart;
  for (std::uint64_t i = 0; i < head; ++i) {
    if (pos + kUndoEntryHeaderSize > h.log_region_size)
      throw Error(Errc::corrupt_log, "entry " + std::to_string(i) + " beyond log region");
    const std::uint64_t at = h.log_region_offset + pos;
    const auto target = pool.load_value<std::uint64_t>(at);
    const auto length = pool.load_value<std::uint32_t>(at + 8);
    const auto checksum = pool.load_value<std::uint32_t>(at + 12);
    const std::uint64_t padded = align_up(length, 8);
    if (length == 0 || length > kMaxUndoPayload ||
        pos + kUndoEntryHeaderSize + padded > h.log_region_size || target > pool.size() ||
        length > pool.size() - target)
      throw Error(Errc::corrupt_log, "entry " + std::to_string(i) + " malformed");
    if (undo_checksum(target, length, pool.view(at + kUndoEntryHeaderSize, length)) != checksum)
      throw Error(Errc::corrupt_log, "entry " + std::to_string(i) + " checksum mismatch");
    entries.push_back({target, length, at + kUndoEntryHeaderSize});
    pos += kUndoEntryHeaderSize + padded;
  }
  return entries;
}

}  // namespace detail

/// Rolls back an interrupted transaction. Must run before anything else
/// touches a freshly opened pool. Idempotent: a crash part way through
/// leaves head untouched, so the next attempt re-applies the same entries.
inline LogRecovery recover_log(Pool& pool) {
  const auto entries = detail::parse_undo_log(pool);
  if (entries.empty()) return {};
  std::vector<std::uint8_t> buf;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    auto old = pool.view(it->data_offset, it->length);
    buf.assign(old.begin(), old.end());
    pool.store(it->target, buf);
    pool.flush(it->target, it->length);
  }
  pool.fence();
  pool.durable_store8(pool.header().log_region_offset, 0);
  return {true, entries.size()};
}

class TxManager;

/// The open transaction. Nested begin/commit pairs flatten into the
/// outermost one; only the outermost commit is a durability point.
class TxHandle {
 public:
  int depth() const noexcept { return depth_; }
  bool active() const noexcept { return depth_ > 0; }

  /// Snapshots [offset, offset+length) into the undo log unless already
  /// covered. Overflowing the log aborts the whole transaction.
  void add_range(std::uint64_t offset, std::uint64_t length) {
    require_active();
    if (length == 0) return;
    if (offset > pool_->size() || length > pool_->size() - offset)
      throw Error(Errc::out_of_bounds, "add_range outside pool");
    const std::uint64_t end = offset + length;
    std::uint64_t cursor = offset;
    auto it = covered_.upper_bound(offset);
    if (it != covered_.begin()) {
      auto prev = std::prev(it);
      if (prev->second > cursor) cursor = prev->second;
    }
    while (cursor < end) {
      const std::uint64_t gap_end = (it != covered_.end() && it->first < end) ? it->first : end;
      if (cursor < gap_end) log_gap(cursor, gap_end);
      if (it == covered_.end() || it->first >= end) break;
      cursor = std::max(cursor, it->second);
      ++it;
    }
    cover(offset, end);
  }

  /// Marks memory allocated inside this transaction. It needs no pre-image
  /// because an abort makes it unreachable again.
  void add_fresh(std::uint64_t offset, std::uint64_t length) {
    require_active();
    if (length) cover(offset, offset + length);
  }

  void store(std::uint64_t offset, std::span<const std::uint8_t> bytes) {
    add_range(offset, bytes.size());
    pool_->store(offset, bytes);
    if (!bytes.empty()) dirty_.emplace_back(offset, bytes.size());
  }

  template <class T>
    requires std::is_trivially_copyable_v<T>
  void store_value(std::uint64_t offset, const T& value) {
    store(offset, std::span(reinterpret_cast<const std::uint8_t*>(&value), sizeof(T)));
  }

  /// Number of distinct (offset, length) ranges currently covered.
  std::size_t covered_range_count() const noexcept { return covered_.size(); }
  const TxStats& stats() const noexcept { return stats_; }

  TxStats commit();
  void abort();

 private:
  friend class TxManager;

  void require_active() const {
    if (depth_ <= 0) throw Error(Errc::invalid_argument, "no open transaction");
  }

  void cover(std::uint64_t begin, std::uint64_t end) {
    auto it = covered_.upper_bound(begin);
    if (it != covered_.begin()) {
      auto prev = std::prev(it);
      if (prev->second >= begin) {
        begin = prev->first;
        end = std::max(end, prev->second);
        it = covered_.erase(prev);
      }
    }
    while (it != covered_.end() && it->first <= end) {
      end = std::max(end, it->second);
      it = covered_.erase(it);
    }
    covered_.emplace(begin, end);
  }

  void log_gap(std::uint64_t begin, std::uint64_t end) {
    for (std::uint64_t at = begin; at < end; at += kMaxUndoPayload)
      append_entry(at, std::min(end - at, kMaxUndoPayload));
  }

  void append_entry(std::uint64_t target, std::uint64_t length) {
    const PoolHeader& h = pool_->header();
    const std::uint64_t padded = align_up(length, 8);
    const std::uint64_t entry_size = kUndoEntryHeaderSize + padded;
    if (tail_ + entry_size > h.log_region_size) {
      abort();
      throw Error(Errc::log_region_full, "undo log holds " + std::to_string(entry_count_) + " entries");
    }
    scratch_.assign(entry_size, 0);
    auto old = pool_->view(target, length);
    const auto len32 = static_cast<std::uint32_t>(length);
    const std::uint32_t crc = detail::undo_checksum(target, len32, old);
    std::memcpy(scratch_.data(), &target, 8);
    std::memcpy(scratch_.data() + 8, &len32, 4);
    std::memcpy(scratch_.data() + 12, &crc, 4);
    std::memcpy(scratch_.data() + kUndoEntryHeaderSize, old.data(), length);

    const std::uint64_t at = h.log_region_offset + tail_;
    pool_->store(at, scratch_);
    pool_->flush(at, entry_size);
    pool_->fence();
    pool_->durable_store8(h.log_region_offset, entry_count_ + 1);
    ++entry_count_;
    tail_ += entry_size;
    stats_.log_entries += 1;
    stats_.bytes_logged += length;
  }

  void reset() {
    depth_ = 0;
    tail_ = kLogEntriesStart;
    entry_count_ = 0;
    covered_.clear();
    dirty_.clear();
  }

  Pool* pool_ = nullptr;
  TxManager* manager_ = nullptr;
  int depth_ = 0;
  std::uint64_t tail_ = kLogEntriesStart;
  std::uint64_t entry_count_ = 0;
  std::uint64_t events_at_begin_ = 0;
  std::uint64_t fences_at_begin_ = 0;
  std::map<std::uint64_t, std::uint64_t> covered_;  // begin -> end, disjoint
  std::vector<std::pair<std::uint64_t, std::uint64_t>> dirty_;
  std::vector<std::uint8_t> scratch_;
  TxStats stats_;
};

/// Owns the single transaction slot of a pool.
class TxManager {
 public:
  explicit TxManager(Pool& pool) : pool_(&pool) {
    handle_.pool_ = &pool;
    handle_.manager_ = this;
  }
  TxManager(const TxManager&) = delete;
  TxManager& operator=(const TxManager&) = delete;

  Pool& pool() noexcept { return *pool_; }

  TxHandle& begin() {
    if (handle_.depth_ == 0) {
      if (pool_->load_value<std::uint64_t>(pool_->header().log_region_offset) != 0)
        throw Error(Errc::corrupt_log, "begin with a non-empty undo log; run recover_log first");
      handle_.stats_ = {};
      handle_.events_at_begin_ = pool_->event_counter();
      handle_.fences_at_begin_ = pool_->fence_count();
    }
    ++handle_.depth_;
    return handle_;
  }

  TxHandle& current() noexcept { return handle_; }
  bool active() const noexcept { return handle_.active(); }

  // Called after a rollback so owners of volatile caches can resync.
  void on_abort(std::function<void()> fn) { abort_listeners_.push_back(std::move(fn)); }

  const TxStats& totals() const noexcept { return totals_; }
  std::uint64_t commits() const noexcept { return commits_; }
  std::uint64_t aborts() const noexcept { return aborts_; }

 private:
  friend class TxHandle;

  void finish(const TxStats& stats, bool aborted) {
    totals_ += stats;
    if (aborted) {
      ++aborts_;
      for (auto& fn : abort_listeners_) fn();
    } else {
      ++commits_;
    }
  }

  Pool* pool_;
  TxHandle handle_;
  std::vector<std::function<void()>> abort_listeners_;
  TxStats totals_;
  std::uint64_t commits_ = 0;
  std::uint64_t aborts_ = 0;
};

inline TxStats TxHandle::commit() {
  require_active();
  if (--depth_ > 0) return stats_;

  std::sort(dirty_.begin(), dirty_.end());
  std::uint64_t run_begin = 0, run_end = 0;
  bool have_run = false;
  for (const auto& [off, len] : dirty_) {
    const std::uint64_t b = off / kCacheLine * kCacheLine;
    const std::uint64_t e = align_up(off + len, kCacheLine);
    if (have_run && b <= run_end) {
      run_end = std::max(run_end, e);
      continue;
    }
    if (have_run) pool_->flush(run_begin, std::min(run_end, pool_->size()) - run_begin);
    run_begin = b;
    run_end = e;
    have_run = true;
  }
  if (have_run) pool_->flush(run_begin, std::min(run_end, pool_->size()) - run_begin);
  stats_.dirty_lines = pool_->pending_line_count();
  if (have_run || entry_count_ > 0) pool_->fence();
  if (entry_count_ > 0) pool_->durable_store8(pool_->header().log_region_offset, 0);

  stats_.fences = pool_->fence_count() - fences_at_begin_;
  stats_.flushes = (pool_->event_counter() - events_at_begin_) - stats_.fences;
  TxStats result = stats_;
  reset();
  manager_->finish(result, false);
  return result;
}

inline void TxHandle::abort() {
  require_active();
  const auto entries = detail::parse_undo_log(*pool_);
  std::vector<std::uint8_t> buf;
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) {
    auto old = pool_->view(it->data_offset, it->length);
    buf.assign(old.begin(), old.end());
    pool_->store(it->target, buf);
    pool_->flush(it->target, it->length);
  }
  if (!entries.empty()) {
    pool_->fence();
    pool_->durable_store8(pool_->header().log_region_offset, 0);
  }
  stats_.fences = pool_->fence_count() - fences_at_begin_;
  stats_.flushes = (pool_->event_counter() - events_at_begin_) - stats_.fences;
  TxStats result = stats_;
  reset();
  manager_->finish(result, true);
}

/// RAII guard: aborts on scope exit unless committed. Leaves a crashed pool
/// alone so a CrashInjected unwinds without touching the images.
class TxScope {
 public:
  explicit TxScope(TxManager& manager) : manager_(&manager), tx_(&manager.begin()) {}
  TxScope(const TxScope&) = delete;
  TxScope& operator=(const TxScope&) = delete;
  ~TxScope() {
    if (done_ || !tx_->active() || manager_->pool().crashed() || !manager_->pool().valid()) return;
    try {
      tx_->abort();
    } catch (...) {
    }
  }

  TxHandle* operator->() noexcept { return tx_; }
  TxHandle& handle() noexcept { return *tx_; }

  TxStats commit() {
    done_ = true;
    return tx_->commit();
  }

 private:
  TxManager* manager_;
  TxHandle* tx_;
  bool done_ = false;
};

}  // namespace pmkv
