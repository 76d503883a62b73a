#pragma once

// Persistent allocators.
//
// ObjectAllocator is a bump allocator whose live objects form one durable
// doubly-linked list rooted in the allocation table. Every object carries
// a type number, so recovery can enumerate "all objects of type T" without
// any other bookkeeping.
//
// SlabAllocator carves fixed-size chunks out of large slabs obtained from
// the ObjectAllocator, one heap allocation per slab. Chunk liveness is a
// durable bitmap in each slab header.
//
// Allocation table layout (page at PoolHeader::alloc_table_offset):
//   +0  heap_top          +8  list_head        +16 slab_class_count
//   +64 + 16*i            {chunk_size, first_slab} for slab class i

#include <pmkv/error.hpp>
#include <pmkv/pool.hpp>
#include <pmkv/tx.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <vector>

namespace pmkv {

struct ObjHandle {
  std::uint64_t offset = 0;  // payload
  std::uint64_t size = 0;
  std::uint32_t typenum = 0;

  friend bool operator==(const ObjHandle&, const ObjHandle&) = default;
};

/// 32-byte header in front of every object payload.
struct AllocHeader {
  std::uint64_t size;
  std::uint64_t next;
  std::uint64_t prev;
  std::uint32_t typenum;
  std::uint32_t state;

  static constexpr std::uint32_t kLive = 0x4556494c;  // "LIVE"
  static constexpr std::uint32_t kFree = 0x45455246;  // "FREE"
  static constexpr std::uint64_t kNextField = 8;
  static constexpr std::uint64_t kPrevField = 16;
  static constexpr std::uint64_t kStateField = 28;
};
static_assert(sizeof(AllocHeader) == 32);

inline constexpr std::uint64_t kAllocHeaderSize = sizeof(AllocHeader);
inline constexpr std::uint64_t kHeapTopField = 0;
inline constexpr std::uint64_t kListHeadField = 8;
inline constexpr std::uint64_t kSlabClassCountField = 16;
inline constexpr std::uint64_t kSlabClassTable = 64;
inline constexpr std::uint32_t kMaxSlabClasses = (kAllocTableSize - kSlabClassTable) / 16;

struct AllocStats {
  std::uint64_t heap_allocations = 0;
  std::uint64_t heap_frees = 0;
};

class ObjectAllocator {
 public:
  explicit ObjectAllocator(Pool& pool) : pool_(&pool), table_(pool.header().alloc_table_offset) {
    if (pool.load_value<std::uint64_t>(table_ + kHeapTopField) == 0)
      pool.durable_store8(table_ + kHeapTopField, pool.header().heap_offset);
  }

  Pool& pool() const noexcept { return *pool_; }
  const AllocStats& stats() const noexcept { return stats_; }
  std::uint64_t heap_top() const { return pool_->load_value<std::uint64_t>(table_ + kHeapTopField); }
  std::uint64_t heap_free() const { return pool_->size() - heap_top(); }

  ObjHandle alloc(TxHandle& tx, std::uint64_t size, std::uint32_t typenum) {
    const std::uint64_t top = heap_top();
    const std::uint64_t need = kAllocHeaderSize + align_up(size, 8);
    if (size > pool_->size() || need > pool_->size() - top)
      throw Error(Errc::out_of_memory,
                  "object of " + std::to_string(size) + " bytes, " + std::to_string(heap_free()) + " free");
    const std::uint64_t head = pool_->load_value<std::uint64_t>(table_ + kListHeadField);

    tx.add_fresh(top, need);
    const AllocHeader hdr{size, head, 0, typenum, AllocHeader::kLive};
    tx.store_value(top, hdr);
    if (head != 0) tx.store_value(head + AllocHeader::kPrevField, top);
    const std::uint64_t table_words[2] = {top + need, top};
    tx.store_value(table_ + kHeapTopField, table_words);
    ++stats_.heap_allocations;
    return {top + kAllocHeaderSize, size, typenum};
  }

  void free(TxHandle& tx, const ObjHandle& handle) {
    const std::uint64_t at = header_offset(handle);
    const auto hdr = pool_->load_value<AllocHeader>(at);
    if (hdr.state != AllocHeader::kLive)
      throw Error(Errc::double_free, "object at " + std::to_string(handle.offset));
    if (hdr.prev != 0)
      tx.store_value(hdr.prev + AllocHeader::kNextField, hdr.next);
    else
      tx.store_value(table_ + kListHeadField, hdr.next);
    if (hdr.next != 0) tx.store_value(hdr.next + AllocHeader::kPrevField, hdr.prev);
    tx.store_value(at + AllocHeader::kStateField, AllocHeader::kFree);
    ++stats_.heap_frees;
  }

  std::optional<ObjHandle> iter_first(std::uint32_t typenum) const {
    return scan_from(pool_->load_value<std::uint64_t>(table_ + kListHeadField), typenum);
  }

  std::optional<ObjHandle> iter_next(const ObjHandle& handle) const {
    const std::uint64_t at = header_offset(handle);
    const auto hdr = pool_->load_value<AllocHeader>(at);
    if (hdr.state != AllocHeader::kLive || hdr.typenum != handle.typenum || hdr.size != handle.size)
      throw Error(Errc::stale_handle, "object at " + std::to_string(handle.offset));
    return scan_from(hdr.next, handle.typenum);
  }

  /// Header of a live object, validated against the heap bounds.
  std::optional<AllocHeader> live_header(std::uint64_t payload_offset) const {
    const PoolHeader& ph = pool_->header();
    if (payload_offset < ph.heap_offset + kAllocHeaderSize || payload_offset >= heap_top())
      return std::nullopt;
    const auto hdr = pool_->load_value<AllocHeader>(payload_offset - kAllocHeaderSize);
    if (hdr.state != AllocHeader::kLive || hdr.size > heap_top() - payload_offset) return std::nullopt;
    return hdr;
  }

 private:
  std::uint64_t header_offset(const ObjHandle& handle) const {
    const PoolHeader& ph = pool_->header();
    if (handle.offset < ph.heap_offset + kAllocHeaderSize || handle.offset >= pool_->size())
      throw Error(Errc::stale_handle, "offset " + std::to_string(handle.offset) + " outside heap");
    return handle.offset - kAllocHeaderSize;
  }

  std::optional<ObjHandle> scan_from(std::uint64_t at, std::uint32_t typenum) const {
    const std::uint64_t heap_begin = pool_->header().heap_offset;
    const std::uint64_t top = heap_top();
    while (at != 0) {
      if (at < heap_begin || at + kAllocHeaderSize > top)
        throw Error(Errc::corrupt_pool, "allocation list leaves the heap at " + std::to_string(at));
      const auto hdr = pool_->load_value<AllocHeader>(at);
      if (hdr.state != AllocHeader::kLive)
        throw Error(Errc::corrupt_pool, "free object on the allocation list");
      if (hdr.typenum == typenum) return ObjHandle{at + kAllocHeaderSize, hdr.size, typenum};
      at = hdr.next;
    }
    return std::nullopt;
  }

  Pool* pool_;
  std::uint64_t table_;
  AllocStats stats_;
};

struct SlabConfig {
  std::uint64_t slab_size = 1ull << 20;
  std::uint64_t min_chunk = 64;
  double growth = 1.25;
  // Size of the largest item; it gets a class of its own, one per slab.
  std::uint64_t max_item = 0;
  // Overrides the geometric series when non-empty.
  std::vector<std::uint64_t> chunk_sizes;

  std::vector<std::uint64_t> classes() const {
    if (!chunk_sizes.empty()) return chunk_sizes;
    std::vector<std::uint64_t> out;
    for (double c = static_cast<double>(min_chunk); c <= static_cast<double>(slab_size) / 2; c *= growth) {
      const std::uint64_t size = align_up(static_cast<std::uint64_t>(c), 8);
      if (out.empty() || size > out.back()) out.push_back(size);
    }
    if (max_item > (out.empty() ? 0 : out.back())) out.push_back(align_up(max_item, 8));
    return out;
  }
};

inline constexpr std::uint32_t kSlabTypenum = 0x51AB;

/// Per-slab durable header, followed by the chunk bitmap and the chunks.
///   +0 class_id u32 | +4 used_chunks u32 | +8 next_slab u64
///   +16 chunk_size u32 | +20 items u32 | +24 bitmap words
class SlabAllocator {
 public:
  SlabAllocator(ObjectAllocator& objects, TxManager& txm, SlabConfig config = {})
      : objects_(&objects), pool_(&objects.pool()), txm_(&txm), table_(pool_->header().alloc_table_offset) {
    const auto sizes = config.classes();
    if (sizes.empty() || sizes.size() > kMaxSlabClasses)
      throw Error(Errc::invalid_argument, "slab class count");
    for (std::uint64_t chunk : sizes) {
      const std::uint64_t items = std::max<std::uint64_t>(1, config.slab_size / chunk);
      classes_.push_back(Class{chunk, items, {}, {}});
    }
    const auto stored = pool_->load_value<std::uint64_t>(table_ + kSlabClassCountField);
    if (stored == 0) {
      TxScope tx(txm);
      for (std::size_t i = 0; i < classes_.size(); ++i) tx->store_value(class_entry(i), classes_[i].chunk_size);
      tx->store_value(table_ + kSlabClassCountField, std::uint64_t{classes_.size()});
      tx.commit();
    } else {
      if (stored != classes_.size()) throw Error(Errc::corrupt_pool, "slab class count differs");
      for (std::size_t i = 0; i < classes_.size(); ++i)
        if (pool_->load_value<std::uint64_t>(class_entry(i)) != classes_[i].chunk_size)
          throw Error(Errc::corrupt_pool, "slab class " + std::to_string(i) + " chunk size differs");
    }
    reload();
    txm.on_abort([this] { reload(); });
  }

  std::size_t class_count() const noexcept { return classes_.size(); }
  std::uint64_t chunk_size(std::uint8_t class_id) const { return classes_.at(class_id).chunk_size; }
  std::uint64_t items_per_slab(std::uint8_t class_id) const { return classes_.at(class_id).items; }
  std::size_t slab_count(std::uint8_t class_id) const { return classes_.at(class_id).slabs.size(); }

  /// Smallest class whose chunks hold `bytes`.
  std::optional<std::uint8_t> class_for(std::uint64_t bytes) const {
    for (std::size_t i = 0; i < classes_.size(); ++i)
      if (classes_[i].chunk_size >= bytes) return static_cast<std::uint8_t>(i);
    return std::nullopt;
  }

  ObjHandle alloc(TxHandle& tx, std::uint8_t class_id) {
    if (class_id >= classes_.size()) throw Error(Errc::invalid_argument, "no such slab class");
    Class& cls = classes_[class_id];
    expire_quarantine();
    for (std::size_t i = cls.nonfull.size(); i-- > 0;) {
      Slab& slab = cls.slabs[cls.nonfull[i]];
      if (slab.used >= cls.items) {
        cls.nonfull.erase(cls.nonfull.begin() + static_cast<std::ptrdiff_t>(i));
        continue;
      }
      if (auto h = take_chunk(tx, cls, slab, class_id)) return *h;
    }
    grow(tx, class_id);
    return *take_chunk(tx, cls, cls.slabs[cls.nonfull.back()], class_id);
  }

  void free(TxHandle& tx, const ObjHandle& chunk) {
    auto [cls, slab] = locate(chunk.offset);
    const std::uint64_t index = (chunk.offset - slab->chunks_begin) / cls->chunk_size;
    const std::uint64_t word_off = slab->offset + 24 + (index / 64) * 8;
    const auto word = pool_->load_value<std::uint64_t>(word_off);
    const std::uint64_t bit = 1ull << (index % 64);
    if (!(word & bit)) throw Error(Errc::double_free, "chunk at " + std::to_string(chunk.offset));
    tx.store_value(word_off, word & ~bit);
    // New items are written without an undo image, so a chunk freed by this
    // transaction must not be handed out again until it commits.
    expire_quarantine();
    quarantine_[word_off] |= bit;
    tx.store_value(slab->offset + 4, static_cast<std::uint32_t>(slab->used - 1));
    if (slab->used == cls->items) cls->nonfull.push_back(static_cast<std::size_t>(slab - cls->slabs.data()));
    --slab->used;
    slab->hint_word = std::min(slab->hint_word, index / 64);
  }

  /// Visits every live chunk of every class by walking the durable slab
  /// lists, checking each header against its bitmap.
  std::uint64_t walk(const std::function<void(const ObjHandle&)>& visit) const {
    std::uint64_t count = 0;
    const std::uint64_t heap_begin = pool_->header().heap_offset;
    const std::uint64_t top = objects_->heap_top();
    for (std::size_t c = 0; c < classes_.size(); ++c) {
      const Class& cls = classes_[c];
      const std::uint64_t words = (cls.items + 63) / 64;
      std::uint64_t at = pool_->load_value<std::uint64_t>(class_entry(c) + 8);
      while (at != 0) {
        if (at < heap_begin || at >= top) throw Error(Errc::corrupt_bitmap, "slab pointer outside heap");
        const auto class_id = pool_->load_value<std::uint32_t>(at);
        const auto used = pool_->load_value<std::uint32_t>(at + 4);
        const auto chunk = pool_->load_value<std::uint32_t>(at + 16);
        const auto items = pool_->load_value<std::uint32_t>(at + 20);
        if (class_id != c || chunk != cls.chunk_size || items != cls.items)
          throw Error(Errc::corrupt_bitmap, "slab header does not match class " + std::to_string(c));
        const std::uint64_t chunks_begin = at + header_bytes(cls.items);
        auto bitmap = pool_->view(at + 24, words * 8);
        std::uint64_t live = 0;
        for (std::uint64_t w = 0; w < words; ++w) {
          std::uint64_t word;
          std::memcpy(&word, bitmap.data() + w * 8, 8);
          live += static_cast<std::uint64_t>(std::popcount(word));
          while (word) {
            const std::uint64_t index = w * 64 + static_cast<std::uint64_t>(std::countr_zero(word));
            word &= word - 1;
            if (index >= cls.items) throw Error(Errc::corrupt_bitmap, "bit beyond last chunk");
            visit(ObjHandle{chunks_begin + index * cls.chunk_size, cls.chunk_size, static_cast<std::uint32_t>(c)});
          }
        }
        if (live != used) throw Error(Errc::corrupt_bitmap, "popcount differs from used_chunks");
        count += live;
        at = pool_->load_value<std::uint64_t>(at + 8);
      }
    }
    return count;
  }

  /// Rebuilds the volatile per-class slab lists from the pool.
  void reload() {
    by_chunks_.clear();
    for (std::size_t c = 0; c < classes_.size(); ++c) {
      Class& cls = classes_[c];
      cls.slabs.clear();
      cls.nonfull.clear();
      std::uint64_t at = pool_->load_value<std::uint64_t>(class_entry(c) + 8);
      while (at != 0) {
        Slab slab{at, at + header_bytes(cls.items), pool_->load_value<std::uint32_t>(at + 4), 0};
        cls.slabs.push_back(slab);
        at = pool_->load_value<std::uint64_t>(at + 8);
      }
      std::reverse(cls.slabs.begin(), cls.slabs.end());  // oldest first
      for (std::size_t i = cls.slabs.size(); i-- > 0;) {
        if (cls.slabs[i].used < cls.items) cls.nonfull.push_back(i);
        by_chunks_[cls.slabs[i].chunks_begin] = {c, i};
      }
    }
  }

 private:
  struct Slab {
    std::uint64_t offset;        // header (allocation payload)
    std::uint64_t chunks_begin;
    std::uint64_t used;
    std::uint64_t hint_word;
  };
  struct Class {
    std::uint64_t chunk_size;
    std::uint64_t items;
    std::vector<Slab> slabs;
    std::vector<std::size_t> nonfull;
  };

  static std::uint64_t header_bytes(std::uint64_t items) { return align_up(24 + (items + 63) / 64 * 8, 64); }
  std::uint64_t class_entry(std::size_t c) const { return table_ + kSlabClassTable + 16 * c; }

  void grow(TxHandle& tx, std::uint8_t class_id) {
    Class& cls = classes_[class_id];
    const std::uint64_t hdr_bytes = header_bytes(cls.items);
    ObjHandle h = objects_->alloc(tx, hdr_bytes + cls.items * cls.chunk_size, kSlabTypenum);
    const std::uint64_t first = pool_->load_value<std::uint64_t>(class_entry(class_id) + 8);
    // Bump space may hold bytes from a rolled-back transaction: write the
    // whole header, bitmap included.
    std::vector<std::uint8_t> header(hdr_bytes, 0);
    const std::uint32_t head_words[2] = {class_id, 0};
    std::memcpy(header.data(), head_words, 8);
    std::memcpy(header.data() + 8, &first, 8);
    const std::uint32_t geometry[2] = {static_cast<std::uint32_t>(cls.chunk_size),
                                       static_cast<std::uint32_t>(cls.items)};
    std::memcpy(header.data() + 16, geometry, 8);
    tx.store(h.offset, header);
    tx.store_value(class_entry(class_id) + 8, h.offset);
    cls.slabs.push_back(Slab{h.offset, h.offset + hdr_bytes, 0, 0});
    cls.nonfull.push_back(cls.slabs.size() - 1);
    by_chunks_[h.offset + hdr_bytes] = {class_id, cls.slabs.size() - 1};
  }

  std::optional<ObjHandle> take_chunk(TxHandle& tx, Class& cls, Slab& slab, std::uint8_t class_id) {
    const std::uint64_t words = (cls.items + 63) / 64;
    std::optional<std::uint64_t> first_clear;
    for (std::uint64_t w = slab.hint_word; w < words; ++w) {
      const std::uint64_t word_off = slab.offset + 24 + w * 8;
      const auto word = pool_->load_value<std::uint64_t>(word_off);
      const std::uint64_t valid = (w == words - 1 && cls.items % 64) ? ((1ull << (cls.items % 64)) - 1) : ~0ull;
      std::uint64_t free_bits = ~word & valid;
      if (free_bits && !first_clear) first_clear = w;
      if (free_bits && !quarantine_.empty()) {
        const auto q = quarantine_.find(word_off);
        if (q != quarantine_.end()) free_bits &= ~q->second;
      }
      if (!free_bits) continue;
      const std::uint64_t bit_index = static_cast<std::uint64_t>(std::countr_zero(free_bits));
      tx.store_value(word_off, word | (1ull << bit_index));
      tx.store_value(slab.offset + 4, static_cast<std::uint32_t>(slab.used + 1));
      ++slab.used;
      slab.hint_word = *first_clear;
      const std::uint64_t index = w * 64 + bit_index;
      return ObjHandle{slab.chunks_begin + index * cls.chunk_size, cls.chunk_size, class_id};
    }
    // Every clear bit may be quarantined; anything else means a bad bitmap.
    if (quarantine_.empty()) throw Error(Errc::corrupt_bitmap, "slab reports free chunks but bitmap is full");
    return std::nullopt;
  }

  void expire_quarantine() {
    const std::uint64_t epoch = txm_->commits() + txm_->aborts();
    if (epoch != quarantine_epoch_) {
      quarantine_.clear();
      quarantine_epoch_ = epoch;
    }
  }

  std::pair<Class*, Slab*> locate(std::uint64_t chunk_offset) {
    auto it = by_chunks_.upper_bound(chunk_offset);
    if (it != by_chunks_.begin()) {
      --it;
      Class& cls = classes_[it->second.first];
      Slab& slab = cls.slabs[it->second.second];
      const std::uint64_t rel = chunk_offset - slab.chunks_begin;
      if (rel < cls.items * cls.chunk_size && rel % cls.chunk_size == 0) return {&cls, &slab};
    }
    throw Error(Errc::stale_handle, "no slab chunk at " + std::to_string(chunk_offset));
  }

  ObjectAllocator* objects_;
  Pool* pool_;
  TxManager* txm_;
  std::uint64_t table_;
  std::vector<Class> classes_;
  std::map<std::uint64_t, std::uint64_t> quarantine_;  // bitmap word offset -> bits freed this tx
  std::uint64_t quarantine_epoch_ = 0;
  std::map<std::uint64_t, std::pair<std::size_t, std::size_t>> by_chunks_;
};

}  // namespace pmkv
