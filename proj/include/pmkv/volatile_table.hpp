#pragma once

#include <sys/mman.h>

#include <cstdint>
#include <memory>
#include <new>
#include <optional>
#include <utility>
#include <vector>

namespace pmkv {

/// Large blocks come from their own huge-page-advised mapping, the same
/// treatment the pool images get. Otherwise a growing node array faults in
/// a fresh 4 KiB page every few dozen inserts.
template <class T>
struct HugePageAllocator {
  using value_type = T;
  static constexpr std::size_t kThreshold = 2u << 20;

  HugePageAllocator() = default;
  template <class U>
  HugePageAllocator(const HugePageAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    if (bytes < kThreshold) return std::allocator<T>{}.allocate(n);
    void* p = ::mmap(nullptr, bytes, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED) throw std::bad_alloc();
    ::madvise(p, bytes, MADV_HUGEPAGE);
    return static_cast<T*>(p);
  }

  void deallocate(T* p, std::size_t n) noexcept {
    const std::size_t bytes = n * sizeof(T);
    if (bytes < kThreshold)
      std::allocator<T>{}.deallocate(p, n);
    else
      ::munmap(p, bytes);
  }

  template <class U>
  bool operator==(const HugePageAllocator<U>&) const noexcept {
    return true;
  }
};

/// DRAM hash index with power-of-two chained buckets. Grows by a full
/// stop-the-world rehash when an insert finds size() >= bucket_count().
/// Nodes cache their hash so a rehash never touches key bytes.
template <class Payload>
class ChainedHashTable {
 public:
  explicit ChainedHashTable(std::size_t initial_buckets = 16) : buckets_(initial_buckets, kNil) {
    ++allocations_;
  }

  std::size_t size() const noexcept { return size_; }
  std::size_t bucket_count() const noexcept { return buckets_.size(); }
  // Number of times the table grabbed memory (bucket arrays, node storage).
  std::uint64_t allocations() const noexcept { return allocations_; }

  template <class Eq>
  Payload* find(std::uint64_t hash, Eq&& eq) {
    for (std::uint32_t i = buckets_[hash & mask()]; i != kNil; i = nodes_[i].next)
      if (nodes_[i].hash == hash && eq(nodes_[i].payload)) return &nodes_[i].payload;
    return nullptr;
  }

  template <class Eq>
  const Payload* find(std::uint64_t hash, Eq&& eq) const {
    return const_cast<ChainedHashTable*>(this)->find(hash, std::forward<Eq>(eq));
  }

  void prefetch(std::uint64_t hash) const { __builtin_prefetch(&buckets_[hash & mask()], 1); }

  /// Inserts without checking for duplicates. Returns true if this insert
  /// triggered a resize.
  bool insert(std::uint64_t hash, Payload payload) {
    bool resized = false;
    if (size_ >= buckets_.size()) {
      rehash(buckets_.size() * 2);
      resized = true;
    }
    std::uint32_t index;
    if (!free_.empty()) {
      index = free_.back();
      free_.pop_back();
      nodes_[index] = Node{hash, kNil, std::move(payload)};
    } else {
      if (nodes_.size() == nodes_.capacity()) ++allocations_;
      index = static_cast<std::uint32_t>(nodes_.size());
      nodes_.push_back(Node{hash, kNil, std::move(payload)});
    }
    std::uint32_t& head = buckets_[hash & mask()];
    nodes_[index].next = head;
    head = index;
    ++size_;
    return resized;
  }

  template <class Eq>
  std::optional<Payload> erase(std::uint64_t hash, Eq&& eq) {
    std::uint32_t* link = &buckets_[hash & mask()];
    while (*link != kNil) {
      Node& n = nodes_[*link];
      if (n.hash == hash && eq(n.payload)) {
        const std::uint32_t index = *link;
        *link = n.next;
        std::optional<Payload> out(std::move(n.payload));
        n.payload = Payload{};
        free_.push_back(index);
        --size_;
        return out;
      }
      link = &n.next;
    }
    return std::nullopt;
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    for (std::uint32_t head : buckets_)
      for (std::uint32_t i = head; i != kNil; i = nodes_[i].next) fn(nodes_[i].payload);
  }

  /// Empties the table and sizes it for `expected` inserts up front. The
  /// bucket count is the one incremental growth would have reached.
  void reset_for(std::size_t expected, std::size_t initial_buckets = 16) {
    std::size_t n = initial_buckets;
    while (n < expected) n *= 2;
    clear(n);
    nodes_.reserve(expected);
    if (expected) ++allocations_;
  }

  void clear(std::size_t initial_buckets = 16) {
    buckets_.assign(initial_buckets, kNil);
    nodes_.clear();
    free_.clear();
    size_ = 0;
    allocations_ = 1;
  }

 private:
  static constexpr std::uint32_t kNil = 0xffffffffu;

  struct Node {
    std::uint64_t hash;
    std::uint32_t next;
    Payload payload;
  };

  std::uint64_t mask() const noexcept { return buckets_.size() - 1; }

  void rehash(std::size_t new_count) {
    Vec<std::uint32_t> fresh(new_count, kNil);
    ++allocations_;
    const std::uint64_t m = new_count - 1;
    for (std::uint32_t head : buckets_) {
      for (std::uint32_t i = head; i != kNil;) {
        const std::uint32_t next = nodes_[i].next;
        std::uint32_t& slot = fresh[nodes_[i].hash & m];
        nodes_[i].next = slot;
        slot = i;
        i = next;
      }
    }
    buckets_.swap(fresh);
  }

  template <class T>
  using Vec = std::vector<T, HugePageAllocator<T>>;

  Vec<std::uint32_t> buckets_;
  Vec<Node> nodes_;
  std::vector<std::uint32_t> free_;
  std::size_t size_ = 0;
  std::uint64_t allocations_ = 0;
};

/// Same contract as ChainedHashTable, but every entry is its own heap node,
/// the way a general-purpose dictionary allocates one entry per key.
template <class Payload>
class NodeHashTable {
 public:
  explicit NodeHashTable(std::size_t initial_buckets = 16) : buckets_(initial_buckets, nullptr) { ++allocations_; }
  NodeHashTable(const NodeHashTable&) = delete;
  NodeHashTable& operator=(const NodeHashTable&) = delete;
  ~NodeHashTable() { release(); }

  std::size_t size() const noexcept { return size_; }
  std::size_t bucket_count() const noexcept { return buckets_.size(); }
  std::uint64_t allocations() const noexcept { return allocations_; }

  template <class Eq>
  Payload* find(std::uint64_t hash, Eq&& eq) {
    for (Node* n = buckets_[hash & mask()]; n; n = n->next)
      if (n->hash == hash && eq(n->payload)) return &n->payload;
    return nullptr;
  }

  template <class Eq>
  const Payload* find(std::uint64_t hash, Eq&& eq) const {
    return const_cast<NodeHashTable*>(this)->find(hash, std::forward<Eq>(eq));
  }

  void prefetch(std::uint64_t hash) const { __builtin_prefetch(&buckets_[hash & mask()], 1); }

  bool insert(std::uint64_t hash, Payload payload) {
    bool resized = false;
    if (size_ >= buckets_.size()) {
      rehash(buckets_.size() * 2);
      resized = true;
    }
    Node*& head = buckets_[hash & mask()];
    head = new Node{hash, head, std::move(payload)};
    ++allocations_;
    ++size_;
    return resized;
  }

  template <class Eq>
  std::optional<Payload> erase(std::uint64_t hash, Eq&& eq) {
    for (Node** link = &buckets_[hash & mask()]; *link; link = &(*link)->next) {
      Node* n = *link;
      if (n->hash == hash && eq(n->payload)) {
        *link = n->next;
        std::optional<Payload> out(std::move(n->payload));
        delete n;
        --size_;
        return out;
      }
    }
    return std::nullopt;
  }

  template <class Fn>
  void for_each(Fn&& fn) const {
    for (const Node* head : buckets_)
      for (const Node* n = head; n; n = n->next) fn(n->payload);
  }

  void clear(std::size_t initial_buckets = 16) {
    release();
    buckets_.assign(initial_buckets, nullptr);
    size_ = 0;
    allocations_ = 1;
  }

 private:
  struct Node {
    std::uint64_t hash;
    Node* next;
    Payload payload;
  };

  std::uint64_t mask() const noexcept { return buckets_.size() - 1; }

  void release() {
    for (Node* head : buckets_) {
      while (head) {
        Node* next = head->next;
        delete head;
        head = next;
      }
    }
  }

  void rehash(std::size_t new_count) {
    std::vector<Node*> fresh(new_count, nullptr);
    ++allocations_;
    const std::uint64_t m = new_count - 1;
    for (Node* head : buckets_) {
      while (head) {
        Node* next = head->next;
        Node*& slot = fresh[head->hash & m];
        head->next = slot;
        slot = head;
        head = next;
      }
    }
    buckets_.swap(fresh);
  }

  std::vector<Node*> buckets_;
  std::size_t size_ = 0;
  std::uint64_t allocations_ = 0;
};

}  // namespace pmkv
