#include <pmkv/fixup.hpp>
#include <pmkv/hash.hpp>
#include <pmkv/store.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <new>
#include <random>
#include <set>
#include <string>

using namespace pmkv;

// Counts heap allocations while armed.
namespace {
std::atomic<bool> g_counting{false};
std::atomic<std::uint64_t> g_allocations{0};
}  // namespace

void* operator new(std::size_t n) {
  if (g_counting.load(std::memory_order_relaxed)) g_allocations.fetch_add(1, std::memory_order_relaxed);
  if (void* p = std::malloc(n ? n : 1)) return p;
  throw std::bad_alloc();
}
void* operator new[](std::size_t n) { return operator new(n); }
void operator delete(void* p) noexcept { std::free(p); }
void operator delete[](void* p) noexcept { std::free(p); }
void operator delete(void* p, std::size_t) noexcept { std::free(p); }
void operator delete[](void* p, std::size_t) noexcept { std::free(p); }

TEST(Hash, DeterministicPerSeed) {
  EXPECT_EQ(hash64("alpha", 1), hash64("alpha", 1));
  EXPECT_NE(hash64("alpha", 1), hash64("alpha", 2));
  EXPECT_NE(hash64("alpha", 1), hash64("alphb", 1));
  EXPECT_NE(hash64("", 1), hash64(std::string(1, '\0'), 1));
  EXPECT_NE(hash64("abcdefgh", 9), hash64(std::string("abcdefgh\0", 9), 9));
}

// Chi-square over 1024 buckets for sequential keys: with 1023 degrees of
// freedom the statistic stays below ~1200 at p = 0.0001.
TEST(Hash, BucketsAreBalanced) {
  constexpr int kBuckets = 1024;
  constexpr int kKeys = 200000;
  std::vector<int> counts(kBuckets, 0);
  for (int i = 0; i < kKeys; ++i) ++counts[hash64("key" + std::to_string(i), 42) & (kBuckets - 1)];
  const double expected = static_cast<double>(kKeys) / kBuckets;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 1200.0);
}

// 10^5 random keys over 2^16 buckets is Poisson with mean ~1.53. The
// expected number of buckets holding 11 or more keys is about 0.04.
TEST(Hash, LongestChainMatchesPoisson) {
  constexpr std::uint64_t kBuckets = 1u << 16;
  std::vector<int> counts(kBuckets, 0);
  std::mt19937_64 rng(99);
  for (int i = 0; i < 100000; ++i) {
    std::string key(8 + rng() % 9, '\0');
    for (char& c : key) c = static_cast<char>(rng());
    ++counts[hash64(key, 1234) & (kBuckets - 1)];
  }
  EXPECT_LE(*std::max_element(counts.begin(), counts.end()), 10);
  const auto empty = std::count(counts.begin(), counts.end(), 0);
  // e^-1.526 of the buckets should stay empty: 14238 +- 3 sigma.
  EXPECT_NEAR(static_cast<double>(empty), 65536 * std::exp(-100000.0 / 65536), 330);
}

TEST(Hash, SeedsChangePlacement) {
  int same = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::string key = "user" + std::to_string(i);
    same += (hash64(key, 1) & 0xffff) == (hash64(key, 2) & 0xffff);
  }
  EXPECT_LE(same, 100);
}

TEST(Hash, AvalancheOnSingleBitFlips) {
  std::mt19937_64 rng(3);
  double total = 0;
  int n = 0;
  for (int i = 0; i < 2000; ++i) {
    std::string key(12, '\0');
    for (char& c : key) c = static_cast<char>(rng());
    const std::uint64_t h0 = hash64(key, 7);
    const int bit = static_cast<int>(rng() % (key.size() * 8));
    key[bit / 8] = static_cast<char>(key[bit / 8] ^ (1 << (bit % 8)));
    total += std::popcount(h0 ^ hash64(key, 7));
    ++n;
  }
  EXPECT_NEAR(total / n, 32.0, 1.0);
}

TEST(Fixup, ExampleTranslation) {
  EXPECT_EQ(fixup_address(0x1800, 0x1000, 0x9000, 1 << 20), 0x9800u);
  EXPECT_EQ(fixup_address(0x1800, 0x1000, 0x1000, 1 << 20), 0x1800u);
  try {
    fixup_address(0x1000 + 4096, 0x1000, 0x9000, 4096);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::address_out_of_pool);
  }
  EXPECT_THROW(fixup_address(0xfff, 0x1000, 0x9000, 4096), Error);
}

TEST(Fixup, RandomTriplesAreExactAndInvertible) {
  std::mt19937_64 rng(8);
  constexpr std::uint64_t kSize = 256ull << 20;
  for (int i = 0; i < 100000; ++i) {
    const std::uint64_t old_base = ((rng() & ((1ull << 35) - 1)) + 1) << 12;
    const std::uint64_t new_base = ((rng() & ((1ull << 35) - 1)) + 1) << 12;
    const std::uint64_t off = rng() % kSize;
    const std::uint64_t moved = fixup_address(old_base + off, old_base, new_base, kSize);
    ASSERT_EQ(moved - new_base, off);
    ASSERT_EQ(fixup_address(moved, new_base, old_base, kSize), old_base + off);
    ASSERT_TRUE(address_in_pool(moved, new_base, kSize));
  }
}

namespace {

StoreConfig fp_config(AllocStrategy alloc, std::uint64_t base, std::vector<std::string>* phases = nullptr) {
  StoreConfig c;
  c.mode = Mode::fully_persistent;
  c.alloc = alloc;
  c.pool_size = 64ull << 20;
  c.hash_seed = 5;
  c.pool_options.forced_base = base;
  c.phase_hook = [phases](std::string_view name, bool begin) {
    if (name != "fixup_pass") return;
    // Stop counting before the hook itself allocates.
    g_counting.store(false, std::memory_order_relaxed);
    if (phases) phases->push_back(std::string(name) + (begin ? "+" : "-"));
    g_counting.store(begin, std::memory_order_relaxed);
  };
  return c;
}

}  // namespace

class FixupReopen : public ::testing::TestWithParam<AllocStrategy> {};

TEST_P(FixupReopen, DifferentBaseRecoversAllKeysWithoutAllocating) {
  constexpr int kKeys = 20000;
  std::vector<std::string> phases;
  StoreConfig cfg = fp_config(GetParam(), 0x100000000ull, &phases);
  DurableSnapshot image;
  {
    Store store = Store::open(cfg);
    for (int i = 0; i < kKeys; ++i) store.set("k" + std::to_string(i), "v" + std::to_string(i * 3));
    store.commit_batch();
    image = store.crash();
  }
  cfg.pool_options.forced_base = 0x7e0000000000ull;
  g_allocations = 0;
  Store store = Store::open(Pool::from_snapshot(image, cfg.pool_options), cfg);
  EXPECT_EQ(g_allocations.load(), 0u);
  EXPECT_EQ(phases, (std::vector<std::string>{"fixup_pass+", "fixup_pass-"}));
  EXPECT_EQ(store.recovery_report().keys_recovered, static_cast<std::uint64_t>(kKeys));
  EXPECT_EQ(store.pool().base_address(), 0x7e0000000000ull);
  for (int i = 0; i < kKeys; ++i) ASSERT_EQ(store.get("k" + std::to_string(i)), "v" + std::to_string(i * 3));
  // Every stored pointer now names the new base.
  EXPECT_EQ(store.pool().load_value<std::uint64_t>(store.pool().header().root_offset + root::kOldBaseAddress),
            0x7e0000000000ull);
}

// A power loss part way through a fixup pass leaves some pointers under the
// old base and some under the new one. The next open, at yet another base
// or back at either earlier one, must still see every pair.
TEST_P(FixupReopen, InterruptedFixupResumesAtAnyEvent) {
  constexpr std::uint64_t kOld = 0x200000000ull, kMid = 0x300000000ull, kNew = 0x500000000ull;
  StoreConfig cfg = fp_config(GetParam(), kOld);
  cfg.pool_size = 4ull << 20;
  std::map<std::string, std::string> oracle;
  DurableSnapshot image;
  {
    Store store = Store::open(cfg);
    for (int i = 0; i < 400; ++i) {
      const std::string k = "key" + std::to_string(i), v(1 + i % 40, static_cast<char>('a' + i % 26));
      store.set(k, v);
      oracle[k] = v;
    }
    image = store.crash();
  }
  cfg.pool_options.forced_base = kMid;
  std::uint64_t span = 0;
  {
    Store s = Store::open(Pool::from_snapshot(image, cfg.pool_options), cfg);
    span = s.pool().event_counter();
  }
  ASSERT_GT(span, 4u);
  int checked = 0;
  for (std::uint64_t e = 0; e < span; ++e) {
    for (auto policy : {CrashPolicy::drop_all_pending(), CrashPolicy::adversarial(e)}) {
      PoolOptions first = cfg.pool_options;
      first.crash_policy = policy;
      Pool p = Pool::from_snapshot(image, first);
      p.crash_at_event(e);
      DurableSnapshot mid;
      EXPECT_THROW(Store::open(std::move(p), cfg, &mid), CrashInjected);
      for (std::uint64_t next : {kNew, kOld, kMid}) {
        StoreConfig again = cfg;
        again.pool_options.forced_base = next;
        again.pool_options.crash_policy = CrashPolicy::drop_all_pending();
        Store s = Store::open(Pool::from_snapshot(mid, again.pool_options), again);
        std::map<std::string, std::string> got;
        s.for_each([&](std::string_view k, std::string_view v) { got.emplace(k, v); });
        ASSERT_EQ(got, oracle) << "crash event " << e << ", reopen at " << std::hex << next;
        ++checked;
      }
    }
  }
  EXPECT_EQ(checked, static_cast<int>(span) * 6);
}

TEST_P(FixupReopen, SameBaseIsIdentity) {
  StoreConfig cfg = fp_config(GetParam(), 0x40000000ull);
  cfg.pool_size = 8ull << 20;
  DurableSnapshot image;
  {
    Store store = Store::open(cfg);
    for (int i = 0; i < 1000; ++i) store.set("k" + std::to_string(i), std::to_string(i));
    image = store.crash();
  }
  Store store = Store::open(Pool::from_snapshot(image, cfg.pool_options), cfg);
  EXPECT_EQ(store.pool().event_counter(), 0u);  // nothing rewritten
  EXPECT_EQ(store.size(), 1000u);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(store.get("k" + std::to_string(i)), std::to_string(i));
}

TEST_P(FixupReopen, StrayAddressIsCorruptPool) {
  StoreConfig cfg = fp_config(GetParam(), 0x40000000ull);
  cfg.pool_size = 8ull << 20;
  DurableSnapshot image;
  {
    Store store = Store::open(cfg);
    store.set("a", "b");
    image = store.crash();
  }
  // Point the bucket array somewhere outside the old mapping.
  Pool probe = Pool::from_snapshot(image);
  const std::uint64_t at = probe.header().root_offset + root::kHt0EntriesAddr;
  const std::uint64_t bogus = 0x10;
  std::memcpy(image.bytes.data() + at, &bogus, 8);
  cfg.pool_options.forced_base = 0x80000000ull;
  try {
    Store::open(Pool::from_snapshot(image, cfg.pool_options), cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::corrupt_pool);
  }
}

INSTANTIATE_TEST_SUITE_P(Strategies, FixupReopen, ::testing::Values(AllocStrategy::per_object, AllocStrategy::slab));
