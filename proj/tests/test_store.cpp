#include "oracles.hpp"

#include <pmkv/bench/experiments.hpp>
#include <pmkv/store.hpp>
#include <pmkv/volatile_table.hpp>

#include <gtest/gtest.h>

#include <map>
#include <random>
#include <string>
#include <unistd.h>

using namespace pmkv;

namespace {

struct Cfg {
  Mode mode;
  AllocStrategy alloc;
};

std::string name_of(const Cfg& c) {
  std::string s(to_string(c.mode));
  if (c.mode != Mode::snapshot) s += "_" + std::string(to_string(c.alloc));
  for (char& ch : s)
    if (ch == '-') ch = '_';
  return s;
}

const Cfg kAll[] = {{Mode::fully_persistent, AllocStrategy::per_object},
                    {Mode::fully_persistent, AllocStrategy::slab},
                    {Mode::hybrid, AllocStrategy::per_object},
                    {Mode::hybrid, AllocStrategy::slab},
                    {Mode::snapshot, AllocStrategy::per_object}};

const Cfg kTransactional[] = {{Mode::fully_persistent, AllocStrategy::per_object},
                              {Mode::fully_persistent, AllocStrategy::slab},
                              {Mode::hybrid, AllocStrategy::per_object},
                              {Mode::hybrid, AllocStrategy::slab}};

StoreConfig config(const Cfg& c, std::uint64_t pool_size = 16ull << 20) {
  StoreConfig s;
  s.mode = c.mode;
  s.alloc = c.alloc;
  s.pool_size = pool_size;
  s.hash_seed = 77;
  return s;
}

std::filesystem::path temp_dir() {
  auto dir = std::filesystem::temp_directory_path() / ("pmkv_test_store_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir;
}

std::map<std::string, std::string> contents(const Store& s) {
  std::map<std::string, std::string> m;
  s.for_each([&](std::string_view k, std::string_view v) { m.emplace(k, v); });
  return m;
}

Store reopen(Store& s, StoreConfig cfg) {
  DurableSnapshot snap = s.crash();
  cfg.pool_options.forced_base.reset();
  return Store::open(Pool::from_snapshot(snap, cfg.pool_options), cfg);
}

}  // namespace

class AnyMode : public ::testing::TestWithParam<Cfg> {};

TEST_P(AnyMode, SetGetDel) {
  Store s = Store::open(config(GetParam()));
  EXPECT_EQ(s.size(), 0u);
  EXPECT_FALSE(s.get("missing").has_value());
  s.set("k", "v");
  EXPECT_EQ(s.get("k"), "v");
  s.set("k", "second");
  EXPECT_EQ(s.get("k"), "second");
  EXPECT_EQ(s.size(), 1u);
  s.set("empty", "");
  EXPECT_EQ(s.get("empty"), "");
  EXPECT_TRUE(s.del("k"));
  EXPECT_FALSE(s.get("k").has_value());
  EXPECT_FALSE(s.del("k"));
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.acked_ops(), 5u);
}

TEST_P(AnyMode, BinaryKeysAndValues) {
  Store s = Store::open(config(GetParam()));
  const std::string key("a\0b\xff", 4), value("\0\r\n\x01", 4);
  s.set(key, value);
  EXPECT_EQ(s.get(key), value);
  EXPECT_FALSE(s.get(std::string("a\0c\xff", 4)).has_value());
}

TEST_P(AnyMode, SizeLimits) {
  Store s = Store::open(config(GetParam(), 32ull << 20));
  auto code = [&](auto&& fn) {
    try {
      fn();
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::invalid_argument;
  };
  EXPECT_EQ(code([&] { s.set("", "v"); }), Errc::invalid_key);
  EXPECT_EQ(code([&] { s.set(std::string(kMaxKeySize + 1, 'k'), "v"); }), Errc::key_too_large);
  EXPECT_EQ(code([&] { s.set("k", std::string(kMaxValueSize + 1, 'v')); }), Errc::value_too_large);
  const std::string big_key(kMaxKeySize, 'k');
  const std::string big_value(kMaxValueSize, 'v');
  s.set(big_key, big_value);
  EXPECT_EQ(s.get(big_key), big_value);
  // A rejected operation leaves the store usable.
  s.set("after", "ok");
  EXPECT_EQ(s.get("after"), "ok");
}

TEST_P(AnyMode, ResizesAtPowersOfTwo) {
  Store s = Store::open(config(GetParam()));
  for (int i = 0; i < 16; ++i) s.set("key" + std::to_string(i), "v");
  EXPECT_TRUE(s.resize_key_counts().empty());
  s.set("key16", "v");
  ASSERT_EQ(s.resize_key_counts().size(), 1u);
  EXPECT_EQ(s.resize_key_counts()[0], 16u);
  std::map<std::string, std::string> oracle;
  for (int i = 0; i <= 16; ++i) oracle["key" + std::to_string(i)] = "v";
  for (int i = 0; i < 5000; ++i) {
    const std::string k = "key" + std::to_string(i);
    s.set(k, std::to_string(i));
    oracle[k] = std::to_string(i);
    if ((i & (i - 1)) == 0) {
      ASSERT_EQ(contents(s), oracle) << i;
    }
  }
  for (std::uint64_t n : s.resize_key_counts()) EXPECT_TRUE(n >= 16 && (n & (n - 1)) == 0) << n;
  EXPECT_EQ(s.resize_key_counts().back(), 4096u);
  EXPECT_EQ(contents(s), oracle);
}

// With crashes disabled every mode answers identically.
TEST(Store, ModesAreObservablyEquivalent) {
  std::vector<std::string> transcripts;
  for (const Cfg& c : kAll) {
    Store s = Store::open(config(c));
    std::mt19937_64 rng(17);
    std::string log;
    for (int i = 0; i < 20000; ++i) {
      const std::string k = "k" + std::to_string(rng() % 700);
      switch (rng() % 4) {
        case 0:
        case 1: s.set(k, std::string(rng() % 30, static_cast<char>('a' + rng() % 26))); break;
        case 2: log += s.del(k) ? '1' : '0'; break;
        case 3: log += s.get(k).value_or("<none>") + ";"; break;
      }
    }
    for (auto& [k, v] : contents(s)) log += k + "=" + v + ",";
    transcripts.push_back(log);
  }
  for (std::size_t i = 1; i < transcripts.size(); ++i) EXPECT_EQ(transcripts[i], transcripts[0]) << name_of(kAll[i]);
}

class Durable : public ::testing::TestWithParam<Cfg> {};

TEST_P(Durable, ReopenRecoversEveryKey) {
  const StoreConfig cfg = config(GetParam());
  std::map<std::string, std::string> oracle;
  Store s = Store::open(cfg);
  for (int i = 0; i < 1000; ++i) {
    oracle["key" + std::to_string(i)] = std::string(i % 50, 'x');
    s.set("key" + std::to_string(i), std::string(i % 50, 'x'));
  }
  for (int i = 0; i < 1000; i += 7) {
    s.del("key" + std::to_string(i));
    oracle.erase("key" + std::to_string(i));
  }
  Store again = reopen(s, cfg);
  EXPECT_FALSE(again.recovery_report().fresh);
  EXPECT_EQ(again.recovery_report().keys_recovered, oracle.size());
  EXPECT_EQ(contents(again), oracle);
  EXPECT_FALSE(again.get("key7").has_value());
  auto pairs = again.durable_pairs();
  const std::map<std::string, std::string> enumerated(pairs.begin(), pairs.end());
  EXPECT_EQ(enumerated, oracle);
  EXPECT_EQ(pairs.size(), oracle.size());
}

TEST_P(Durable, OverwriteLeavesOneRecord) {
  const StoreConfig cfg = config(GetParam());
  Store s = Store::open(cfg);
  s.set("k", "one");
  s.set("k", "two");
  s.set("k", "three");
  const auto pairs = s.durable_pairs();
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].second, "three");
  if (GetParam().alloc == AllocStrategy::per_object) {
    int keys = 0;
    for (auto h = s.objects()->iter_first(typenum::kKey); h; h = s.objects()->iter_next(*h)) ++keys;
    EXPECT_EQ(keys, 1);
  }
}

TEST_P(Durable, FileBackedPoolSurvivesCloseAndOpen) {
  StoreConfig cfg = config(GetParam());
  cfg.path = temp_dir() / (name_of(GetParam()) + ".pool");
  std::filesystem::remove(cfg.path);
  {
    Store s = Store::open(cfg);
    EXPECT_TRUE(s.recovery_report().fresh);
    for (int i = 0; i < 300; ++i) s.set("f" + std::to_string(i), std::to_string(i * i));
    s.close();
  }
  Store s = Store::open(cfg);
  EXPECT_EQ(s.size(), 300u);
  EXPECT_EQ(s.get("f17"), "289");
  s.close();
  std::filesystem::remove(cfg.path);
}

TEST_P(Durable, ModeMismatchIsRejected) {
  const StoreConfig cfg = config(GetParam());
  Store s = Store::open(cfg);
  s.set("a", "b");
  const DurableSnapshot snap = s.crash();
  for (const Cfg& other : kAll) {
    if (other.mode == GetParam().mode && other.alloc == GetParam().alloc) continue;
    try {
      Store::open(Pool::from_snapshot(snap), config(other));
      FAIL() << name_of(other);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::mode_mismatch);
    }
  }
}

TEST_P(Durable, HashSeedIsStableAcrossReopen) {
  StoreConfig cfg = config(GetParam());
  cfg.hash_seed.reset();
  Store s = Store::open(cfg);
  const std::uint64_t seed = s.hash_seed();
  s.set("a", "b");
  Store again = reopen(s, cfg);
  EXPECT_EQ(again.hash_seed(), seed);
}

// A crash at every event of the insert that triggers a resize leaves either
// the old table or the new one, never a mix.
TEST_P(Durable, CrashDuringResize) {
  const StoreConfig cfg = config(GetParam(), 4ull << 20);
  std::uint64_t start = 0, span = 0;
  {
    Store s = Store::open(cfg);
    for (int i = 0; i < 16; ++i) s.set("r" + std::to_string(i), "v");
    start = s.pool().event_counter();
    s.set("r16", "v");
    span = s.pool().event_counter() - start;
    ASSERT_EQ(s.resize_key_counts().size(), 1u);
  }
  for (std::uint64_t e = 0; e < span; ++e) {
    StoreConfig c = cfg;
    c.pool_options.crash_policy = CrashPolicy::adversarial(e);
    Store s = Store::open(c);
    for (int i = 0; i < 16; ++i) s.set("r" + std::to_string(i), "v");
    s.pool().crash_at_event(start + e);
    EXPECT_THROW(s.set("r16", "v"), CrashInjected);
    Store again = reopen(s, c);
    const auto got = contents(again);
    ASSERT_TRUE(got.size() == 16 || got.size() == 17) << e;
    for (int i = 0; i < 16; ++i) ASSERT_EQ(got.at("r" + std::to_string(i)), "v");
    again.set("post", "ok");
    EXPECT_EQ(again.get("post"), "ok");
  }
}

TEST_P(Durable, RejectedOpLeavesTheOpenBatchAlone) {
  StoreConfig cfg = config(GetParam());
  cfg.tx_batch = 4;
  Store s = Store::open(cfg);
  s.set("a", "x");
  s.set("b", "y");
  EXPECT_THROW(s.set("", "z"), Error);
  EXPECT_THROW(s.set("c", std::string(kMaxValueSize + 1, 'v')), Error);
  EXPECT_EQ(s.acked_ops(), 0u);
  s.commit_batch();
  EXPECT_EQ(s.acked_ops(), 2u);
  Store again = reopen(s, cfg);
  EXPECT_EQ(contents(again), (std::map<std::string, std::string>{{"a", "x"}, {"b", "y"}}));
}

TEST_P(Durable, CrashDropsTheWholeOpenBatch) {
  StoreConfig cfg = config(GetParam());
  cfg.tx_batch = 4;
  Store s = Store::open(cfg);
  for (const char* k : {"w", "x", "y", "z"}) s.set(k, "1");
  EXPECT_EQ(s.acked_ops(), 4u);
  s.set("a", "x");
  s.set("w", "2");
  EXPECT_TRUE(s.del("x"));
  EXPECT_EQ(s.get("w"), "2");
  Store again = reopen(s, cfg);
  EXPECT_EQ(contents(again),
            (std::map<std::string, std::string>{{"w", "1"}, {"x", "1"}, {"y", "1"}, {"z", "1"}}));
}

TEST_P(Durable, BatchedCrashLosesAtMostTheBatch) {
  bench::RunConfig rc;
  rc.mode = GetParam().mode;
  rc.alloc = GetParam().alloc;
  rc.tx_batch = 8;
  rc.seed = 4;
  const auto reports = bench::run_crashtest(rc, 800, 40);
  std::uint64_t max_lost = 0;
  for (const auto& r : reports) {
    EXPECT_FALSE(r.corrupt) << r.detail;
    max_lost = std::max(max_lost, r.lost);
    EXPECT_TRUE(bench::crash_trial_passed(rc, r));
  }
  EXPECT_LE(max_lost, 8u);
}

TEST_P(Durable, EnumerationMatchesCommittedState) {
  for (std::uint64_t seed : {1, 2}) {
    const auto res = oracle::enumeration_after_crash(GetParam().mode, GetParam().alloc, seed, 2000);
    EXPECT_EQ(res.enumerated, res.expected) << "seed " << seed;
    EXPECT_TRUE(res.index_agrees);
  }
}

INSTANTIATE_TEST_SUITE_P(Modes, AnyMode, ::testing::ValuesIn(kAll), [](const auto& i) { return name_of(i.param); });
INSTANTIATE_TEST_SUITE_P(Modes, Durable, ::testing::ValuesIn(kTransactional),
                         [](const auto& i) { return name_of(i.param); });

TEST(Hybrid, RecoveryPhasesAndCounts) {
  for (AllocStrategy alloc : {AllocStrategy::per_object, AllocStrategy::slab}) {
    StoreConfig cfg = config({Mode::hybrid, alloc}, 32ull << 20);
    std::vector<std::string> phases;
    cfg.phase_hook = [&](std::string_view n, bool b) { phases.push_back(std::string(n) + (b ? "+" : "-")); };
    std::map<std::string, std::string> oracle;
    Store s = Store::open(cfg);
    for (int i = 0; i < 10000; ++i) {
      oracle["h" + std::to_string(i)] = std::to_string(i);
      s.set("h" + std::to_string(i), std::to_string(i));
    }
    phases.clear();
    Store again = reopen(s, cfg);
    EXPECT_EQ(phases, (std::vector<std::string>{"iteration+", "iteration-", "reinsertion+", "reinsertion-"}));
    EXPECT_EQ(again.recovery_report().phase1_visits, 10000u);
    EXPECT_EQ(again.recovery_report().keys_recovered, 10000u);
    EXPECT_GT(again.recovery_report().volatile_allocations, 0u);
    EXPECT_EQ(contents(again), oracle);
  }
}

TEST(Hybrid, CrashDuringRecoveryThenRecoverAgain) {
  for (AllocStrategy alloc : {AllocStrategy::per_object, AllocStrategy::slab}) {
    StoreConfig cfg = config({Mode::hybrid, alloc});
    Store s = Store::open(cfg);
    for (int i = 0; i < 500; ++i) s.set("c" + std::to_string(i), std::to_string(i));
    const auto oracle = contents(s);
    const DurableSnapshot image = s.crash();
    // Recovery writes only the base word; crash at that event and after.
    for (std::uint64_t e = 0; e < 3; ++e) {
      Pool p = Pool::from_snapshot(image);
      p.crash_at_event(e);
      DurableSnapshot mid;
      try {
        Store first = Store::open(std::move(p), cfg, &mid);
        mid = first.crash();
      } catch (const CrashInjected&) {
      }
      Store second = Store::open(Pool::from_snapshot(mid), cfg);
      EXPECT_EQ(contents(second), oracle);
    }
  }
}

TEST(Hybrid, DanglingValueOffsetIsCorruptPool) {
  StoreConfig cfg = config({Mode::hybrid, AllocStrategy::per_object});
  Store s = Store::open(cfg);
  s.set("a", "b");
  const auto key = s.objects()->iter_first(typenum::kKey);
  ASSERT_TRUE(key.has_value());
  s.pool().store_value<std::uint64_t>(key->offset + 8, key->offset);  // points at a KEY record
  s.pool().flush(key->offset + 8, 8);
  s.pool().fence();
  try {
    reopen(s, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::corrupt_pool);
  }
}

TEST(Snapshot, CrashBeforeFirstSnapshotLosesEverything) {
  StoreConfig cfg = config({Mode::snapshot, AllocStrategy::per_object});
  cfg.snapshot_policy.period_seconds = 3.0;
  Store s = Store::open(cfg);
  for (int i = 0; i < 1000; ++i) {
    s.set("s" + std::to_string(i), "v");
    EXPECT_FALSE(s.snapshot_tick(i * 0.001));
  }
  Store again = reopen(s, cfg);
  EXPECT_EQ(again.size(), 0u);
}

TEST(Snapshot, LossEqualsWritesSinceLastSnapshot) {
  StoreConfig cfg = config({Mode::snapshot, AllocStrategy::per_object});
  cfg.snapshot_policy.period_seconds = 0;
  cfg.snapshot_policy.every_k_modifications = 100;
  Store s = Store::open(cfg);
  std::map<std::string, std::string> at_snapshot, live;
  for (int i = 0; i < 1234; ++i) {
    const std::string k = "s" + std::to_string(i % 900);
    s.set(k, std::to_string(i));
    live[k] = std::to_string(i);
    if (s.snapshot_tick(0)) at_snapshot = live;
  }
  EXPECT_EQ(s.stats().snapshots, 12u);
  Store again = reopen(s, cfg);
  EXPECT_EQ(contents(again), at_snapshot);
}

TEST(Snapshot, TimeTriggerUsesTheCallersClock) {
  StoreConfig cfg = config({Mode::snapshot, AllocStrategy::per_object});
  cfg.snapshot_policy.period_seconds = 3.0;
  Store s = Store::open(cfg);
  s.set("a", "1");
  EXPECT_FALSE(s.snapshot_tick(10.0));  // first tick starts the clock
  EXPECT_FALSE(s.snapshot_tick(12.9));
  EXPECT_TRUE(s.snapshot_tick(13.0));
  s.set("b", "2");
  EXPECT_FALSE(s.snapshot_tick(15.9));
  Store again = reopen(s, cfg);
  EXPECT_EQ(contents(again), (std::map<std::string, std::string>{{"a", "1"}}));
}

TEST(Snapshot, CrashInsideSnapshotWriteKeepsThePreviousOne) {
  StoreConfig cfg = config({Mode::snapshot, AllocStrategy::per_object});
  cfg.snapshot_policy.period_seconds = 0;
  cfg.snapshot_policy.every_k_modifications = 10;
  std::uint64_t start = 0, span = 0;
  {
    Store s = Store::open(cfg);
    for (int i = 0; i < 10; ++i) s.set("a" + std::to_string(i), "1");
    ASSERT_TRUE(s.snapshot_tick(0));
    for (int i = 0; i < 10; ++i) s.set("b" + std::to_string(i), "2");
    start = s.pool().event_counter();
    ASSERT_TRUE(s.snapshot_tick(0));
    span = s.pool().event_counter() - start;
  }
  for (std::uint64_t e = 0; e < span; ++e) {
    Store s = Store::open(cfg);
    for (int i = 0; i < 10; ++i) s.set("a" + std::to_string(i), "1");
    s.snapshot_tick(0);
    for (int i = 0; i < 10; ++i) s.set("b" + std::to_string(i), "2");
    s.pool().crash_at_event(start + e);
    EXPECT_THROW(s.snapshot_tick(0), CrashInjected);
    Store again = reopen(s, cfg);
    EXPECT_EQ(again.size(), 10u) << e;
  }
}

TEST(Snapshot, RegionOverflow) {
  StoreConfig cfg = config({Mode::snapshot, AllocStrategy::per_object}, 2ull << 20);
  cfg.snapshot_policy.every_k_modifications = 1;
  Store s = Store::open(cfg);
  try {
    for (int i = 0; i < 4; ++i) {
      s.set("big" + std::to_string(i), std::string(kMaxValueSize, 'x'));
      s.snapshot_tick(0);
    }
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::snapshot_region_overflow);
  }
}

TEST(Snapshot, ExactLossAcrossSeededCrashTrials) {
  bench::RunConfig rc;
  rc.mode = Mode::snapshot;
  rc.seed = 9;
  const auto reports = bench::run_crashtest(rc, 8000, 30);
  int before_first = 0;
  for (const auto& r : reports) {
    EXPECT_FALSE(r.corrupt) << r.detail;
    EXPECT_EQ(r.lost, r.expected_lost) << "trial " << r.trial;
    if (r.acked > 0 && r.lost == r.acked) ++before_first;
  }
  EXPECT_GT(before_first, 0);
}

TEST(VolatileTable, ChainedInsertFindEraseAndGrowth) {
  ChainedHashTable<int> t(4);
  EXPECT_FALSE(t.insert(1, 10));
  for (int i = 2; i <= 4; ++i) EXPECT_FALSE(t.insert(static_cast<std::uint64_t>(i), i * 10));
  EXPECT_TRUE(t.insert(5, 50));
  EXPECT_EQ(t.bucket_count(), 8u);
  for (int i = 1; i <= 5; ++i) {
    const int* p = t.find(static_cast<std::uint64_t>(i), [&](int v) { return v == i * 10; });
    ASSERT_NE(p, nullptr);
  }
  EXPECT_EQ(t.erase(3, [](int v) { return v == 30; }), 30);
  EXPECT_FALSE(t.erase(3, [](int v) { return v == 30; }).has_value());
  EXPECT_EQ(t.size(), 4u);
  int sum = 0;
  t.for_each([&](int v) { sum += v; });
  EXPECT_EQ(sum, 10 + 20 + 40 + 50);
  t.reset_for(100, 4);
  EXPECT_EQ(t.size(), 0u);
  EXPECT_EQ(t.bucket_count(), 128u);
  for (int i = 0; i < 100; ++i) EXPECT_FALSE(t.insert(static_cast<std::uint64_t>(i), i));
  EXPECT_EQ(t.allocations(), 2u);
}

TEST(VolatileTable, ChainedTableSurvivesGrowthPastTheHugePageThreshold) {
  ChainedHashTable<std::uint64_t> t;
  const std::uint64_t n = 300000;
  for (std::uint64_t i = 0; i < n; ++i) t.insert(i * 0x9e3779b97f4a7c15ull, i);
  for (std::uint64_t i = 0; i < n; i += 2) ASSERT_TRUE(t.erase(i * 0x9e3779b97f4a7c15ull, [](std::uint64_t) { return true; }));
  EXPECT_EQ(t.size(), n / 2);
  for (std::uint64_t i = 0; i < n; ++i) {
    const std::uint64_t* v = t.find(i * 0x9e3779b97f4a7c15ull, [](std::uint64_t) { return true; });
    if (i % 2) {
      ASSERT_NE(v, nullptr);
      EXPECT_EQ(*v, i);
    } else {
      EXPECT_EQ(v, nullptr);
    }
  }
}

TEST(VolatileTable, NodeTableCountsOneAllocationPerEntry) {
  NodeHashTable<int> t(4);
  const std::uint64_t base = t.allocations();
  for (int i = 0; i < 4; ++i) t.insert(static_cast<std::uint64_t>(i), i);
  EXPECT_EQ(t.allocations() - base, 4u);
  t.insert(99, 99);  // also doubles the buckets
  EXPECT_EQ(t.allocations() - base, 6u);
  EXPECT_EQ(t.bucket_count(), 8u);
  EXPECT_NE(t.find(99, [](int v) { return v == 99; }), nullptr);
  EXPECT_EQ(t.erase(0, [](int v) { return v == 0; }), 0);
  EXPECT_EQ(t.size(), 4u);
  t.clear(4);
  EXPECT_EQ(t.size(), 0u);
  EXPECT_EQ(t.find(99, [](int) { return true; }), nullptr);
}
