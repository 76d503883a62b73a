#include "oracles.hpp"

#include <pmkv/tx.hpp>

#include <gtest/gtest.h>

using namespace pmkv;

namespace {

Pool fresh(std::uint64_t log_size = kDefaultLogSize) {
  return Pool::create({}, 4 << 20, PoolOptions{log_size, CrashPolicy::drop_all_pending(), {}});
}

std::vector<std::uint8_t> filled(std::size_t n, std::uint8_t v) { return std::vector<std::uint8_t>(n, v); }

std::uint64_t log_head(const Pool& pool) { return pool.load_value<std::uint64_t>(pool.header().log_region_offset); }

}  // namespace

TEST(Tx, BeginNestsIntoOneHandle) {
  Pool pool = fresh();
  TxManager txm(pool);
  TxHandle& a = txm.begin();
  EXPECT_EQ(a.depth(), 1);
  TxHandle& b = txm.begin();
  EXPECT_EQ(&a, &b);
  EXPECT_EQ(b.depth(), 2);
  b.commit();
  EXPECT_EQ(a.depth(), 1);
  EXPECT_EQ(txm.commits(), 0u);
  a.commit();
  EXPECT_EQ(txm.commits(), 1u);
  EXPECT_FALSE(txm.active());
}

TEST(Tx, CommittedStoresAreDurable) {
  Pool pool = fresh();
  TxManager txm(pool);
  const std::uint64_t at = pool.header().heap_offset;
  {
    TxScope tx(txm);
    tx->store(at, filled(16, 0xAB));
    EXPECT_EQ(pool.load(at, 16), filled(16, 0xAB));
    tx.commit();
  }
  EXPECT_EQ(log_head(pool), 0u);
  Pool reopened = Pool::from_snapshot(pool.crash());
  EXPECT_FALSE(recover_log(reopened).rolled_back);
  EXPECT_EQ(reopened.load(at, 16), filled(16, 0xAB));
}

TEST(Tx, CrashBeforeCommitRestoresPreImage) {
  Pool pool = fresh();
  const std::uint64_t at = pool.header().heap_offset;
  pool.store(at, filled(16, 1));
  pool.flush(at, 16);
  pool.fence();
  TxManager txm(pool);
  TxHandle& tx = txm.begin();
  tx.add_range(at, 16);
  pool.store(at, filled(16, 2));
  pool.flush(at, 16);
  pool.fence();  // new bytes reach the durable image before the crash
  Pool reopened = Pool::from_snapshot(pool.crash());
  const LogRecovery rec = recover_log(reopened);
  EXPECT_TRUE(rec.rolled_back);
  EXPECT_EQ(rec.entries, 1u);
  EXPECT_EQ(reopened.load(at, 16), filled(16, 1));
  EXPECT_EQ(log_head(reopened), 0u);
}

TEST(Tx, RangesAreLoggedOnce) {
  Pool pool = fresh();
  TxManager txm(pool);
  const std::uint64_t at = pool.header().heap_offset;
  TxScope tx(txm);
  tx->add_range(at, 16);
  tx->add_range(at, 16);
  tx->add_range(at + 4, 8);
  EXPECT_EQ(tx->stats().log_entries, 1u);
  // Overlapping extension logs only the uncovered tail and merges coverage.
  tx->add_range(at + 8, 16);
  EXPECT_EQ(tx->stats().log_entries, 2u);
  EXPECT_EQ(tx->stats().bytes_logged, 24u);
  EXPECT_EQ(tx->covered_range_count(), 1u);
  tx->add_range(at + 100, 4);
  EXPECT_EQ(tx->covered_range_count(), 2u);
  tx.commit();
}

TEST(Tx, LargeRangesSplitIntoBoundedEntries) {
  Pool pool = fresh();
  const std::uint64_t at = pool.header().heap_offset;
  pool.store(at, filled(kMaxUndoPayload + 1, 5));
  pool.flush(at, kMaxUndoPayload + 1);
  pool.fence();
  TxManager txm(pool);
  TxHandle& tx = txm.begin();
  tx.store(at, filled(kMaxUndoPayload + 1, 6));
  EXPECT_EQ(tx.stats().log_entries, 2u);
  pool.flush(at, kMaxUndoPayload + 1);
  pool.fence();
  Pool reopened = Pool::from_snapshot(pool.crash());
  EXPECT_EQ(recover_log(reopened).entries, 2u);
  EXPECT_EQ(reopened.load(at, kMaxUndoPayload + 1), filled(kMaxUndoPayload + 1, 5));
}

TEST(Tx, TwoStoresToOneLineFlushOneLine) {
  Pool pool = fresh();
  TxManager txm(pool);
  const std::uint64_t at = pool.header().heap_offset;
  TxScope tx(txm);
  tx->store_value<std::uint64_t>(at, 1);
  tx->store_value<std::uint64_t>(at + 8, 2);
  const TxStats st = tx.commit();
  EXPECT_EQ(st.dirty_lines, 1u);
}

// Per range: entry fence plus head bump. At commit: data fence plus head clear.
TEST(Tx, FenceAccountingForOneSmallTransaction) {
  Pool pool = fresh();
  TxManager txm(pool);
  TxScope tx(txm);
  tx->store_value<std::uint64_t>(pool.header().heap_offset, 1);
  const TxStats st = tx.commit();
  EXPECT_EQ(st.log_entries, 1u);
  EXPECT_EQ(st.fences, 4u);
  EXPECT_EQ(st.flushes, 4u);
}

TEST(Tx, AbortRestoresNestedWork) {
  Pool pool = fresh();
  TxManager txm(pool);
  const std::uint64_t at = pool.header().heap_offset;
  pool.store(at, filled(32, 9));
  const std::vector<std::uint8_t> before = pool.load(at, 32);
  bool notified = false;
  txm.on_abort([&] { notified = true; });
  TxHandle& outer = txm.begin();
  outer.store(at, filled(8, 1));
  TxHandle& inner = txm.begin();
  inner.store(at + 16, filled(16, 2));
  inner.commit();
  outer.abort();
  EXPECT_EQ(pool.load(at, 32), before);
  EXPECT_TRUE(notified);
  EXPECT_EQ(txm.aborts(), 1u);
  EXPECT_EQ(log_head(pool), 0u);
}

TEST(Tx, AbortWithEmptyLogIsANoOp) {
  Pool pool = fresh();
  TxManager txm(pool);
  const std::uint64_t events = pool.event_counter();
  txm.begin().abort();
  EXPECT_EQ(pool.event_counter(), events);
}

TEST(Tx, ScopeAbortsWhenNotCommitted) {
  Pool pool = fresh();
  TxManager txm(pool);
  const std::uint64_t at = pool.header().heap_offset;
  {
    TxScope tx(txm);
    tx->store_value<std::uint64_t>(at, 77);
  }
  EXPECT_EQ(pool.load_value<std::uint64_t>(at), 0u);
  EXPECT_FALSE(txm.active());
}

TEST(Tx, FreshRangesNeedNoPreImage) {
  Pool pool = fresh();
  TxManager txm(pool);
  const std::uint64_t at = pool.header().heap_offset;
  TxScope tx(txm);
  tx->add_fresh(at, 64);
  tx->store(at, filled(64, 3));
  EXPECT_EQ(tx->stats().log_entries, 0u);
  tx.commit();
}

TEST(Tx, LogOverflowAbortsTheTransaction) {
  Pool pool = fresh(kPageSize);
  TxManager txm(pool);
  const std::uint64_t at = pool.header().heap_offset;
  pool.store(at, filled(8192, 4));
  TxHandle& tx = txm.begin();
  try {
    tx.store(at, filled(8192, 5));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::log_region_full);
  }
  EXPECT_FALSE(txm.active());
  EXPECT_EQ(pool.load(at, 8192), filled(8192, 4));
  EXPECT_EQ(log_head(pool), 0u);
}

TEST(Tx, BeginRefusesAStaleLog) {
  Pool pool = fresh();
  pool.durable_store8(pool.header().log_region_offset, 1);
  TxManager txm(pool);
  EXPECT_THROW(txm.begin(), Error);
}

TEST(Tx, ChecksumMismatchFailsStop) {
  Pool pool = fresh();
  TxManager txm(pool);
  TxHandle& tx = txm.begin();
  tx.add_range(pool.header().heap_offset, 16);
  // Flip one pre-image byte inside the durable entry.
  const std::uint64_t payload = pool.header().log_region_offset + kLogEntriesStart + kUndoEntryHeaderSize;
  pool.store_value<std::uint8_t>(payload, 0xFF);
  pool.flush(payload, 1);
  pool.fence();
  Pool reopened = Pool::from_snapshot(pool.crash());
  try {
    recover_log(reopened);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::corrupt_log);
  }
}

TEST(Tx, CrashSweepOverTheCanonicalTransaction) {
  const auto res = oracle::sweep_canonical_tx(CrashPolicy::drop_all_pending());
  EXPECT_GT(res.tx_events, 10u);
  EXPECT_EQ(res.crash_points, res.tx_events + 1);
  EXPECT_EQ(res.torn, 0u);
  EXPECT_EQ(res.outside_changed, 0u);
  EXPECT_GT(res.pre, 0u);
  EXPECT_GT(res.post, 0u);
  // Only the no-crash point is post-image under drop-all-pending.
  EXPECT_EQ(res.post, 1u);
  EXPECT_GT(res.double_crash_points, 0u);
  EXPECT_EQ(res.double_crash_bad, 0u);
  EXPECT_EQ(res.reapply_bad, 0u);
}

TEST(Tx, CrashSweepUnderAdversarialPersistence) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto res = oracle::sweep_canonical_tx(CrashPolicy::adversarial(seed));
    EXPECT_EQ(res.torn, 0u) << seed;
    EXPECT_EQ(res.outside_changed, 0u) << seed;
    EXPECT_EQ(res.double_crash_bad, 0u) << seed;
    EXPECT_EQ(res.reapply_bad, 0u) << seed;
  }
}
