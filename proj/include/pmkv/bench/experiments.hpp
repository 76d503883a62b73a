#pragma once

// Measurement drivers: insertion, YCSB, recovery time and crash injection.

#include <pmkv/bench/metrics.hpp>
#include <pmkv/bench/workload.hpp>
#include <pmkv/store.hpp>

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace pmkv::bench {

struct RunConfig {
  Mode mode = Mode::hybrid;
  AllocStrategy alloc = AllocStrategy::per_object;
  std::uint32_t tx_batch = 1;
  std::uint64_t seed = 1;
  std::uint64_t pool_size = 0;  // 0 sizes the pool from the key count
  std::uint64_t log_size = 0;   // 0 sizes the log from the key count
  std::filesystem::path pool_dir;  // empty keeps pools in memory
};

inline std::string config_label(const RunConfig& c) {
  std::string s(to_string(c.mode));
  if (c.mode != Mode::snapshot) s += "/" + std::string(to_string(c.alloc));
  return s;
}

/// Pool directory from PMKV_POOL_DIR, if set.
inline std::filesystem::path pool_dir_from_env() {
  const char* dir = std::getenv("PMKV_POOL_DIR");
  return dir && *dir ? std::filesystem::path(dir) : std::filesystem::path{};
}

/// A store configuration big enough for `keys` small pairs. A fully
/// persistent resize logs one next pointer per moved entry, so its log
/// grows with the key count.
inline StoreConfig make_store_config(const RunConfig& rc, std::uint64_t keys, const std::string& name = "pool") {
  StoreConfig c;
  c.mode = rc.mode;
  c.alloc = rc.alloc;
  c.tx_batch = rc.tx_batch;
  c.hash_seed = rc.seed;
  const std::uint64_t per_key = rc.mode == Mode::fully_persistent ? 320 : 224;
  std::uint64_t log = rc.log_size;
  if (log == 0) log = std::max<std::uint64_t>(kDefaultLogSize, align_up(keys * 40, kPageSize));
  c.pool_options.log_size = log;
  c.pool_size = rc.pool_size ? rc.pool_size : (64ull << 20) + keys * per_key + log;
  if (!rc.pool_dir.empty()) {
    std::filesystem::create_directories(rc.pool_dir);
    c.path = rc.pool_dir / (name + ".pool");
  }
  return c;
}

inline Store fresh_store(const StoreConfig& c) {
  if (!c.path.empty()) std::filesystem::remove(c.path);
  return Store::open(c);
}

using SteadyClock = std::chrono::steady_clock;

inline double seconds_between(SteadyClock::time_point a, SteadyClock::time_point b) {
  return std::chrono::duration<double>(b - a).count();
}

struct InsertionResult {
  ThroughputSeries series;
  LatencyHistogram latency;
  double seconds = 0;
  double ops_per_sec = 0;
  std::vector<std::uint64_t> resize_key_counts;
  std::uint64_t heap_allocations = 0;
  TxStats tx;
};

namespace detail {

class InsertionRecorder {
 public:
  explicit InsertionRecorder(const Store& store) : resizes_(store.resize_key_counts().size()) {}

  void insert(Store& store, const Workload& w, const Op& op) {
    const auto t0 = SteadyClock::now();
    store.set(op.key, w.value(op));
    const auto t1 = SteadyClock::now();
    const double s = seconds_between(t0, t1);
    const bool resized = store.resize_key_counts().size() != resizes_;
    resizes_ = store.resize_key_counts().size();
    r_.latency.record(s * 1e9);
    r_.series.record(s, resized);
    r_.seconds += s;
  }

  InsertionResult finish(Store& store, std::size_t n_ops) {
    store.commit_batch();
    r_.series.finish();
    r_.ops_per_sec = r_.seconds > 0 ? static_cast<double>(n_ops) / r_.seconds : 0;
    r_.resize_key_counts = store.resize_key_counts();
    const StoreStats st = store.stats();
    r_.heap_allocations = st.heap_allocations;
    r_.tx = st.tx;
    return std::move(r_);
  }

 private:
  InsertionResult r_;
  std::size_t resizes_;
};

}  // namespace detail

/// Inserts every op of `w` (all fresh keys), timing each call.
inline InsertionResult run_insertion(Store& store, const Workload& w) {
  detail::InsertionRecorder rec(store);
  for (const Op& op : w.ops) rec.insert(store, w, op);
  return rec.finish(store, w.ops.size());
}

inline InsertionResult run_insertion(const RunConfig& rc, std::uint64_t n) {
  WorkloadSpec spec;
  spec.kind = WorkloadKind::insertion;
  spec.n_ops = n;
  spec.rng_seed = rc.seed;
  const Workload w = gen_workload(spec);
  Store store = fresh_store(make_store_config(rc, n, "insert"));
  store.pool().prefault();
  InsertionResult r = run_insertion(store, w);
  return r;
}

/// Runs the insertion benchmark for several configs at once, switching
/// between them every `chunk` ops. A slow stretch on a shared machine then
/// lands on every config instead of whichever one happened to be running.
inline std::vector<InsertionResult> run_insertion_interleaved(const std::vector<RunConfig>& rcs, std::uint64_t n,
                                                              std::uint64_t chunk = 100000) {
  std::vector<Workload> loads;
  std::vector<Store> stores;
  std::vector<detail::InsertionRecorder> recs;
  for (std::size_t i = 0; i < rcs.size(); ++i) {
    WorkloadSpec spec;
    spec.kind = WorkloadKind::insertion;
    spec.n_ops = n;
    spec.rng_seed = rcs[i].seed;
    loads.push_back(gen_workload(spec));
    stores.push_back(fresh_store(make_store_config(rcs[i], n, "insert" + std::to_string(i))));
    stores.back().pool().prefault();
    recs.emplace_back(stores.back());
  }
  for (std::uint64_t begin = 0; begin < n; begin += chunk) {
    const std::uint64_t end = std::min(n, begin + chunk);
    for (std::size_t i = 0; i < rcs.size(); ++i)
      for (std::uint64_t k = begin; k < end; ++k) recs[i].insert(stores[i], loads[i], loads[i].ops[k]);
  }
  std::vector<InsertionResult> out;
  for (std::size_t i = 0; i < rcs.size(); ++i) out.push_back(recs[i].finish(stores[i], loads[i].ops.size()));
  return out;
}

struct YcsbResult {
  LatencyHistogram latency;
  ThroughputSeries series;
  double seconds = 0;
  double ops_per_sec = 0;
  std::uint64_t reads = 0, updates = 0, inserts = 0, rmw = 0, misses = 0;
};

/// Loads w.load untimed, then times every op of w.ops.
inline YcsbResult run_ycsb(Store& store, const Workload& w) {
  for (const Op& op : w.load) store.set(op.key, w.value(op));
  store.commit_batch();
  YcsbResult r;
  for (const Op& op : w.ops) {
    const auto t0 = SteadyClock::now();
    switch (op.kind) {
      case OpKind::read:
        if (!store.get(op.key)) ++r.misses;
        ++r.reads;
        break;
      case OpKind::update: store.set(op.key, w.value(op)); ++r.updates; break;
      case OpKind::insert: store.set(op.key, w.value(op)); ++r.inserts; break;
      case OpKind::read_modify_write: {
        if (!store.get(op.key)) ++r.misses;
        store.set(op.key, w.value(op));
        ++r.rmw;
        break;
      }
      case OpKind::del: store.del(op.key); break;
    }
    const double s = seconds_between(t0, SteadyClock::now());
    r.latency.record(s * 1e9);
    r.series.record(s);
    r.seconds += s;
  }
  store.commit_batch();
  r.series.finish();
  r.ops_per_sec = r.seconds > 0 ? static_cast<double>(w.ops.size()) / r.seconds : 0;
  return r;
}

struct RecoveryRow {
  Mode mode;
  AllocStrategy alloc;
  std::uint64_t keys = 0;
  double total_ms = 0;
  double phase1_ms = 0;
  double phase2_ms = 0;
  std::uint64_t keys_recovered = 0;
};

/// For each key count: populate a fresh store, shut it down cleanly, then
/// reopen `repeats` times and keep the median reopen. Every reopen maps
/// the pool at a new base.
inline std::vector<RecoveryRow> run_recovery_experiment(const RunConfig& rc, const std::vector<std::uint64_t>& key_counts,
                                                        int repeats = 3) {
  std::vector<RecoveryRow> rows;
  for (std::uint64_t keys : key_counts) {
    WorkloadSpec spec;
    spec.kind = WorkloadKind::insertion;
    spec.n_ops = keys;
    spec.rng_seed = rc.seed;
    StoreConfig cfg = make_store_config(rc, keys, "recovery");
    std::optional<DurableSnapshot> image;
    {
      const Workload w = gen_workload(spec);
      Store store = fresh_store(cfg);
      for (const Op& op : w.ops) store.set(op.key, w.value(op));
      store.commit_batch();
      if (cfg.path.empty())
        image = store.crash();  // nothing pending after commit: a clean image
      else
        store.close();
    }
    std::vector<RecoveryRow> runs;
    for (int i = 0; i < repeats; ++i) {
      std::optional<Store> store;
      if (image)
        store.emplace(Store::open(Pool::from_snapshot(*image, cfg.pool_options), cfg));
      else
        store.emplace(Store::open(cfg));
      const RecoveryReport& rep = store->recovery_report();
      runs.push_back({rc.mode, rc.alloc, keys, rep.elapsed_ms, rep.phase1_ms, rep.phase2_ms, rep.keys_recovered});
      if (rep.keys_recovered != keys)
        throw Error(Errc::corrupt_pool, "recovered " + std::to_string(rep.keys_recovered) + " of " + std::to_string(keys));
    }
    std::sort(runs.begin(), runs.end(), [](const RecoveryRow& a, const RecoveryRow& b) { return a.total_ms < b.total_ms; });
    rows.push_back(runs[runs.size() / 2]);
    if (!cfg.path.empty()) std::filesystem::remove(cfg.path);
  }
  return rows;
}

struct CrashReport {
  std::uint64_t trial = 0;
  std::uint64_t event_index = 0;
  std::uint64_t acked = 0;
  std::uint64_t lost = 0;
  bool corrupt = false;
  std::uint64_t expected_lost = 0;  // snapshot baseline only
  std::string detail;
};

using KvMap = std::map<std::string, std::string>;

inline void apply_op(KvMap& m, const Workload& w, const Op& op) {
  if (op.kind == OpKind::del)
    m.erase(op.key);
  else if (op.kind != OpKind::read)
    m[op.key] = std::string(w.value(op));
}

/// Keys whose presence or value differ between a and b.
inline std::uint64_t diff_count(const KvMap& a, const KvMap& b) {
  std::uint64_t n = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() || ib != b.end()) {
    if (ib == b.end() || (ia != a.end() && ia->first < ib->first)) {
      ++n;
      ++ia;
    } else if (ia == a.end() || ib->first < ia->first) {
      ++n;
      ++ib;
    } else {
      if (ia->second != ib->second) ++n;
      ++ia;
      ++ib;
    }
  }
  return n;
}

inline KvMap read_all(const Store& store) {
  KvMap m;
  store.for_each([&](std::string_view k, std::string_view v) { m.emplace(k, v); });
  return m;
}

namespace detail {

inline constexpr std::uint64_t kCrashPoolSize = 32ull << 20;

inline StoreConfig crash_store_config(const RunConfig& rc, std::uint64_t trial) {
  StoreConfig c;
  c.mode = rc.mode;
  c.alloc = rc.alloc;
  c.tx_batch = rc.tx_batch;
  c.hash_seed = rc.seed;
  c.pool_size = rc.pool_size ? rc.pool_size : kCrashPoolSize;
  c.pool_options.crash_policy = CrashPolicy::adversarial(splitmix64(rc.seed ^ (trial + 1) * 0x2545f4914f6cdd1dull));
  c.snapshot_policy.period_seconds = 3.0;
  return c;
}

inline WorkloadSpec crash_workload_spec(const RunConfig& rc, std::uint64_t n_ops) {
  WorkloadSpec spec;
  spec.rng_seed = rc.seed;
  spec.n_ops = n_ops;
  if (rc.mode == Mode::snapshot) {
    spec.kind = WorkloadKind::insertion;
  } else {
    spec.kind = WorkloadKind::mixed_set_del;
    spec.n_records = std::max<std::uint64_t>(16, n_ops / 5);
  }
  return spec;
}

// Transactional modes: crash at a uniformly chosen pool event, recover,
// and compare against the oracle of acked and in-flight operations.
inline std::vector<CrashReport> crashtest_transactional(const RunConfig& rc, std::uint64_t n_ops, std::uint64_t n_trials) {
  const Workload w = gen_workload(crash_workload_spec(rc, n_ops));
  std::uint64_t first_event = 0, end_event = 0;
  {
    Store dry = Store::open(crash_store_config(rc, 0));
    first_event = dry.pool().event_counter();
    for (const Op& op : w.ops) {
      if (op.kind == OpKind::del)
        dry.del(op.key);
      else
        dry.set(op.key, w.value(op));
    }
    dry.commit_batch();
    end_event = dry.pool().event_counter();
  }
  std::mt19937_64 pick(splitmix64(rc.seed));
  std::vector<CrashReport> reports;
  for (std::uint64_t t = 0; t < n_trials; ++t) {
    CrashReport rep;
    rep.trial = t;
    rep.event_index = first_event + (end_event > first_event ? pick() % (end_event - first_event) : 0);
    const StoreConfig cfg = crash_store_config(rc, t);
    KvMap committed;
    std::vector<const Op*> in_flight;
    std::uint64_t issued = 0;
    std::optional<DurableSnapshot> image;
    {
      Store store = Store::open(cfg);
      store.pool().crash_at_event(rep.event_index);
      try {
        for (const Op& op : w.ops) {
          ++issued;
          in_flight.push_back(&op);
          if (op.kind == OpKind::del)
            store.del(op.key);
          else
            store.set(op.key, w.value(op));
          if (store.acked_ops() == issued) {
            for (const Op* o : in_flight) apply_op(committed, w, *o);
            in_flight.clear();
          }
        }
        store.commit_batch();
        for (const Op* o : in_flight) apply_op(committed, w, *o);
        in_flight.clear();
      } catch (const CrashInjected&) {
      }
      rep.acked = store.acked_ops();
      image = store.crash();
    }
    KvMap issued_state = committed;
    for (const Op* o : in_flight) apply_op(issued_state, w, *o);
    try {
      Store recovered = Store::open(Pool::from_snapshot(*image, cfg.pool_options), cfg);
      const KvMap got = read_all(recovered);
      rep.lost = diff_count(got, issued_state);
      if (got != committed && got != issued_state) {
        rep.corrupt = true;
        rep.detail = "state matches neither acked nor acked+in-flight";
      }
      auto pairs = recovered.durable_pairs();
      KvMap enumerated;
      for (auto& [k, v] : pairs) enumerated.emplace(std::move(k), std::move(v));
      if (enumerated.size() != pairs.size() || enumerated != got) {
        rep.corrupt = true;
        rep.detail = "allocator enumeration disagrees with the index";
      }
      recovered.set("post-crash-probe", "ok");
      if (recovered.get("post-crash-probe") != "ok") {
        rep.corrupt = true;
        rep.detail = "store unusable after recovery";
      }
    } catch (const Error& e) {
      rep.corrupt = true;
      rep.detail = std::string(errc_name(e.code())) + ": " + e.what();
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

// Snapshot baseline on a virtual clock of 1 ms per op. Odd trials also arm
// an event crash, which may land inside a snapshot write.
inline std::vector<CrashReport> crashtest_snapshot(const RunConfig& rc, std::uint64_t n_ops, std::uint64_t n_trials) {
  const Workload w = gen_workload(crash_workload_spec(rc, n_ops));
  constexpr double kTick = 0.001;
  std::uint64_t snapshot_events = 0;
  {
    Store dry = Store::open(crash_store_config(rc, 0));
    const std::uint64_t e0 = dry.pool().event_counter();
    for (std::uint64_t i = 0; i < w.ops.size(); ++i) {
      dry.set(w.ops[i].key, w.value(w.ops[i]));
      dry.snapshot_tick(static_cast<double>(i + 1) * kTick);
    }
    snapshot_events = dry.pool().event_counter() - e0;
  }
  std::mt19937_64 pick(splitmix64(rc.seed));
  std::vector<CrashReport> reports;
  for (std::uint64_t t = 0; t < n_trials; ++t) {
    CrashReport rep;
    rep.trial = t;
    const std::uint64_t crash_op = pick() % (w.ops.size() + 1);
    const std::uint64_t crash_event = pick() % std::max<std::uint64_t>(1, snapshot_events);
    const StoreConfig cfg = crash_store_config(rc, t);
    std::uint64_t snapshot_acked = 0;
    // A crash inside a snapshot write leaves that snapshot either fully
    // durable or absent, depending on whether its selector store landed.
    std::optional<std::uint64_t> interrupted_snapshot;
    std::optional<DurableSnapshot> image;
    {
      Store store = Store::open(cfg);
      if (t % 2 == 1 && snapshot_events > 0) store.pool().crash_at_event(store.pool().event_counter() + crash_event);
      rep.event_index = crash_op;
      bool in_tick = false;
      try {
        for (std::uint64_t i = 0; i < crash_op; ++i) {
          store.set(w.ops[i].key, w.value(w.ops[i]));
          in_tick = true;
          if (store.snapshot_tick(static_cast<double>(i + 1) * kTick)) snapshot_acked = store.acked_ops();
          in_tick = false;
        }
      } catch (const CrashInjected& c) {
        rep.event_index = c.event_index;
        if (in_tick) interrupted_snapshot = store.acked_ops();
      }
      rep.acked = store.acked_ops();
      image = store.crash();
    }
    auto state_at = [&](std::uint64_t n) {
      KvMap m;
      for (std::uint64_t i = 0; i < n; ++i) apply_op(m, w, w.ops[i]);
      return m;
    };
    rep.expected_lost = rep.acked - snapshot_acked;
    try {
      Store recovered = Store::open(Pool::from_snapshot(*image, cfg.pool_options), cfg);
      const KvMap got = read_all(recovered);
      KvMap expect = state_at(snapshot_acked);
      if (got != expect && interrupted_snapshot) {
        KvMap landed = state_at(*interrupted_snapshot);
        if (got == landed) {
          snapshot_acked = *interrupted_snapshot;
          expect = std::move(landed);
        }
      }
      rep.expected_lost = rep.acked - snapshot_acked;
      rep.lost = rep.acked - std::min<std::uint64_t>(rep.acked, got.size());
      if (got != expect) {
        rep.corrupt = true;
        rep.detail = "recovered state is not the last snapshot";
      }
    } catch (const Error& e) {
      rep.corrupt = true;
      rep.detail = std::string(errc_name(e.code())) + ": " + e.what();
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

}  // namespace detail

/// Seeded crash trials. For transactional modes a trial passes when nothing
/// is corrupt and at most tx_batch pairs are lost; for the snapshot
/// baseline the loss must equal the acked-since-snapshot count exactly.
inline std::vector<CrashReport> run_crashtest(const RunConfig& rc, std::uint64_t n_ops, std::uint64_t n_trials) {
  return rc.mode == Mode::snapshot ? detail::crashtest_snapshot(rc, n_ops, n_trials)
                                   : detail::crashtest_transactional(rc, n_ops, n_trials);
}

inline bool crash_trial_passed(const RunConfig& rc, const CrashReport& r) {
  if (r.corrupt) return false;
  if (rc.mode == Mode::snapshot) return r.lost == r.expected_lost;
  return r.lost <= rc.tx_batch;
}

}  // namespace pmkv::bench
