// Command-line driver: benchmarks, crash injection and the TCP server.
// Exit status is 0 only when every check of the run passed.

#include <pmkv/bench/experiments.hpp>
#include <pmkv/bench/report.hpp>
#include <pmkv/store.hpp>
#include <pmkv/wire.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace fs = std::filesystem;
using namespace pmkv;
using namespace pmkv::bench;
using namespace pmkv::wire;

namespace {

struct Common {
  std::string mode = "hybrid";
  std::string alloc = "per-object";
  std::uint32_t tx_batch = 1;
  std::uint64_t seed = 1;
  std::uint64_t pool_size = 0;
  std::string out_dir = "results";
};

class Checks {
 public:
  void expect(bool ok, const std::string& what) {
    std::printf("%s %s\n", ok ? "ok  " : "FAIL", what.c_str());
    all_ &= ok;
  }
  int exit_code() const { return all_ ? 0 : 1; }

 private:
  bool all_ = true;
};

void add_common(CLI::App* cmd, Common& c, bool allow_all) {
  const std::string all = allow_all ? ", all" : "";
  cmd->add_option("--mode", c.mode, "fully-persistent, hybrid, snapshot" + all)->capture_default_str();
  cmd->add_option("--alloc", c.alloc, "per-object, slab" + all)->capture_default_str();
  cmd->add_option("--tx-batch", c.tx_batch, "operations per transaction")->capture_default_str()->check(CLI::PositiveNumber);
  cmd->add_option("--seed", c.seed, "workload and hash seed")->capture_default_str();
  cmd->add_option("--pool-size", c.pool_size, "pool bytes (0 sizes from the key count)")->capture_default_str();
  cmd->add_option("--out-dir", c.out_dir, "directory for CSV output")->capture_default_str();
}

std::vector<Mode> modes_of(const std::string& s, bool allow_snapshot) {
  if (s == "all") {
    std::vector<Mode> m = {Mode::fully_persistent, Mode::hybrid};
    if (allow_snapshot) m.push_back(Mode::snapshot);
    return m;
  }
  const auto m = parse_mode(s);
  if (!m) throw CLI::ValidationError("--mode", "unknown mode '" + s + "'");
  return {*m};
}

// The snapshot baseline keeps no persistent allocations, so it runs once.
std::vector<AllocStrategy> allocs_of(const std::string& s, Mode m) {
  if (m == Mode::snapshot) return {AllocStrategy::per_object};
  if (s == "all") return {AllocStrategy::per_object, AllocStrategy::slab};
  const auto a = parse_alloc(s);
  if (!a) throw CLI::ValidationError("--alloc", "unknown strategy '" + s + "'");
  return {*a};
}

RunConfig run_config(const Common& c, Mode m, AllocStrategy a) {
  RunConfig rc;
  rc.mode = m;
  rc.alloc = a;
  rc.tx_batch = c.tx_batch;
  rc.seed = c.seed;
  rc.pool_size = c.pool_size;
  rc.pool_dir = pool_dir_from_env();
  return rc;
}

bool is_power_of_two(std::uint64_t v) { return v && (v & (v - 1)) == 0; }

bool percentiles_monotone(const LatencyHistogram& h) {
  double prev = 0;
  for (double p : kReportPercentiles) {
    const double v = h.percentile(p);
    if (v < prev) return false;
    prev = v;
  }
  return true;
}

void print_percentiles(const LatencyHistogram& h) {
  for (double p : kReportPercentiles) std::printf("  p%-6g %10.3f us\n", p, h.percentile(p) / 1000.0);
}

std::string file_tag(const RunConfig& rc) {
  std::string s = config_label(rc);
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

int bench_insert(const Common& c, std::uint64_t keys) {
  Checks checks;
  for (Mode m : modes_of(c.mode, true)) {
    for (AllocStrategy a : allocs_of(c.alloc, m)) {
      const RunConfig rc = run_config(c, m, a);
      const InsertionResult r = run_insertion(rc, keys);
      const fs::path dir = fs::path(c.out_dir) / file_tag(rc);
      write_throughput_csv(dir / "throughput.csv", r.series);
      write_latency_csv(dir / "latency.csv", &r.latency);
      std::printf("%s: %llu keys, %.0f ops/s, mean resize dip %.1f%%, %llu heap allocations\n", config_label(rc).c_str(),
                  static_cast<unsigned long long>(keys), r.ops_per_sec, 100.0 * mean_resize_dip(r.series),
                  static_cast<unsigned long long>(r.heap_allocations));
      print_percentiles(r.latency);
      const bool aligned = std::all_of(r.resize_key_counts.begin(), r.resize_key_counts.end(), is_power_of_two);
      checks.expect(aligned, config_label(rc) + ": resizes at power-of-two key counts");
      checks.expect(percentiles_monotone(r.latency), config_label(rc) + ": percentiles monotone");
      checks.expect(r.series.total_ops() == keys, config_label(rc) + ": window ops sum to total");
    }
  }
  return checks.exit_code();
}

// Runs ops through `clients` TCP connections to an in-process server.
YcsbResult ycsb_over_wire(Store& store, const Workload& w, unsigned clients) {
  for (const Op& op : w.load) store.set(op.key, w.value(op));
  store.commit_batch();
  Server server(store, ServerOptions{"127.0.0.1", 0});
  server.bind_and_listen();
  std::thread serving([&] { server.serve(); });

  YcsbResult total;
  std::mutex mu;
  std::vector<std::thread> threads;
  const auto t0 = SteadyClock::now();
  for (unsigned id = 0; id < clients; ++id) {
    threads.emplace_back([&, id] {
      Client client("127.0.0.1", server.port());
      YcsbResult mine;
      for (std::size_t i = id; i < w.ops.size(); i += clients) {
        const Op& op = w.ops[i];
        const auto s = SteadyClock::now();
        switch (op.kind) {
          case OpKind::read:
            if (client.call({Verb::get, op.key, {}}) == "$-1\r\n") ++mine.misses;
            ++mine.reads;
            break;
          case OpKind::read_modify_write:
            if (client.call({Verb::get, op.key, {}}) == "$-1\r\n") ++mine.misses;
            client.call({Verb::set, op.key, std::string(w.value(op))});
            ++mine.rmw;
            break;
          case OpKind::del: client.call({Verb::del, op.key, {}}); break;
          case OpKind::insert:
            client.call({Verb::set, op.key, std::string(w.value(op))});
            ++mine.inserts;
            break;
          case OpKind::update:
            client.call({Verb::set, op.key, std::string(w.value(op))});
            ++mine.updates;
            break;
        }
        mine.latency.record(seconds_between(s, SteadyClock::now()) * 1e9);
      }
      std::lock_guard lock(mu);
      total.latency.merge(mine.latency);
      total.reads += mine.reads;
      total.updates += mine.updates;
      total.inserts += mine.inserts;
      total.rmw += mine.rmw;
      total.misses += mine.misses;
    });
  }
  for (auto& t : threads) t.join();
  total.seconds = seconds_between(t0, SteadyClock::now());
  total.ops_per_sec = total.seconds > 0 ? static_cast<double>(w.ops.size()) / total.seconds : 0;
  Client("127.0.0.1", server.port()).call({Verb::shutdown, {}, {}});
  serving.join();
  return total;
}

int bench_ycsb(const Common& c, const std::string& workload, std::uint64_t records, std::uint64_t ops, unsigned clients) {
  Checks checks;
  const auto kind = parse_workload(workload);
  if (!kind || *kind == WorkloadKind::insertion || *kind == WorkloadKind::mixed_set_del)
    throw CLI::ValidationError("--workload", "expected one of A, B, C, D, F");
  WorkloadSpec spec;
  spec.kind = *kind;
  spec.n_records = records;
  spec.n_ops = ops;
  spec.fixed_value_len = 1024;
  spec.rng_seed = c.seed;
  const Workload w = gen_workload(spec);
  for (Mode m : modes_of(c.mode, true)) {
    for (AllocStrategy a : allocs_of(c.alloc, m)) {
      RunConfig rc = run_config(c, m, a);
      StoreConfig cfg = make_store_config(rc, records + ops, "ycsb");
      if (!rc.pool_size) cfg.pool_size += (records + ops) * 1100;
      Store store = fresh_store(cfg);
      store.pool().prefault();
      const YcsbResult r = clients == 0 ? run_ycsb(store, w) : ycsb_over_wire(store, w, clients);
      const fs::path dir = fs::path(c.out_dir) / (file_tag(rc) + "_ycsb_" + std::string(to_string(*kind)));
      if (clients == 0) write_throughput_csv(dir / "throughput.csv", r.series);
      write_latency_csv(dir / "latency.csv", &r.latency);
      std::printf("%s YCSB-%s (%u clients): %.0f ops/s, reads %llu updates %llu inserts %llu rmw %llu misses %llu\n",
                  config_label(rc).c_str(), std::string(to_string(*kind)).c_str(), clients, r.ops_per_sec,
                  static_cast<unsigned long long>(r.reads), static_cast<unsigned long long>(r.updates),
                  static_cast<unsigned long long>(r.inserts), static_cast<unsigned long long>(r.rmw),
                  static_cast<unsigned long long>(r.misses));
      print_percentiles(r.latency);
      checks.expect(percentiles_monotone(r.latency), config_label(rc) + ": percentiles monotone");
      // With several clients a read-latest key may belong to an insert that
      // another connection has not issued yet.
      if (clients <= 1) checks.expect(r.misses == 0, config_label(rc) + ": every read finds its key");
    }
  }
  return checks.exit_code();
}

int bench_recovery(const Common& c, const std::vector<std::uint64_t>& key_counts, int repeats) {
  Checks checks;
  std::vector<RecoveryRow> rows;
  std::map<std::string, std::vector<RecoveryRow>> by_config;
  for (Mode m : modes_of(c.mode, true)) {
    for (AllocStrategy a : allocs_of(c.alloc, m)) {
      const RunConfig rc = run_config(c, m, a);
      const auto got = run_recovery_experiment(rc, key_counts, repeats);
      std::vector<double> x, y;
      for (const RecoveryRow& r : got) {
        std::printf("%s %8llu keys: %9.3f ms (phase 1 %.3f, phase 2 %.3f)\n", config_label(rc).c_str(),
                    static_cast<unsigned long long>(r.keys), r.total_ms, r.phase1_ms, r.phase2_ms);
        x.push_back(static_cast<double>(r.keys));
        y.push_back(r.total_ms);
        checks.expect(r.keys_recovered == r.keys, config_label(rc) + ": all " + std::to_string(r.keys) + " keys recovered");
      }
      if (got.size() >= 3) {
        const LinearFit fit = fit_line(x, y);
        checks.expect(fit.r2 >= 0.98, config_label(rc) + ": linear fit R^2 = " + std::to_string(fit.r2));
      }
      by_config[config_label(rc)] = got;
      rows.insert(rows.end(), got.begin(), got.end());
    }
  }
  write_recovery_csv(fs::path(c.out_dir) / "recovery.csv", rows);

  // Pointwise comparison of two configurations' totals, when both ran.
  auto pointwise = [&](const std::string& a, const std::string& b, auto pred, const std::string& what) {
    if (!by_config.count(a) || !by_config.count(b)) return;
    const auto& ra = by_config[a];
    const auto& rb = by_config[b];
    bool ok = ra.size() == rb.size();
    for (std::size_t i = 0; ok && i < ra.size(); ++i) ok = pred(ra[i].total_ms, rb[i].total_ms);
    checks.expect(ok, what);
  };
  pointwise("fully-persistent/per-object", "hybrid/per-object", [](double fp, double hy) { return fp < hy; },
            "fully persistent per-object recovers faster than hybrid per-object");
  pointwise("hybrid/slab", "fully-persistent/slab", [](double hy, double fp) { return hy <= 2 * fp; },
            "hybrid slab recovers within 2x of fully persistent slab");
  return checks.exit_code();
}

int crashtest(const Common& c, std::uint64_t ops, std::uint64_t trials) {
  Checks checks;
  for (Mode m : modes_of(c.mode, true)) {
    for (AllocStrategy a : allocs_of(c.alloc, m)) {
      const RunConfig rc = run_config(c, m, a);
      const auto reports = run_crashtest(rc, ops, trials);
      write_crash_csv(fs::path(c.out_dir) / (file_tag(rc) + "_crash.csv"), reports);
      std::uint64_t max_lost = 0, corrupt = 0, failed = 0;
      for (const CrashReport& r : reports) {
        max_lost = std::max(max_lost, r.lost);
        corrupt += r.corrupt;
        if (!crash_trial_passed(rc, r)) {
          if (++failed <= 5)
            std::printf("  trial %llu event %llu: lost %llu (expected %llu)%s%s\n",
                        static_cast<unsigned long long>(r.trial), static_cast<unsigned long long>(r.event_index),
                        static_cast<unsigned long long>(r.lost), static_cast<unsigned long long>(r.expected_lost),
                        r.corrupt ? " corrupt: " : "", r.detail.c_str());
        }
      }
      std::printf("%s: %llu trials, max lost %llu, corrupt %llu\n", config_label(rc).c_str(),
                  static_cast<unsigned long long>(trials), static_cast<unsigned long long>(max_lost),
                  static_cast<unsigned long long>(corrupt));
      checks.expect(failed == 0, config_label(rc) + ": " + std::to_string(trials - failed) + "/" + std::to_string(trials) + " trials pass");
    }
  }
  return checks.exit_code();
}

int serve(const Common& c, const std::string& host, std::uint16_t port, const std::string& path) {
  const auto m = parse_mode(c.mode);
  const auto a = parse_alloc(c.alloc);
  if (!m) throw CLI::ValidationError("--mode", "unknown mode '" + c.mode + "'");
  if (!a) throw CLI::ValidationError("--alloc", "unknown strategy '" + c.alloc + "'");
  RunConfig rc = run_config(c, *m, *a);
  StoreConfig cfg = make_store_config(rc, 1'000'000, "serve");
  if (!path.empty()) cfg.path = path;
  if (!c.pool_size) cfg.pool_size = std::max<std::uint64_t>(cfg.pool_size, 1ull << 30);
  Store store = Store::open(cfg);
  if (!store.recovery_report().fresh)
    std::printf("recovered %llu keys in %.3f ms\n", static_cast<unsigned long long>(store.recovery_report().keys_recovered),
                store.recovery_report().elapsed_ms);
  Server server(store, ServerOptions{host, port});
  server.bind_and_listen();
  std::printf("listening on %s:%u (%s, pool %s)\n", host.c_str(), server.port(), config_label(rc).c_str(),
              cfg.path.empty() ? "in memory" : cfg.path.c_str());
  std::fflush(stdout);
  server.serve();
  return 0;
}

std::vector<std::uint64_t> parse_counts(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::size_t at = 0;
  while (at <= s.size()) {
    const std::size_t comma = std::min(s.find(',', at), s.size());
    out.push_back(std::stoull(s.substr(at, comma - at)));
    at = comma + 1;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Persistent-memory key-value store benchmarks"};
  app.require_subcommand(1);
  Common common;

  auto* insert = app.add_subcommand("bench-insert", "unique-key insertion: throughput windows and latency percentiles");
  add_common(insert, common, true);
  std::uint64_t insert_keys = 1'000'000;
  insert->add_option("--keys", insert_keys, "keys to insert")->capture_default_str();

  auto* ycsb = app.add_subcommand("bench-ycsb", "YCSB core workloads");
  add_common(ycsb, common, true);
  std::string workload = "A";
  std::uint64_t records = 100'000, ycsb_ops = 100'000;
  unsigned clients = 0;
  ycsb->add_option("--workload", workload, "A, B, C, D or F")->capture_default_str();
  ycsb->add_option("--keys", records, "records loaded before the run")->capture_default_str();
  ycsb->add_option("--ops", ycsb_ops, "timed operations")->capture_default_str();
  ycsb->add_option("--clients", clients, "TCP clients (0 drives the store in process)")->capture_default_str();

  auto* recovery = app.add_subcommand("bench-recovery", "reopen time against key count");
  add_common(recovery, common, true);
  std::string counts = "100000,300000,1000000";
  int repeats = 5;
  recovery->add_option("--keys", counts, "comma-separated key counts")->capture_default_str();
  recovery->add_option("--repeats", repeats, "reopens per point; the median is kept")->capture_default_str()->check(CLI::PositiveNumber);

  auto* crash = app.add_subcommand("crashtest", "seeded crash injection against an oracle");
  add_common(crash, common, true);
  std::uint64_t crash_ops = 10'000, trials = 1000;
  crash->add_option("--ops", crash_ops, "operations per trial")->capture_default_str();
  crash->add_option("--trials", trials, "crash trials")->capture_default_str();

  auto* srv = app.add_subcommand("serve", "serve the wire protocol over TCP");
  add_common(srv, common, false);
  std::string host = "127.0.0.1", path;
  std::uint16_t port = kDefaultPort;
  srv->add_option("--host", host, "listen address")->capture_default_str();
  srv->add_option("--port", port, "listen port")->capture_default_str();
  srv->add_option("--pool", path, "pool file (default: PMKV_POOL_DIR/serve.pool, else memory)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (insert->parsed()) return bench_insert(common, insert_keys);
    if (ycsb->parsed()) return bench_ycsb(common, workload, records, ycsb_ops, clients);
    if (recovery->parsed()) return bench_recovery(common, parse_counts(counts), repeats);
    if (crash->parsed()) return crashtest(common, crash_ops, trials);
    if (srv->parsed()) return serve(common, host, port, path);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", std::string(errc_name(e.code())).c_str(), e.what());
    return 2;
  }
  return 0;
}
