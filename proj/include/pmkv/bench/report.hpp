#pragma once

// CSV output. Headers are fixed; numbers use fixed precision so the same
// results always produce the same bytes.

#include <pmkv/bench/experiments.hpp>
#include <pmkv/bench/metrics.hpp>
#include <pmkv/error.hpp>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace pmkv::bench {

inline constexpr std::array<double, 5> kReportPercentiles = {50, 90, 99, 99.9, 99.99};

namespace detail {

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io_failure, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(Errc::io_failure, "short write to " + path.string());
}

}  // namespace detail

inline std::string throughput_csv(const ThroughputSeries& s) {
  std::string out = "window_start_op,ops_per_sec,resize_flag\n";
  for (const ThroughputWindow& w : s.windows())
    out += std::to_string(w.start_op) + "," + detail::fmt("%.1f", w.ops_per_sec()) + "," + (w.resize ? "1" : "0") + "\n";
  return out;
}

inline std::string latency_csv(const LatencyHistogram* h) {
  std::string out = "percentile,microseconds\n";
  if (!h || h->count() == 0) return out;
  for (double p : kReportPercentiles)
    out += detail::fmt("%g", p) + "," + detail::fmt("%.3f", h->percentile(p) / 1000.0) + "\n";
  return out;
}

inline std::string recovery_csv(const std::vector<RecoveryRow>& rows) {
  std::string out = "mode,strategy,keys,total_ms,phase1_ms,phase2_ms\n";
  for (const RecoveryRow& r : rows)
    out += std::string(to_string(r.mode)) + "," + std::string(to_string(r.alloc)) + "," + std::to_string(r.keys) + "," +
           detail::fmt("%.3f", r.total_ms) + "," + detail::fmt("%.3f", r.phase1_ms) + "," +
           detail::fmt("%.3f", r.phase2_ms) + "\n";
  return out;
}

inline std::string crash_csv(const std::vector<CrashReport>& reports) {
  std::string out = "trial,event_index,acked,lost,corrupt\n";
  for (const CrashReport& r : reports)
    out += std::to_string(r.trial) + "," + std::to_string(r.event_index) + "," + std::to_string(r.acked) + "," +
           std::to_string(r.lost) + "," + (r.corrupt ? "1" : "0") + "\n";
  return out;
}

inline void write_throughput_csv(const std::filesystem::path& p, const ThroughputSeries& s) {
  detail::write_text(p, throughput_csv(s));
}
inline void write_latency_csv(const std::filesystem::path& p, const LatencyHistogram* h) {
  detail::write_text(p, latency_csv(h));
}
inline void write_recovery_csv(const std::filesystem::path& p, const std::vector<RecoveryRow>& rows) {
  detail::write_text(p, recovery_csv(rows));
}
inline void write_crash_csv(const std::filesystem::path& p, const std::vector<CrashReport>& r) {
  detail::write_text(p, crash_csv(r));
}

}  // namespace pmkv::bench
