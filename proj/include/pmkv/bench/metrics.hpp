#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

namespace pmkv::bench {

/// Log-bucketed latency histogram over [100 ns, 10 s]. Adjacent bucket
/// bounds differ by 2%, and a percentile reports its bucket's geometric
/// midpoint, so the relative quantile error stays within 1%.
class LatencyHistogram {
 public:
  static constexpr double kMinNs = 100.0;
  static constexpr double kMaxNs = 1e10;
  static constexpr double kRatio = 1.02;

  LatencyHistogram() : counts_(bucket_total(), 0) {}

  static std::size_t bucket_total() {
    return static_cast<std::size_t>(std::ceil(std::log(kMaxNs / kMinNs) / std::log(kRatio))) + 1;
  }

  void record(double ns) {
    ++counts_[bucket_of(ns)];
    ++total_;
    min_ = std::min(min_, ns);
    max_ = std::max(max_, ns);
  }

  void merge(const LatencyHistogram& o) {
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
    total_ += o.total_;
    min_ = std::min(min_, o.min_);
    max_ = std::max(max_, o.max_);
  }

  std::uint64_t count() const noexcept { return total_; }

  /// Nanoseconds at percentile p in (0, 100]. Zero when empty.
  double percentile(double p) const {
    if (total_ == 0) return 0;
    const auto rank = std::max<std::uint64_t>(
        1, static_cast<std::uint64_t>(std::ceil(p / 100.0 * static_cast<double>(total_))));
    std::uint64_t seen = 0;
    for (std::size_t i = 0; i < counts_.size(); ++i) {
      seen += counts_[i];
      if (seen >= rank) return std::clamp(midpoint(i), min_, max_);
    }
    return max_;
  }

 private:
  static std::size_t bucket_of(double ns) {
    if (!(ns > kMinNs)) return 0;
    const auto b = static_cast<std::size_t>(std::log(ns / kMinNs) / std::log(kRatio)) + 1;
    return std::min(b, bucket_total() - 1);
  }

  // Bucket 0 holds everything at or under kMinNs; bucket i > 0 covers
  // (kMinNs * r^(i-1), kMinNs * r^i].
  static double midpoint(std::size_t i) {
    if (i == 0) return kMinNs;
    return kMinNs * std::pow(kRatio, static_cast<double>(i) - 0.5);
  }

  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
  double min_ = std::numeric_limits<double>::infinity();
  double max_ = 0;
};

struct ThroughputWindow {
  std::uint64_t start_op = 0;
  std::uint64_t ops = 0;
  double seconds = 0;
  bool resize = false;

  double ops_per_sec() const { return seconds > 0 ? static_cast<double>(ops) / seconds : 0.0; }
};

/// Fixed-size operation windows with their elapsed time.
class ThroughputSeries {
 public:
  explicit ThroughputSeries(std::uint64_t window_ops = 1000) : window_ops_(window_ops) {}

  void record(double seconds, bool resize = false) {
    if (open_.ops == 0) open_.start_op = total_;
    open_.ops += 1;
    open_.seconds += seconds;
    open_.resize = open_.resize || resize;
    ++total_;
    if (open_.ops == window_ops_) {
      windows_.push_back(open_);
      open_ = {};
    }
  }

  /// Closes a trailing partial window.
  void finish() {
    if (open_.ops) windows_.push_back(open_);
    open_ = {};
  }

  std::uint64_t window_ops() const noexcept { return window_ops_; }
  std::uint64_t total_ops() const noexcept { return total_; }
  const std::vector<ThroughputWindow>& windows() const noexcept { return windows_; }

 private:
  std::uint64_t window_ops_;
  std::uint64_t total_ = 0;
  ThroughputWindow open_;
  std::vector<ThroughputWindow> windows_;
};

/// Mean relative throughput drop of resize windows against the median of
/// all earlier non-resize windows. The first two windows are skipped since
/// they have no stable baseline.
inline double mean_resize_dip(const ThroughputSeries& series) {
  const auto& w = series.windows();
  double sum = 0;
  int n = 0;
  std::vector<double> baseline;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i].ops != series.window_ops()) break;
    if (!w[i].resize) {
      baseline.push_back(w[i].ops_per_sec());
      continue;
    }
    if (i < 2 || baseline.empty()) continue;
    std::vector<double> sorted = baseline;
    std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
    const double median = sorted[sorted.size() / 2];
    sum += 1.0 - w[i].ops_per_sec() / median;
    ++n;
  }
  return n ? sum / n : 0.0;
}

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r2 = 0;
};

/// Ordinary least squares of y on x.
inline LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = std::min(x.size(), y.size());
  LinearFit f;
  if (n < 2) return f;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy == 0 ? 1.0 : (sxy * sxy) / (sxx * syy);
  return f;
}

}  // namespace pmkv::bench
