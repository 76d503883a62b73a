#pragma once

// Seeded operation streams: unique-key insertion, YCSB core workloads A, B,
// C, D and F, and a mixed set/delete stream for crash testing.

#include <pmkv/error.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace pmkv::bench {

enum class WorkloadKind { insertion, ycsb_a, ycsb_b, ycsb_c, ycsb_d, ycsb_f, mixed_set_del };

inline std::string_view to_string(WorkloadKind k) {
  switch (k) {
    case WorkloadKind::insertion: return "insertion";
    case WorkloadKind::ycsb_a: return "A";
    case WorkloadKind::ycsb_b: return "B";
    case WorkloadKind::ycsb_c: return "C";
    case WorkloadKind::ycsb_d: return "D";
    case WorkloadKind::ycsb_f: return "F";
    case WorkloadKind::mixed_set_del: return "mixed";
  }
  return "?";
}

inline std::optional<WorkloadKind> parse_workload(std::string_view s) {
  if (s == "insertion") return WorkloadKind::insertion;
  if (s == "A" || s == "a") return WorkloadKind::ycsb_a;
  if (s == "B" || s == "b") return WorkloadKind::ycsb_b;
  if (s == "C" || s == "c") return WorkloadKind::ycsb_c;
  if (s == "D" || s == "d") return WorkloadKind::ycsb_d;
  if (s == "F" || s == "f") return WorkloadKind::ycsb_f;
  if (s == "mixed") return WorkloadKind::mixed_set_del;
  return std::nullopt;
}

struct WorkloadSpec {
  WorkloadKind kind = WorkloadKind::insertion;
  std::uint64_t n_records = 0;  // preloaded keys (YCSB) or key space (mixed)
  std::uint64_t n_ops = 0;
  std::uint32_t key_len_min = 4;
  std::uint32_t key_len_max = 11;
  std::uint32_t val_len_min = 5;
  std::uint32_t val_len_max = 13;
  std::uint32_t fixed_value_len = 0;  // YCSB records use 1024
  double zipf_theta = 0.99;
  std::uint64_t rng_seed = 1;
};

enum class OpKind { read, update, insert, read_modify_write, del };

struct Op {
  OpKind kind;
  std::string key;
  std::uint32_t value_off = 0;
  std::uint32_t value_len = 0;
};

struct Workload {
  std::vector<Op> load;  // YCSB load phase, empty otherwise
  std::vector<Op> ops;
  std::string value_bytes;

  std::string_view value(const Op& op) const { return std::string_view(value_bytes).substr(op.value_off, op.value_len); }
};

inline std::uint64_t fnv1a64(std::uint64_t v) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (int i = 0; i < 8; ++i) {
    h ^= v & 0xff;
    h *= 0x100000001b3ull;
    v >>= 8;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Gray et al. rejection-free zipfian over [0, items), as in the YCSB
/// client. Rank 0 is the most popular. The item count may grow; zeta is
/// extended incrementally.
class ZipfianGenerator {
 public:
  explicit ZipfianGenerator(std::uint64_t items, double theta = 0.99) : theta_(theta) {
    if (items == 0) throw Error(Errc::invalid_argument, "zipfian over zero items");
    zeta2_ = 1.0 + std::pow(0.5, theta_);
    alpha_ = 1.0 / (1.0 - theta_);
    grow(items);
  }

  std::uint64_t items() const noexcept { return items_; }

  void grow(std::uint64_t items) {
    for (std::uint64_t i = items_; i < items; ++i) zetan_ += 1.0 / std::pow(static_cast<double>(i + 1), theta_);
    items_ = items;
    eta_ = (1.0 - std::pow(2.0 / static_cast<double>(items_), 1.0 - theta_)) / (1.0 - zeta2_ / zetan_);
  }

  template <class Rng>
  std::uint64_t next(Rng& rng) {
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const double uz = u * zetan_;
    if (uz < 1.0) return 0;
    if (uz < 1.0 + std::pow(0.5, theta_)) return items_ > 1 ? 1 : 0;
    const auto r = static_cast<std::uint64_t>(static_cast<double>(items_) * std::pow(eta_ * u - eta_ + 1.0, alpha_));
    return r < items_ ? r : items_ - 1;
  }

 private:
  double theta_;
  double zeta2_ = 0, alpha_ = 0, eta_ = 0, zetan_ = 0;
  std::uint64_t items_ = 0;
};

/// Zipfian ranks spread over the key space with an FNV hash, so popular
/// keys are not clustered by insertion order.
class ScrambledZipfian {
 public:
  ScrambledZipfian(std::uint64_t items, double theta) : zipf_(items, theta) {}
  template <class Rng>
  std::uint64_t next(Rng& rng) {
    return fnv1a64(zipf_.next(rng)) % zipf_.items();
  }

 private:
  ZipfianGenerator zipf_;
};

/// Most recently inserted keys are the most popular.
class LatestGenerator {
 public:
  LatestGenerator(std::uint64_t items, double theta) : zipf_(items, theta) {}
  void set_items(std::uint64_t items) {
    if (items > zipf_.items()) zipf_.grow(items);
  }
  template <class Rng>
  std::uint64_t next(Rng& rng) {
    return zipf_.items() - 1 - zipf_.next(rng);
  }

 private:
  ZipfianGenerator zipf_;
};

inline constexpr std::string_view kBase62 = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz";
inline constexpr std::uint64_t kMaxKeyIndex = 62ull * 62 * 62 * 62;

/// Key for record `index`: a seeded random prefix followed by a 4-char
/// base62 encoding of the index, so keys are unique while their lengths
/// vary across [key_len_min, key_len_max].
inline std::string make_key(const WorkloadSpec& spec, std::uint64_t index) {
  if (index >= kMaxKeyIndex) throw Error(Errc::invalid_argument, "key index beyond base62 suffix range");
  std::uint64_t r = splitmix64(spec.rng_seed ^ (index * 0x9e3779b97f4a7c15ull));
  const std::uint32_t span = spec.key_len_max - spec.key_len_min + 1;
  const std::uint32_t len = std::max<std::uint32_t>(4, spec.key_len_min + static_cast<std::uint32_t>(r % span));
  std::string key(len, '0');
  for (std::uint32_t i = 0; i + 4 < len; ++i) {
    r = splitmix64(r);
    key[i] = kBase62[r % 62];
  }
  for (std::uint32_t i = 0; i < 4; ++i) {
    key[len - 1 - i] = kBase62[index % 62];
    index /= 62;
  }
  return key;
}

namespace detail {

class ValueSource {
 public:
  ValueSource(const WorkloadSpec& spec, std::mt19937_64& rng, std::string& bytes) : spec_(spec), rng_(rng) {
    const std::size_t pool = std::max<std::size_t>(std::max(spec.fixed_value_len, spec.val_len_max) * 2, 1 << 16);
    bytes.resize(pool);
    for (char& c : bytes) c = kBase62[rng_() % 62];
    pool_size_ = pool;
  }

  void assign(Op& op) {
    const std::uint32_t len =
        spec_.fixed_value_len ? spec_.fixed_value_len
                              : spec_.val_len_min + static_cast<std::uint32_t>(rng_() % (spec_.val_len_max - spec_.val_len_min + 1));
    op.value_len = len;
    op.value_off = static_cast<std::uint32_t>(rng_() % (pool_size_ - len + 1));
  }

 private:
  const WorkloadSpec& spec_;
  std::mt19937_64& rng_;
  std::size_t pool_size_ = 0;
};

}  // namespace detail

/// Deterministic in spec.rng_seed.
inline Workload gen_workload(const WorkloadSpec& spec) {
  Workload w;
  std::mt19937_64 rng(spec.rng_seed);
  detail::ValueSource values(spec, rng, w.value_bytes);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  if (spec.kind == WorkloadKind::insertion) {
    w.ops.reserve(spec.n_ops);
    for (std::uint64_t i = 0; i < spec.n_ops; ++i) {
      Op op{OpKind::insert, make_key(spec, i)};
      values.assign(op);
      w.ops.push_back(std::move(op));
    }
    return w;
  }

  if (spec.kind == WorkloadKind::mixed_set_del) {
    const std::uint64_t space = spec.n_records ? spec.n_records : 1024;
    w.ops.reserve(spec.n_ops);
    for (std::uint64_t i = 0; i < spec.n_ops; ++i) {
      const std::uint64_t k = rng() % space;
      Op op{coin(rng) < 0.7 ? OpKind::update : OpKind::del, make_key(spec, k)};
      if (op.kind == OpKind::update) values.assign(op);
      w.ops.push_back(std::move(op));
    }
    return w;
  }

  if (spec.n_records == 0) throw Error(Errc::invalid_argument, "YCSB workloads need n_records > 0");
  w.load.reserve(spec.n_records);
  for (std::uint64_t i = 0; i < spec.n_records; ++i) {
    Op op{OpKind::insert, make_key(spec, i)};
    values.assign(op);
    w.load.push_back(std::move(op));
  }

  double read_fraction = 0;
  switch (spec.kind) {
    case WorkloadKind::ycsb_a: read_fraction = 0.5; break;
    case WorkloadKind::ycsb_b: read_fraction = 0.95; break;
    case WorkloadKind::ycsb_c: read_fraction = 1.0; break;
    case WorkloadKind::ycsb_d: read_fraction = 0.95; break;
    case WorkloadKind::ycsb_f: read_fraction = 0.5; break;
    default: break;
  }

  ScrambledZipfian zipf(spec.n_records, spec.zipf_theta);
  LatestGenerator latest(spec.n_records, spec.zipf_theta);
  std::uint64_t inserted = spec.n_records;
  w.ops.reserve(spec.n_ops);
  for (std::uint64_t i = 0; i < spec.n_ops; ++i) {
    const bool read = coin(rng) < read_fraction;
    Op op{OpKind::read, {}};
    if (spec.kind == WorkloadKind::ycsb_d) {
      if (read) {
        op.key = make_key(spec, latest.next(rng));
      } else {
        op.kind = OpKind::insert;
        op.key = make_key(spec, inserted++);
        latest.set_items(inserted);
        values.assign(op);
      }
    } else {
      op.key = make_key(spec, zipf.next(rng));
      if (!read) {
        op.kind = spec.kind == WorkloadKind::ycsb_f ? OpKind::read_modify_write : OpKind::update;
        values.assign(op);
      }
    }
    w.ops.push_back(std::move(op));
  }
  return w;
}

}  // namespace pmkv::bench
