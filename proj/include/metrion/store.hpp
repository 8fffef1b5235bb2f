#pragma once

// Measurement storage with windowed range queries. Two backends share one
// in-process index: a purely in-memory store and a single-file append log.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "json.hpp"
#include "metrion/core_model.hpp"
#include "metrion/error.hpp"

namespace metrion {

struct QueryFilter {
  std::optional<MetricName> metric;
  std::optional<EntityId> physical_entity_id;
  std::optional<EntityId> logical_entity_id;

  bool matches(const Measurement& m) const {
    return (!metric || m.metric == *metric) &&
           (!physical_entity_id || m.physical_entity_id == *physical_entity_id) &&
           (!logical_entity_id || m.logical_entity_id == *logical_entity_id);
  }
};

/// Half-open query range against a measurement span. Point measurements
/// (t_start == t_stop) intersect when they fall inside the range.
inline bool intersects(const Measurement& m, Nanos t_start, Nanos t_stop) {
  if (m.t_start == m.t_stop) return m.t_start >= t_start && m.t_start < t_stop;
  return m.t_start < t_stop && m.t_stop > t_start;
}

class MeasurementStore {
 public:
  virtual ~MeasurementStore() = default;

  /// Appends a batch and returns how many measurements became visible. A
  /// batch byte-identical to one already stored is ignored.
  virtual std::size_t append(std::span<const Measurement> batch) = 0;

  /// Measurements intersecting [t_start, t_stop), in canonical order.
  virtual std::vector<Measurement> query_window(Nanos t_start, Nanos t_stop,
                                                const QueryFilter& filter = {}) const = 0;

  virtual std::size_t size() const = 0;
};

namespace detail {

inline std::string canonical_batch(std::span<const Measurement> batch) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& m : batch) arr.push_back(to_json(m));
  return arr.dump();
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void check_batch(std::span<const Measurement> batch) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Measurement& m = batch[i];
    std::string problem;
    if (m.physical_entity_id.empty()) problem = "empty physical entity id";
    else if (m.t_start > m.t_stop) problem = "t_start after t_stop";
    else if (!std::isfinite(m.value) || m.value < 0.0) problem = "value must be finite and non-negative";
    else if (is_thread_counter(m.metric) != m.logical_entity_id.has_value())
      problem = is_thread_counter(m.metric) ? "counter metric without thread" : "energy metric with thread";
    if (!problem.empty()) {
      throw Error(ErrorCode::kArgument, "measurement #" + std::to_string(i) + " rejected: " + problem);
    }
  }
}

/// Time-ordered index over an append-only row vector.
class MeasurementIndex {
 public:
  void insert(std::span<const Measurement> batch) {
    std::set<Series*> touched;
    for (const auto& m : batch) {
      const std::size_t row = rows_.size();
      rows_.push_back(m);
      for (Series* s : {&all_, &by_series_[{m.metric, m.physical_entity_id}],
                        m.logical_entity_id ? &by_logical_[*m.logical_entity_id] : nullptr}) {
        if (s == nullptr) continue;
        s->rows.push_back(row);
        s->max_span = std::max(s->max_span, m.t_stop - m.t_start);
        touched.insert(s);
      }
    }
    for (Series* s : touched) restore_order(*s);
  }

  std::vector<Measurement> query(Nanos t_start, Nanos t_stop, const QueryFilter& filter) const {
    const Series* s = &all_;
    if (filter.metric && filter.physical_entity_id) {
      auto it = by_series_.find({*filter.metric, *filter.physical_entity_id});
      if (it == by_series_.end()) return {};
      s = &it->second;
    } else if (filter.logical_entity_id) {
      auto it = by_logical_.find(*filter.logical_entity_id);
      if (it == by_logical_.end()) return {};
      s = &it->second;
    }
    const Nanos earliest = t_start - s->max_span;
    auto first = std::partition_point(s->rows.begin(), s->rows.end(),
                                      [&](std::size_t r) { return rows_[r].t_start < earliest; });
    std::vector<Measurement> out;
    for (auto it = first; it != s->rows.end() && rows_[*it].t_start < t_stop; ++it) {
      const Measurement& m = rows_[*it];
      if (intersects(m, t_start, t_stop) && filter.matches(m)) out.push_back(m);
    }
    return out;
  }

  std::size_t size() const { return rows_.size(); }

 private:
  struct Series {
    std::vector<std::size_t> rows;
    std::size_t sorted_until = 0;
    Nanos max_span = 0;
  };

  void restore_order(Series& s) {
    auto less = [&](std::size_t a, std::size_t b) { return measurement_less(rows_[a], rows_[b]); };
    auto mid = s.rows.begin() + static_cast<std::ptrdiff_t>(s.sorted_until);
    std::sort(mid, s.rows.end(), less);
    std::inplace_merge(s.rows.begin(), mid, s.rows.end(), less);
    s.sorted_until = s.rows.size();
  }

  std::vector<Measurement> rows_;
  Series all_;
  std::map<std::pair<MetricName, EntityId>, Series> by_series_;
  std::map<EntityId, Series> by_logical_;
};

}  // namespace detail

class InMemoryStore : public MeasurementStore {
 public:
  std::size_t append(std::span<const Measurement> batch) override {
    detail::check_batch(batch);
    const std::uint64_t hash = detail::fnv1a(detail::canonical_batch(batch));
    std::unique_lock lock(mutex_);
    if (!batches_.insert(hash).second) return 0;
    index_.insert(batch);
    return batch.size();
  }

  std::vector<Measurement> query_window(Nanos t_start, Nanos t_stop,
                                        const QueryFilter& filter = {}) const override {
    if (t_start >= t_stop) throw Error(ErrorCode::kArgument, "query range must have t_start < t_stop");
    std::shared_lock lock(mutex_);
    return index_.query(t_start, t_stop, filter);
  }

  std::size_t size() const override {
    std::shared_lock lock(mutex_);
    return index_.size();
  }

 private:
  mutable std::shared_mutex mutex_;
  detail::MeasurementIndex index_;
  std::set<std::uint64_t> batches_;
};

/// Append log: one line per batch, `{"hash": "<hex>", "measurements": [...]}`.
/// The index is rebuilt from the log on open.
class FileStore : public MeasurementStore {
 public:
  explicit FileStore(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    std::size_t number = 0;
    while (in && std::getline(in, line)) {
      ++number;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        std::vector<Measurement> batch;
        for (const auto& mj : j.at("measurements")) batch.push_back(measurement_from_json(mj));
        batches_.insert(std::stoull(j.at("hash").get<std::string>(), nullptr, 16));
        index_.insert(batch);
      } catch (const std::exception& e) {
        throw Error(ErrorCode::kStorage,
                    path_ + ":" + std::to_string(number) + ": corrupt store record: " + e.what());
      }
    }
    file_ = std::fopen(path_.c_str(), "ab");
    if (file_ == nullptr) throw Error(ErrorCode::kStorage, "cannot open store '" + path_ + "'");
  }

  FileStore(const FileStore&) = delete;
  FileStore& operator=(const FileStore&) = delete;

  ~FileStore() override {
    if (file_ != nullptr) std::fclose(file_);
  }

  std::size_t append(std::span<const Measurement> batch) override {
    detail::check_batch(batch);
    const std::string body = detail::canonical_batch(batch);
    const std::uint64_t hash = detail::fnv1a(body);
    std::unique_lock lock(mutex_);
    if (batches_.count(hash)) return 0;
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash));
    const std::string line =
        std::string("{\"hash\":\"") + hex + "\",\"measurements\":" + body + "}\n";
    if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0 ||
        ::fsync(::fileno(file_)) != 0) {
      throw Error(ErrorCode::kStorage, "write to '" + path_ + "' failed");
    }
    batches_.insert(hash);
    index_.insert(batch);
    return batch.size();
  }

  std::vector<Measurement> query_window(Nanos t_start, Nanos t_stop,
                                        const QueryFilter& filter = {}) const override {
    if (t_start >= t_stop) throw Error(ErrorCode::kArgument, "query range must have t_start < t_stop");
    std::shared_lock lock(mutex_);
    return index_.query(t_start, t_stop, filter);
  }

  std::size_t size() const override {
    std::shared_lock lock(mutex_);
    return index_.size();
  }

  const std::string& path() const { return path_; }

 private:
  std::string path_;
  std::FILE* file_ = nullptr;
  mutable std::shared_mutex mutex_;
  detail::MeasurementIndex index_;
  std::set<std::uint64_t> batches_;
};

}  // namespace metrion
