#pragma once

// Batch attribution over a measurement store: intervals are reconstructed
// and split once, then each window is clipped and attributed independently.

#include <algorithm>
#include <atomic>
#include <exception>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "metrion/attribution.hpp"
#include "metrion/core_model.hpp"
#include "metrion/error.hpp"
#include "metrion/exact_sum.hpp"
#include "metrion/ingestion.hpp"
#include "metrion/interval_engine.hpp"
#include "metrion/store.hpp"

namespace metrion {

struct RunOptions {
  Nanos window_ns = kNanosPerSecond;
  ModelParams params;
  unsigned jobs = 1;
};

struct RunResult {
  Nanos t_start = 0;
  Nanos t_stop = 0;
  Nanos window_ns = 0;
  ModelParams params;
  /// component id -> kind
  std::map<EntityId, PhysicalKind> components;
  std::vector<AttributionReport> windows;
  std::vector<std::string> warnings;

  /// Per-entity shares summed over all windows.
  ShareTable thread_totals() const { return sum_over_windows(&AttributionReport::per_thread); }
  ShareTable application_totals() const { return sum_over_windows(&AttributionReport::per_application); }

 private:
  ShareTable sum_over_windows(ShareTable AttributionReport::*table) const {
    std::map<EntityId, std::map<EntityId, std::pair<ExactSum, ExactSum>>> acc;
    for (const auto& w : windows) {
      for (const auto& [id, comps] : w.*table) {
        for (const auto& [cid, share] : comps) {
          auto& [a, i] = acc[id][cid];
          a.add(share.active_j);
          i.add(share.idle_j);
        }
      }
    }
    ShareTable out;
    for (const auto& [id, comps] : acc) {
      for (const auto& [cid, sums] : comps) out[id][cid] = {sums.first.value(), sums.second.value()};
    }
    return out;
  }
};

/// Conservation breaches over every window, prefixed with the window index.
inline std::vector<std::string> check_conservation(const RunResult& result, double rel_tolerance = 1e-9) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < result.windows.size(); ++i) {
    for (const auto& b : check_conservation(result.windows[i], rel_tolerance)) {
      out.push_back("window " + std::to_string(i) + ": " + b);
    }
  }
  return out;
}

namespace detail {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The exception of the
/// lowest failing index is rethrown.
template <typename Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn fn) {
  const std::size_t workers = std::min<std::size_t>(std::max(1u, jobs), n);
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

/// Attributes every window of the store's energy timeline.
///
/// Windows tile the span over which every sensed component has samples,
/// starting at the latest first sample and ending at the earliest last one.
inline RunResult run_attribution(const MeasurementStore& store, const Topology& topology,
                                 const std::map<EntityId, LogicalEntity>& logical_entities,
                                 const RunOptions& options) {
  options.params.validate();
  if (options.window_ns <= 0) throw Error(ErrorCode::kArgument, "window length must be positive");

  constexpr Nanos kLo = std::numeric_limits<Nanos>::min() / 4;
  constexpr Nanos kHi = std::numeric_limits<Nanos>::max() / 4;
  const auto samples =
      energy_series(store.query_window(kLo, kHi, QueryFilter{MetricName::kEnergyTotalJ, {}, {}}));
  const auto idle_w =
      idle_power_by_component(store.query_window(kLo, kHi, QueryFilter{MetricName::kPowerIdleW, {}, {}}));
  if (samples.empty()) throw Error(ErrorCode::kSemantic, "no energy samples to attribute");

  RunResult result;
  result.window_ns = options.window_ns;
  result.params = options.params;
  result.t_start = kLo;
  result.t_stop = kHi;
  for (const auto& [cid, series] : samples) {
    const PhysicalEntity& c = topology.at(cid);
    if (c.kind != PhysicalKind::kCpuPackage && c.kind != PhysicalKind::kDramNode) {
      throw Error(ErrorCode::kKind, "energy sampled on '" + cid + "', which is not a package or DRAM node");
    }
    result.components[cid] = c.kind;
    result.t_start = std::max(result.t_start, series.front().t);
    result.t_stop = std::min(result.t_stop, series.back().t);
  }
  if (result.t_start >= result.t_stop) {
    throw Error(ErrorCode::kSemantic, "energy samples of all components share no time span");
  }

  const auto counters = store.query_window(result.t_start, result.t_stop);
  IntervalSet intervals = build_intervals(counters, topology);
  result.warnings = std::move(intervals.warnings);
  const std::vector<SubInterval> subs = split_smt(intervals.intervals, topology);

  // Sub-intervals ordered by start time, with a running maximum of their
  // ends, make each window's candidates a contiguous range.
  std::vector<std::size_t> by_start(subs.size());
  for (std::size_t i = 0; i < subs.size(); ++i) by_start[i] = i;
  std::stable_sort(by_start.begin(), by_start.end(),
                   [&](std::size_t a, std::size_t b) { return subs[a].t_start < subs[b].t_start; });
  Nanos longest = 0;
  for (const auto& s : subs) longest = std::max(longest, duration(s));

  const auto bounds = tile_windows(result.t_start, result.t_stop, options.window_ns);
  result.windows.resize(bounds.size());
  detail::parallel_for(bounds.size(), options.jobs, [&](std::size_t w) {
    const auto [t0, t1] = bounds[w];
    auto first = std::partition_point(by_start.begin(), by_start.end(),
                                      [&](std::size_t i) { return subs[i].t_start < t0 - longest; });
    std::vector<SubInterval> candidates;
    for (auto it = first; it != by_start.end() && subs[*it].t_start < t1; ++it) {
      candidates.push_back(subs[*it]);
    }
    std::sort(candidates.begin(), candidates.end(), [](const SubInterval& a, const SubInterval& b) {
      return std::tie(a.core_id, a.t_start, a.thread_id) < std::tie(b.core_id, b.t_start, b.thread_id);
    });
    Window window = compute_window(samples, idle_w, t0, t1);
    window.partial = t1 - t0 < options.window_ns;
    result.windows[w] =
        attribute_window(clip_to_window(candidates, t0, t1), window, topology, options.params, logical_entities);
  });
  return result;
}

/// Loads a parsed trace into an in-memory store and attributes it.
inline RunResult run_attribution(const TraceData& trace, const RunOptions& options) {
  InMemoryStore store;
  store.append(trace.measurements);
  return run_attribution(store, trace.topology, trace.logical_index(), options);
}

}  // namespace metrion
