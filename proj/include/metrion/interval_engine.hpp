#pragma once

// Execution intervals reconstructed from per-thread counter measurements, and
// their SMT-aware split into sub-intervals.

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "metrion/core_model.hpp"
#include "metrion/error.hpp"

namespace metrion {

/// Hardware counter deltas carried by an interval or a share of one.
struct CounterDeltas {
  std::uint64_t ucc = 0;
  std::uint64_t aperf = 0;
  std::uint64_t mperf = 0;
  /// DRAM node id -> serviced reads.
  std::map<EntityId, std::uint64_t> dram_reads;

  bool operator==(const CounterDeltas&) const = default;
};

/// One scheduled-in/out span of a thread on a logical core, [t_in, t_out).
struct ExecutionInterval {
  EntityId thread_id;
  EntityId core_id;
  Nanos t_in = 0;
  Nanos t_out = 0;
  CounterDeltas counters;

  Nanos duration() const { return t_out - t_in; }
  bool operator==(const ExecutionInterval&) const = default;
};

/// A piece of an execution interval during which the set of busy SMT
/// siblings does not change.
struct SubInterval {
  std::size_t parent = 0;  // index into the interval collection it came from
  EntityId thread_id;
  EntityId core_id;
  Nanos t_start = 0;
  Nanos t_stop = 0;
  bool smt_active = false;
  CounterDeltas counters;
  /// APERF/MPERF deltas of the whole execution interval; the frequency ratio
  /// is a property of the interval, not of its prorated pieces.
  std::uint64_t interval_aperf = 0;
  std::uint64_t interval_mperf = 0;

  bool operator==(const SubInterval&) const = default;
};

inline Nanos duration(const SubInterval& sub) { return sub.t_stop - sub.t_start; }

struct IntervalSet {
  std::vector<ExecutionInterval> intervals;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::uint64_t as_count(const Measurement& m) {
  if (m.value < 0.0 || m.value != static_cast<double>(static_cast<std::uint64_t>(m.value))) {
    throw Error(ErrorCode::kSemantic, std::string(to_string(m.metric)) + " on '" +
                                          m.physical_entity_id + "' is not a whole count");
  }
  return static_cast<std::uint64_t>(m.value);
}

inline std::string describe(const ExecutionInterval& e) {
  return e.thread_id + "@" + e.core_id + "[" + std::to_string(e.t_in) + "," +
         std::to_string(e.t_out) + ")";
}

/// floor(delta * part / whole) without overflow.
inline std::uint64_t scale_floor(std::uint64_t delta, std::uint64_t part, std::uint64_t whole) {
  const auto product = static_cast<unsigned __int128>(delta) * part;
  return static_cast<std::uint64_t>(product / whole);
}

/// Time-proportional split of `delta` over pieces of the given durations.
/// Floors every share and hands the remainder to the last piece.
inline std::vector<std::uint64_t> prorate(std::uint64_t delta, const std::vector<Nanos>& durations) {
  std::uint64_t whole = 0;
  for (Nanos d : durations) whole += static_cast<std::uint64_t>(d);
  std::vector<std::uint64_t> shares(durations.size(), 0);
  if (durations.empty()) return shares;
  std::uint64_t assigned = 0;
  for (std::size_t i = 0; i + 1 < durations.size(); ++i) {
    shares[i] = scale_floor(delta, static_cast<std::uint64_t>(durations[i]), whole);
    assigned += shares[i];
  }
  shares.back() = delta - assigned;
  return shares;
}

}  // namespace detail

/// Groups per-thread counter measurements into execution intervals.
///
/// A span is identified by (thread, t_start, t_stop); the core counters
/// (UCC/APERF/MPERF) name the logical core, DRAM read counters attach to the
/// span with the same key. Energy and idle-power measurements are ignored.
/// Result is sorted by (core_id, t_in).
inline IntervalSet build_intervals(const std::vector<Measurement>& measurements,
                                   const Topology& topology) {
  using Key = std::tuple<EntityId, Nanos, Nanos>;
  std::map<Key, ExecutionInterval> spans;
  std::vector<const Measurement*> dram;
  IntervalSet out;
  std::size_t dropped = 0;

  for (const auto& m : measurements) {
    if (!is_thread_counter(m.metric)) continue;
    if (!m.logical_entity_id) {
      throw Error(ErrorCode::kSemantic, std::string(to_string(m.metric)) + " on '" +
                                            m.physical_entity_id + "' has no thread");
    }
    if (m.t_start > m.t_stop) {
      throw Error(ErrorCode::kSemantic, "measurement on '" + m.physical_entity_id +
                                            "' ends before it starts");
    }
    if (m.t_start == m.t_stop) {
      ++dropped;
      continue;
    }
    if (is_dram_counter(m.metric)) {
      dram.push_back(&m);
      continue;
    }
    const PhysicalEntity& core = topology.at(m.physical_entity_id);
    if (core.kind != PhysicalKind::kLogicalCore) {
      throw Error(ErrorCode::kKind, std::string(to_string(m.metric)) + " recorded on non-core '" +
                                        core.id + "'");
    }
    Key key{*m.logical_entity_id, m.t_start, m.t_stop};
    auto [it, inserted] = spans.try_emplace(key);
    ExecutionInterval& e = it->second;
    if (inserted) {
      e.thread_id = *m.logical_entity_id;
      e.core_id = m.physical_entity_id;
      e.t_in = m.t_start;
      e.t_out = m.t_stop;
    } else if (e.core_id != m.physical_entity_id) {
      throw Error(ErrorCode::kConflict, "span " + detail::describe(e) + " reports counters on both '" +
                                            e.core_id + "' and '" + m.physical_entity_id + "'");
    }
    const std::uint64_t v = detail::as_count(m);
    switch (m.metric) {
      case MetricName::kUccDelta: e.counters.ucc += v; break;
      case MetricName::kAperfDelta: e.counters.aperf += v; break;
      case MetricName::kMperfDelta: e.counters.mperf += v; break;
      default: break;
    }
  }

  for (const Measurement* m : dram) {
    auto it = spans.find(Key{*m->logical_entity_id, m->t_start, m->t_stop});
    if (it == spans.end()) {
      throw Error(ErrorCode::kOrphanMeasurement,
                  std::string(to_string(m->metric)) + " for thread '" + *m->logical_entity_id +
                      "' over [" + std::to_string(m->t_start) + "," + std::to_string(m->t_stop) +
                      ") has no matching execution span");
    }
    const PhysicalEntity& node = topology.at(m->physical_entity_id);
    if (node.kind != PhysicalKind::kDramNode) {
      throw Error(ErrorCode::kKind, "DRAM reads recorded on non-DRAM entity '" + node.id + "'");
    }
    const bool local = resolve_location(it->second.core_id, topology).socket_index == node.socket_index;
    if (local != (m->metric == MetricName::kDramReadsLocal)) {
      throw Error(ErrorCode::kSemantic, std::string(to_string(m->metric)) + " on '" + node.id +
                                            "' contradicts the locality of core '" +
                                            it->second.core_id + "'");
    }
    it->second.counters.dram_reads[node.id] += detail::as_count(*m);
  }

  out.intervals.reserve(spans.size());
  for (auto& [_, e] : spans) out.intervals.push_back(std::move(e));
  std::sort(out.intervals.begin(), out.intervals.end(), [](const auto& a, const auto& b) {
    return std::tie(a.core_id, a.t_in, a.thread_id) < std::tie(b.core_id, b.t_in, b.thread_id);
  });

  // One thread per logical core at a time.
  for (std::size_t i = 0; i < out.intervals.size();) {
    std::size_t j = i;
    std::size_t latest = i;
    for (++j; j < out.intervals.size() && out.intervals[j].core_id == out.intervals[i].core_id; ++j) {
      if (out.intervals[j].t_in < out.intervals[latest].t_out) {
        throw Error(ErrorCode::kConflict, "overlapping execution intervals " +
                                              detail::describe(out.intervals[latest]) + " and " +
                                              detail::describe(out.intervals[j]));
      }
      if (out.intervals[j].t_out > out.intervals[latest].t_out) latest = j;
    }
    i = j;
  }

  if (dropped > 0) {
    out.warnings.push_back("dropped " + std::to_string(dropped) +
                           " zero-duration counter measurement(s)");
  }
  return out;
}

/// Splits every interval at each instant a sibling logical core is scheduled
/// in or out, labels pieces that overlap a busy sibling as smt_active, and
/// prorates counters by duration. Output is ordered by
/// (core_id, t_start, thread_id); `parent` indexes into `intervals`.
inline std::vector<SubInterval> split_smt(const std::vector<ExecutionInterval>& intervals,
                                          const Topology& topology) {
  std::map<EntityId, std::vector<std::size_t>> by_core;
  for (std::size_t i = 0; i < intervals.size(); ++i) by_core[intervals[i].core_id].push_back(i);
  for (auto& [_, idx] : by_core) {
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return intervals[a].t_in < intervals[b].t_in; });
  }

  std::vector<SubInterval> out;
  std::vector<const ExecutionInterval*> overlapping;
  std::vector<Nanos> cuts;
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    const ExecutionInterval& e = intervals[i];
    if (e.t_out <= e.t_in) continue;

    overlapping.clear();
    const PhysicalEntity* core = topology.find(e.core_id);
    if (core == nullptr) throw Error(ErrorCode::kLookup, "unknown core '" + e.core_id + "'");
    for (const auto& sibling : core->smt_sibling_ids) {
      auto it = by_core.find(sibling);
      if (it == by_core.end()) continue;
      const auto& idx = it->second;
      // Intervals on one core are disjoint, so ordering by t_in also orders t_out.
      auto first = std::partition_point(idx.begin(), idx.end(), [&](std::size_t k) {
        return intervals[k].t_out <= e.t_in;
      });
      for (auto k = first; k != idx.end() && intervals[*k].t_in < e.t_out; ++k) {
        overlapping.push_back(&intervals[*k]);
      }
    }

    cuts.assign({e.t_in, e.t_out});
    for (const auto* s : overlapping) {
      if (s->t_in > e.t_in && s->t_in < e.t_out) cuts.push_back(s->t_in);
      if (s->t_out > e.t_in && s->t_out < e.t_out) cuts.push_back(s->t_out);
    }
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    std::vector<Nanos> durations;
    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) durations.push_back(cuts[k + 1] - cuts[k]);
    const auto ucc = detail::prorate(e.counters.ucc, durations);
    const auto aperf = detail::prorate(e.counters.aperf, durations);
    const auto mperf = detail::prorate(e.counters.mperf, durations);
    std::map<EntityId, std::vector<std::uint64_t>> reads;
    for (const auto& [node, n] : e.counters.dram_reads) reads[node] = detail::prorate(n, durations);

    for (std::size_t k = 0; k + 1 < cuts.size(); ++k) {
      SubInterval sub;
      sub.parent = i;
      sub.thread_id = e.thread_id;
      sub.core_id = e.core_id;
      sub.t_start = cuts[k];
      sub.t_stop = cuts[k + 1];
      sub.smt_active = std::any_of(overlapping.begin(), overlapping.end(), [&](const auto* s) {
        return s->t_in < sub.t_stop && s->t_out > sub.t_start;
      });
      sub.counters.ucc = ucc[k];
      sub.counters.aperf = aperf[k];
      sub.counters.mperf = mperf[k];
      sub.interval_aperf = e.counters.aperf;
      sub.interval_mperf = e.counters.mperf;
      for (const auto& [node, shares] : reads) sub.counters.dram_reads[node] = shares[k];
      out.push_back(std::move(sub));
    }
  }

  std::sort(out.begin(), out.end(), [](const SubInterval& a, const SubInterval& b) {
    return std::tie(a.core_id, a.t_start, a.thread_id) < std::tie(b.core_id, b.t_start, b.thread_id);
  });
  return out;
}

/// Restricts sub-intervals to [t_start, t_stop). A piece covering [a, b) of a
/// sub-interval [s, e) gets floor(n*(b-s)/(e-s)) - floor(n*(a-s)/(e-s)) of
/// each counter n, so the pieces of one sub-interval across any window grid
/// sum back to n exactly.
inline std::vector<SubInterval> clip_to_window(const std::vector<SubInterval>& subs, Nanos t_start,
                                               Nanos t_stop) {
  std::vector<SubInterval> out;
  for (const auto& sub : subs) {
    const Nanos a = std::max(sub.t_start, t_start);
    const Nanos b = std::min(sub.t_stop, t_stop);
    if (a >= b) continue;
    if (a == sub.t_start && b == sub.t_stop) {
      out.push_back(sub);
      continue;
    }
    const auto whole = static_cast<std::uint64_t>(sub.t_stop - sub.t_start);
    const auto lo = static_cast<std::uint64_t>(a - sub.t_start);
    const auto hi = static_cast<std::uint64_t>(b - sub.t_start);
    auto piece = [&](std::uint64_t n) {
      return detail::scale_floor(n, hi, whole) - detail::scale_floor(n, lo, whole);
    };
    SubInterval p = sub;
    p.t_start = a;
    p.t_stop = b;
    p.counters.ucc = piece(sub.counters.ucc);
    p.counters.aperf = piece(sub.counters.aperf);
    p.counters.mperf = piece(sub.counters.mperf);
    for (auto& [node, n] : p.counters.dram_reads) n = piece(n);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace metrion
