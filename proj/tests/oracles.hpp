#pragma once

// Reference implementations used by the tests. Each one recomputes a result
// the slow, direct way: exact big-integer sums, per-microsecond occupancy
// grids, linear scans, and a transcription of the attribution equations
// without any of the library's indexing.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "metrion/metrion.hpp"

namespace oracle {

using boost::multiprecision::cpp_int;
using metrion::EntityId;
using metrion::Nanos;

// ---------------------------------------------------------------------------
// Exact summation: every double is an integer multiple of 2^-1074, so the sum
// is an exact big integer in those units, rounded once (to nearest, ties to
// even) at the end.

inline cpp_int to_units(double x) {
  if (x == 0.0) return 0;
  int exp = 0;
  const double frac = std::frexp(std::fabs(x), &exp);  // |x| = frac * 2^exp
  const auto mantissa = static_cast<std::uint64_t>(std::ldexp(frac, 53));
  cpp_int v = mantissa;
  v <<= static_cast<unsigned>(exp - 53 + 1074);
  return x < 0 ? cpp_int(-v) : v;
}

inline double from_units(const cpp_int& v) {
  if (v == 0) return 0.0;
  const bool negative = v < 0;
  const cpp_int mag = negative ? cpp_int(-v) : v;
  const unsigned top_bit = boost::multiprecision::msb(mag);
  double out;
  if (top_bit < 53) {
    out = std::ldexp(static_cast<double>(static_cast<std::uint64_t>(mag)), -1074);
  } else {
    const unsigned shift = top_bit - 52;
    cpp_int head = mag >> shift;
    const cpp_int rest = mag - (head << shift);
    const cpp_int half = cpp_int(1) << (shift - 1);
    if (rest > half || (rest == half && (head & 1) != 0)) head += 1;
    out = std::ldexp(static_cast<double>(static_cast<std::uint64_t>(head)), static_cast<int>(shift) - 1074);
  }
  return negative ? -out : out;
}

inline double exact_sum(const std::vector<double>& xs) {
  cpp_int acc = 0;
  for (double x : xs) acc += to_units(x);
  return from_units(acc);
}

/// floor(n * part / whole) in arbitrary precision.
inline std::uint64_t scaled_floor(std::uint64_t n, std::uint64_t part, std::uint64_t whole) {
  const cpp_int q = cpp_int(n) * part / whole;
  return static_cast<std::uint64_t>(q);
}

// ---------------------------------------------------------------------------
// Store: linear scan.

inline bool overlaps(const metrion::Measurement& m, Nanos t0, Nanos t1) {
  if (m.t_start == m.t_stop) return t0 <= m.t_start && m.t_start < t1;
  return std::max(m.t_start, t0) < std::min(m.t_stop, t1);
}

inline std::vector<metrion::Measurement> scan(const std::vector<metrion::Measurement>& all, Nanos t0, Nanos t1,
                                              const metrion::QueryFilter& f) {
  std::vector<metrion::Measurement> out;
  for (const auto& m : all) {
    if (!overlaps(m, t0, t1)) continue;
    if (f.metric && m.metric != *f.metric) continue;
    if (f.physical_entity_id && m.physical_entity_id != *f.physical_entity_id) continue;
    if (f.logical_entity_id && m.logical_entity_id != f.logical_entity_id) continue;
    out.push_back(m);
  }
  std::sort(out.begin(), out.end(), metrion::measurement_less);
  return out;
}

// ---------------------------------------------------------------------------
// Topology: siblings by shared physical core rather than by sibling lists.

inline bool same_physical_core(const metrion::Topology& topo, const EntityId& a, const EntityId& b) {
  if (a == b) return false;
  const auto& x = topo.at(a);
  const auto& y = topo.at(b);
  return x.parent_id == y.parent_id && x.physical_core_index == y.physical_core_index;
}

inline std::pair<EntityId, std::uint32_t> package_of(const metrion::Topology& topo, const EntityId& core) {
  for (const auto& e : topo.entities()) {
    if (e.id == core) {
      for (const auto& p : topo.entities()) {
        if (e.parent_id && p.id == *e.parent_id) return {p.id, p.socket_index};
      }
    }
  }
  throw std::runtime_error("no package for " + core);
}

// ---------------------------------------------------------------------------
// SMT labels on a 1 microsecond grid.

/// Checks sub-interval labels against per-core occupancy sampled every
/// `step` ns, and that every sampled instant of every interval is covered by
/// exactly one of its sub-intervals. Returns a description of each problem.
inline std::vector<std::string> sweep_check(const std::vector<metrion::ExecutionInterval>& intervals,
                                            const std::vector<metrion::SubInterval>& subs,
                                            const metrion::Topology& topo, Nanos step = 1000) {
  constexpr std::size_t kMaxProblems = 20;
  std::vector<std::string> problems;
  if (intervals.empty()) return problems;
  Nanos lo = intervals.front().t_in;
  Nanos hi = intervals.front().t_out;
  for (const auto& e : intervals) {
    lo = std::min(lo, e.t_in);
    hi = std::max(hi, e.t_out);
  }
  const Nanos first = (lo / step) * step;
  const std::size_t n = static_cast<std::size_t>((hi - first) / step + 1);
  std::map<EntityId, std::vector<char>> busy;
  for (const auto& e : intervals) {
    auto& row = busy[e.core_id];
    row.resize(n, 0);
    for (std::size_t k = 0; k < n; ++k) {
      const Nanos t = first + static_cast<Nanos>(k) * step;
      if (e.t_in <= t && t < e.t_out) row[k] = 1;
    }
  }
  auto co_scheduled = [&](const EntityId& core, std::size_t k) {
    for (const auto& [other, row] : busy) {
      if (same_physical_core(topo, core, other) && row[k]) return true;
    }
    return false;
  };
  std::vector<std::vector<int>> cover(intervals.size(), std::vector<int>(n, 0));
  for (const auto& s : subs) {
    if (s.parent >= intervals.size()) {
      problems.push_back("sub-interval with bad parent index");
      continue;
    }
    const auto k0 = static_cast<std::size_t>((s.t_start - first + step - 1) / step);
    for (std::size_t k = k0; k < n; ++k) {
      const Nanos t = first + static_cast<Nanos>(k) * step;
      if (t >= s.t_stop) break;
      ++cover[s.parent][k];
      if (co_scheduled(s.core_id, k) != s.smt_active) {
        problems.push_back("label of " + s.thread_id + "@" + s.core_id + " wrong at t=" + std::to_string(t));
        if (problems.size() >= kMaxProblems) return problems;
      }
    }
  }
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const Nanos t = first + static_cast<Nanos>(k) * step;
      const int want = intervals[i].t_in <= t && t < intervals[i].t_out ? 1 : 0;
      if (cover[i][k] != want) {
        problems.push_back("interval " + std::to_string(i) + " covered " + std::to_string(cover[i][k]) +
                           " times at t=" + std::to_string(t));
        if (problems.size() >= kMaxProblems) return problems;
      }
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Random inputs.

/// Random non-overlapping intervals on every logical core of `topo`, with
/// ns-resolution boundaries and counters up to 2^40.
inline std::vector<metrion::ExecutionInterval> random_schedule(std::mt19937_64& rng, const metrion::Topology& topo,
                                                               const std::vector<EntityId>& threads, Nanos horizon,
                                                               std::size_t max_per_core, bool big_counters) {
  std::vector<metrion::ExecutionInterval> out;
  std::uniform_int_distribution<Nanos> when(0, horizon);
  std::uniform_int_distribution<std::size_t> how_many(0, max_per_core);
  std::uniform_int_distribution<std::size_t> who(0, threads.size() - 1);
  std::uniform_int_distribution<std::uint64_t> count(0, big_counters ? (std::uint64_t{1} << 40) : 5000);
  const auto drams = topo.of_kind(metrion::PhysicalKind::kDramNode);
  for (const auto* core : topo.of_kind(metrion::PhysicalKind::kLogicalCore)) {
    std::vector<Nanos> points;
    const std::size_t k = how_many(rng);
    for (std::size_t i = 0; i < 2 * k; ++i) points.push_back(when(rng));
    std::sort(points.begin(), points.end());
    for (std::size_t i = 0; i + 1 < points.size(); i += 2) {
      if (points[i] == points[i + 1]) continue;
      metrion::ExecutionInterval e;
      e.thread_id = threads[who(rng)];
      e.core_id = core->id;
      e.t_in = points[i];
      e.t_out = points[i + 1];
      e.counters.mperf = count(rng) + 1;
      e.counters.aperf = e.counters.mperf / 2 + count(rng) % (e.counters.mperf + 1);
      e.counters.ucc = count(rng);
      for (const auto* d : drams) {
        if (rng() % 2) e.counters.dram_reads[d->id] = count(rng);
      }
      out.push_back(std::move(e));
    }
  }
  // A thread may not run on two cores at once.
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.t_in < b.t_in; });
  std::map<EntityId, Nanos> free_at;
  std::vector<metrion::ExecutionInterval> legal;
  for (auto& e : out) {
    auto it = free_at.find(e.thread_id);
    if (it != free_at.end() && it->second > e.t_in) continue;
    free_at[e.thread_id] = e.t_out;
    legal.push_back(std::move(e));
  }
  std::sort(legal.begin(), legal.end(), [](const auto& a, const auto& b) {
    return std::tie(a.core_id, a.t_in) < std::tie(b.core_id, b.t_in);
  });
  return legal;
}

/// Measurements describing `intervals`, in the shape a trace would carry.
inline std::vector<metrion::Measurement> to_measurements(const std::vector<metrion::ExecutionInterval>& intervals,
                                                         const metrion::Topology& topo) {
  using metrion::MetricName;
  std::vector<metrion::Measurement> out;
  for (const auto& e : intervals) {
    auto add = [&](MetricName m, const EntityId& where, std::uint64_t v) {
      out.push_back({where, m, e.thread_id, e.t_in, e.t_out, static_cast<double>(v)});
    };
    add(MetricName::kUccDelta, e.core_id, e.counters.ucc);
    add(MetricName::kAperfDelta, e.core_id, e.counters.aperf);
    add(MetricName::kMperfDelta, e.core_id, e.counters.mperf);
    const auto socket = package_of(topo, e.core_id).second;
    for (const auto& [node, n] : e.counters.dram_reads) {
      add(topo.at(node).socket_index == socket ? MetricName::kDramReadsLocal : MetricName::kDramReadsRemote, node, n);
    }
  }
  return out;
}

/// A small random trace: at most `max_threads` threads in up to three
/// applications, at most `max_intervals` execution intervals, random
/// cumulative energy samples and calibrations.
inline metrion::TraceData random_small_trace(std::mt19937_64& rng, std::size_t max_threads,
                                             std::size_t max_intervals) {
  using metrion::MetricName;
  metrion::TraceData t;
  const std::uint32_t sockets = 1 + rng() % 2;
  const std::uint32_t cores = 1 + rng() % 2;
  const std::uint32_t smt = 1 + rng() % 2;
  t.topology = metrion::make_regular_topology(sockets, cores, smt);
  const std::size_t n_threads = 1 + rng() % max_threads;
  const std::size_t n_apps = 1 + rng() % 3;
  std::vector<EntityId> threads;
  for (std::size_t a = 0; a < n_apps; ++a) {
    t.registry.push_back({"app" + std::to_string(a), metrion::LogicalKind::kApplication, std::nullopt, "a"});
  }
  for (std::size_t i = 0; i < n_threads; ++i) {
    threads.push_back("t" + std::to_string(i));
    t.registry.push_back({threads.back(), metrion::LogicalKind::kThread, "app" + std::to_string(i % n_apps), "t"});
  }
  const Nanos horizon = 1'000'000 + static_cast<Nanos>(rng() % 9'000'000);
  std::vector<metrion::ExecutionInterval> intervals;
  do {
    intervals = random_schedule(rng, t.topology, threads, horizon, 1 + rng() % 5, rng() % 2 == 0);
  } while (intervals.size() > max_intervals);
  t.measurements = to_measurements(intervals, t.topology);

  std::uniform_real_distribution<double> joules(0.0, 3.0);
  auto sensed = t.topology.of_kind(metrion::PhysicalKind::kCpuPackage);
  for (const auto* d : t.topology.of_kind(metrion::PhysicalKind::kDramNode)) sensed.push_back(d);
  for (const auto* c : sensed) {
    double reading = joules(rng) * 100;
    const double idle = joules(rng) * 20;  // watts; sometimes above the active draw
    t.measurements.push_back({c->id, MetricName::kPowerIdleW, std::nullopt, -1'000'000, 0, idle});
    const std::size_t samples = 2 + rng() % 5;
    std::vector<Nanos> at{0, horizon};
    for (std::size_t i = 2; i < samples; ++i) at.push_back(static_cast<Nanos>(rng() % static_cast<std::uint64_t>(horizon)));
    std::sort(at.begin(), at.end());
    at.erase(std::unique(at.begin(), at.end()), at.end());
    for (Nanos s : at) {
      reading += joules(rng) * 0.01;
      t.measurements.push_back({c->id, MetricName::kEnergyTotalJ, std::nullopt, s, s, reading});
    }
  }
  std::stable_sort(t.measurements.begin(), t.measurements.end(),
                   [](const auto& a, const auto& b) { return a.t_start < b.t_start; });
  return t;
}

/// A random simulator configuration within the given bounds.
inline metrion::SimConfig random_config(std::mt19937_64& rng, std::uint32_t max_sockets, std::uint32_t max_logical,
                                        std::size_t max_threads) {
  metrion::SimConfig c;
  c.seed = rng();
  c.sockets = 1 + static_cast<std::uint32_t>(rng() % max_sockets);
  c.smt_factor = 1 + static_cast<std::uint32_t>(rng() % 2);
  const std::uint32_t max_cores = std::max<std::uint32_t>(1, max_logical / (c.sockets * c.smt_factor));
  c.cores_per_socket = 1 + static_cast<std::uint32_t>(rng() % max_cores);
  c.duration_ns = 20'000'000 + static_cast<Nanos>(rng() % 30'000'000);
  c.calibration_ns = 10'000'000;
  c.quantum_ns = 500'000 + static_cast<Nanos>(rng() % 2'000'000);
  c.sample_period_ns = 2'000'000 + static_cast<Nanos>(rng() % 8'000'000);
  c.noise_rel_stddev = (rng() % 2) ? 0.0 : 0.02;
  c.mode = (rng() % 3 == 0) ? metrion::SimMode::kAdversarial : metrion::SimMode::kDefault;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n_threads = 1 + rng() % max_threads;
  const std::size_t n_apps = 1 + rng() % 4;
  for (std::size_t i = 0; i < n_threads; ++i) {
    metrion::ThreadSpec t;
    t.application = "app" + std::to_string(i % n_apps);
    t.thread = "t" + std::to_string(i);
    t.cpu_intensity = u(rng);
    t.dram_read_rate = u(rng) < 0.3 ? 0.0 : u(rng) * 5e7;
    t.dram_write_rate = u(rng) * 1e7;
    t.locality = u(rng);
    t.duty_cycle = 0.2 + 0.8 * u(rng);
    if (u(rng) < 0.5) t.frequency = {{0, 0.6 + u(rng)}, {c.duration_ns / 2, 0.6 + u(rng)}};
    c.threads.push_back(std::move(t));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Attribution equations, evaluated directly.

struct Piece {
  EntityId thread;
  EntityId core;
  Nanos a;
  Nanos b;
  bool smt;
  std::uint64_t ucc;
  std::uint64_t interval_aperf;
  std::uint64_t interval_mperf;
  std::map<EntityId, std::uint64_t> reads;
};

struct WindowResult {
  Nanos t0;
  Nanos t1;
  std::map<EntityId, metrion::ComponentEnergy> components;
  metrion::ShareTable threads;
  metrion::ShareTable applications;
  std::vector<metrion::Diagnostic> diagnostics;
};

inline double reading(const std::vector<std::pair<Nanos, double>>& s, Nanos t) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i].first == t) return s[i].second;
    if (i > 0 && s[i - 1].first < t && t < s[i].first) {
      const double frac = static_cast<double>(t - s[i - 1].first) / static_cast<double>(s[i].first - s[i - 1].first);
      return s[i - 1].second + (s[i].second - s[i - 1].second) * frac;
    }
  }
  throw std::runtime_error("unbracketed reading");
}

/// Direct evaluation over every window of `trace`.
inline std::vector<WindowResult> brute_force(const metrion::TraceData& trace, Nanos window_ns,
                                             const metrion::ModelParams& params) {
  using metrion::MetricName;
  const auto& topo = trace.topology;

  // Execution intervals: one per distinct (thread, span), counters summed.
  struct Interval {
    EntityId thread;
    EntityId core;
    Nanos t_in;
    Nanos t_out;
    std::uint64_t ucc = 0, aperf = 0, mperf = 0;
    std::map<EntityId, std::uint64_t> reads;
  };
  std::vector<Interval> intervals;
  for (const auto& m : trace.measurements) {
    if (!metrion::is_thread_counter(m.metric) || m.t_start == m.t_stop) continue;
    Interval* found = nullptr;
    for (auto& e : intervals) {
      if (e.thread == *m.logical_entity_id && e.t_in == m.t_start && e.t_out == m.t_stop) found = &e;
    }
    if (found == nullptr) {
      intervals.push_back({*m.logical_entity_id, "", m.t_start, m.t_stop, 0, 0, 0, {}});
      found = &intervals.back();
    }
    const auto v = static_cast<std::uint64_t>(m.value);
    if (m.metric == MetricName::kUccDelta) found->ucc += v, found->core = m.physical_entity_id;
    if (m.metric == MetricName::kAperfDelta) found->aperf += v, found->core = m.physical_entity_id;
    if (m.metric == MetricName::kMperfDelta) found->mperf += v, found->core = m.physical_entity_id;
    if (metrion::is_dram_counter(m.metric)) found->reads[m.physical_entity_id] += v;
  }

  // Sub-intervals: cut at every sibling boundary inside the interval;
  // counters floored by duration with the remainder on the last piece.
  std::vector<Piece> subs;
  for (const auto& e : intervals) {
    std::set<Nanos> cuts{e.t_in, e.t_out};
    for (const auto& o : intervals) {
      if (!same_physical_core(topo, e.core, o.core)) continue;
      for (Nanos t : {o.t_in, o.t_out}) {
        if (e.t_in < t && t < e.t_out) cuts.insert(t);
      }
    }
    const std::vector<Nanos> c(cuts.begin(), cuts.end());
    const auto whole = static_cast<std::uint64_t>(e.t_out - e.t_in);
    auto share = [&](std::uint64_t n, std::size_t k) {
      if (k + 1 < c.size() - 1) return scaled_floor(n, static_cast<std::uint64_t>(c[k + 1] - c[k]), whole);
      std::uint64_t given = 0;
      for (std::size_t j = 0; j + 2 < c.size(); ++j) {
        given += scaled_floor(n, static_cast<std::uint64_t>(c[j + 1] - c[j]), whole);
      }
      return n - given;
    };
    for (std::size_t k = 0; k + 1 < c.size(); ++k) {
      Piece p{e.thread, e.core, c[k], c[k + 1], false, share(e.ucc, k), e.aperf, e.mperf, {}};
      for (const auto& o : intervals) {
        if (same_physical_core(topo, e.core, o.core) && o.t_in < p.b && o.t_out > p.a) p.smt = true;
      }
      for (const auto& [node, n] : e.reads) p.reads[node] = share(n, k);
      subs.push_back(std::move(p));
    }
  }

  std::map<EntityId, std::vector<std::pair<Nanos, double>>> samples;
  std::map<EntityId, std::pair<Nanos, double>> idle_w;
  for (const auto& m : trace.measurements) {
    if (m.metric == MetricName::kEnergyTotalJ) samples[m.physical_entity_id].push_back({m.t_start, m.value});
    if (m.metric == MetricName::kPowerIdleW) {
      auto it = idle_w.find(m.physical_entity_id);
      if (it == idle_w.end() || m.t_stop >= it->second.first) idle_w[m.physical_entity_id] = {m.t_stop, m.value};
    }
  }
  Nanos begin = std::numeric_limits<Nanos>::min();
  Nanos end = std::numeric_limits<Nanos>::max();
  for (auto& [_, s] : samples) {
    std::stable_sort(s.begin(), s.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
    begin = std::max(begin, s.front().first);
    end = std::min(end, s.back().first);
  }
  std::map<EntityId, EntityId> app_of;
  for (const auto& e : trace.registry) {
    if (e.parent_id) app_of[e.id] = *e.parent_id;
  }

  std::vector<WindowResult> out;
  for (Nanos t0 = begin; t0 < end; t0 += window_ns) {
    const Nanos t1 = std::min(t0 + window_ns, end);
    WindowResult w{t0, t1, {}, {}, {}, {}};

    std::vector<Piece> in;
    for (const auto& s : subs) {
      const Nanos a = std::max(s.a, t0);
      const Nanos b = std::min(s.b, t1);
      if (a >= b) continue;
      const auto whole = static_cast<std::uint64_t>(s.b - s.a);
      auto piece = [&](std::uint64_t n) {
        return scaled_floor(n, static_cast<std::uint64_t>(b - s.a), whole) -
               scaled_floor(n, static_cast<std::uint64_t>(a - s.a), whole);
      };
      Piece p = s;
      p.a = a;
      p.b = b;
      p.ucc = piece(s.ucc);
      for (auto& [_, n] : p.reads) n = piece(n);
      in.push_back(std::move(p));
    }

    std::vector<metrion::Diagnostic> active_diag;
    std::vector<metrion::Diagnostic> idle_diag;
    std::map<std::pair<EntityId, EntityId>, std::vector<double>> active_terms;
    std::map<std::pair<EntityId, EntityId>, std::vector<double>> idle_terms;
    for (const auto& [cid, series] : samples) {
      metrion::ComponentEnergy ce;
      ce.total_j = reading(series, t1) - reading(series, t0);
      ce.idle_j = idle_w.at(cid).second * (static_cast<double>(t1 - t0) / metrion::kNanosPerSecond);
      ce.raw_active_j = ce.total_j - ce.idle_j;
      ce.active_j = ce.raw_active_j > 0 ? ce.raw_active_j : 0.0;
      ce.clamped = ce.raw_active_j <= 0 && ce.idle_j > 0;
      w.components[cid] = ce;
      const auto& comp = topo.at(cid);
      const bool is_cpu = comp.kind == metrion::PhysicalKind::kCpuPackage;

      std::vector<double> work;
      for (const auto& p : in) {
        const auto [pkg, socket] = package_of(topo, p.core);
        double v = 0.0;
        if (is_cpu) {
          if (pkg == cid) {
            const double ratio = p.interval_mperf == 0 ? 1.0
                                                       : static_cast<double>(p.interval_aperf) /
                                                             static_cast<double>(p.interval_mperf);
            v = static_cast<double>(p.ucc) * ratio * (p.smt ? params.smt_sigma : 1.0);
          }
        } else if (auto it = p.reads.find(cid); it != p.reads.end() && it->second > 0) {
          v = static_cast<double>(it->second) * (socket == comp.socket_index ? params.gamma_local : params.gamma_remote);
        }
        work.push_back(v);
      }
      const double total = exact_sum(work);
      if (total == 0.0) {
        if (ce.active_j > metrion::kResidualEpsilonJ) {
          active_diag.push_back({metrion::DiagnosticKind::kUnattributedActive, cid, ce.active_j});
        }
      } else {
        for (std::size_t i = 0; i < in.size(); ++i) {
          if (work[i] != 0.0) active_terms[{in[i].thread, cid}].push_back(work[i] / total * ce.active_j);
        }
      }

      if (is_cpu) {
        std::int64_t busy = 0;
        for (const auto& p : in) {
          if (package_of(topo, p.core).first == cid) busy += p.b - p.a;
        }
        if (busy == 0) {
          if (ce.idle_j > metrion::kResidualEpsilonJ) idle_diag.push_back({metrion::DiagnosticKind::kUnattributedIdle, cid, ce.idle_j});
        } else {
          for (const auto& p : in) {
            if (package_of(topo, p.core).first != cid) continue;
            idle_terms[{p.thread, cid}].push_back(static_cast<double>(p.b - p.a) / static_cast<double>(busy) * ce.idle_j);
          }
        }
      } else {
        std::set<EntityId> readers;
        for (const auto& p : in) {
          if (auto it = p.reads.find(cid); it != p.reads.end() && it->second > 0) readers.insert(p.thread);
        }
        if (readers.empty()) {
          if (ce.idle_j > metrion::kResidualEpsilonJ) idle_diag.push_back({metrion::DiagnosticKind::kUnattributedIdle, cid, ce.idle_j});
        } else {
          for (const auto& r : readers) idle_terms[{r, cid}] = {ce.idle_j / static_cast<double>(readers.size())};
        }
      }
    }

    for (const auto& [key, terms] : active_terms) w.threads[key.first][key.second].active_j = exact_sum(terms);
    for (const auto& [key, terms] : idle_terms) w.threads[key.first][key.second].idle_j = exact_sum(terms);
    std::map<std::pair<EntityId, EntityId>, std::pair<std::vector<double>, std::vector<double>>> by_app;
    for (const auto& [tid, comps] : w.threads) {
      for (const auto& [cid, s] : comps) {
        auto& [a, i] = by_app[{app_of.at(tid), cid}];
        a.push_back(s.active_j);
        i.push_back(s.idle_j);
      }
    }
    for (const auto& [key, v] : by_app) w.applications[key.first][key.second] = {exact_sum(v.first), exact_sum(v.second)};
    for (const auto& [cid, ce] : w.components) {
      if (ce.clamped) w.diagnostics.push_back({metrion::DiagnosticKind::kClamp, cid, ce.raw_active_j});
    }
    w.diagnostics.insert(w.diagnostics.end(), active_diag.begin(), active_diag.end());
    w.diagnostics.insert(w.diagnostics.end(), idle_diag.begin(), idle_diag.end());
    out.push_back(std::move(w));
  }
  return out;
}

/// Differences between a pipeline result and the direct evaluation; empty
/// when they agree bit for bit.
inline std::vector<std::string> compare(const metrion::RunResult& got, const std::vector<WindowResult>& want) {
  std::vector<std::string> diffs;
  if (got.windows.size() != want.size()) {
    diffs.push_back("window count " + std::to_string(got.windows.size()) + " vs " + std::to_string(want.size()));
    return diffs;
  }
  for (std::size_t i = 0; i < want.size(); ++i) {
    const auto& g = got.windows[i];
    const auto& w = want[i];
    const std::string at = "window " + std::to_string(i) + ": ";
    if (g.window.t_start != w.t0 || g.window.t_stop != w.t1) diffs.push_back(at + "bounds");
    for (const auto& [cid, ce] : w.components) {
      auto it = g.window.components.find(cid);
      if (it == g.window.components.end() || it->second.total_j != ce.total_j || it->second.idle_j != ce.idle_j ||
          it->second.active_j != ce.active_j || it->second.clamped != ce.clamped) {
        diffs.push_back(at + "component energy of " + cid);
      }
    }
    if (g.per_thread != w.threads) diffs.push_back(at + "thread shares");
    if (g.per_application != w.applications) diffs.push_back(at + "application shares");
    if (g.diagnostics != w.diagnostics) diffs.push_back(at + "diagnostics");
  }
  return diffs;
}

}  // namespace oracle
