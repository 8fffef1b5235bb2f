#pragma once

// Energy attribution: component energy per window is split into idle and
// active parts, active energy is distributed by work share, idle energy by
// time share (CPU) or equally among active threads (DRAM), and thread
// results roll up to applications.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "metrion/core_model.hpp"
#include "metrion/error.hpp"
#include "metrion/exact_sum.hpp"
#include "metrion/interval_engine.hpp"

namespace metrion {

struct ModelParams {
  double smt_sigma = 1.15;
  double gamma_remote = 9.67;
  double gamma_local = 1.0;

  void validate() const {
    if (!(smt_sigma >= 1.0) || !std::isfinite(smt_sigma)) {
      throw Error(ErrorCode::kArgument, "smt_sigma must be >= 1");
    }
    if (!(gamma_local > 0.0) || !(gamma_remote >= gamma_local) || !std::isfinite(gamma_remote)) {
      throw Error(ErrorCode::kArgument, "gamma_remote must be >= gamma_local > 0");
    }
  }
};

/// Cumulative energy counter reading.
struct EnergySample {
  Nanos t = 0;
  double cumulative_j = 0.0;
};

struct ComponentEnergy {
  double total_j = 0.0;
  double idle_j = 0.0;
  double active_j = 0.0;
  /// total_j - idle_j before clamping at zero.
  double raw_active_j = 0.0;
  bool clamped = false;
};

struct Window {
  Nanos t_start = 0;
  Nanos t_stop = 0;
  std::map<EntityId, ComponentEnergy> components;
  /// Set for a trailing window shorter than the configured length.
  bool partial = false;

  double seconds() const { return static_cast<double>(t_stop - t_start) / kNanosPerSecond; }
};

enum class DiagnosticKind { kClamp, kUnattributedActive, kUnattributedIdle };

inline std::string_view to_string(DiagnosticKind k) {
  switch (k) {
    case DiagnosticKind::kClamp: return "clamp";
    case DiagnosticKind::kUnattributedActive: return "unattributed_active";
    case DiagnosticKind::kUnattributedIdle: return "unattributed_idle";
  }
  return "?";
}

struct Diagnostic {
  DiagnosticKind kind;
  EntityId component;
  double joules = 0.0;

  bool operator==(const Diagnostic&) const = default;
};

/// (thread id, component id) -> joules.
using ThreadComponentJoules = std::map<std::pair<EntityId, EntityId>, double>;

struct Distribution {
  ThreadComponentJoules joules;
  std::vector<Diagnostic> diagnostics;
};

struct EnergyShare {
  double active_j = 0.0;
  double idle_j = 0.0;

  double total_j() const { return active_j + idle_j; }
  bool operator==(const EnergyShare&) const = default;
};

/// entity id -> component id -> share.
using ShareTable = std::map<EntityId, std::map<EntityId, EnergyShare>>;

struct AttributionReport {
  Window window;
  ShareTable per_thread;
  ShareTable per_application;
  std::vector<Diagnostic> diagnostics;

  /// Sum over components of active plus idle energy.
  double application_total(const EntityId& app) const {
    ExactSum sum;
    auto it = per_application.find(app);
    if (it == per_application.end()) return 0.0;
    for (const auto& [_, share] : it->second) {
      sum.add(share.active_j);
      sum.add(share.idle_j);
    }
    return sum.value();
  }
};

// Residual energy below this is treated as nothing left to attribute.
inline constexpr double kResidualEpsilonJ = 1e-12;

// ---------------------------------------------------------------------------
// Work functions

inline bool on_package(const SubInterval& sub, const PhysicalEntity& package,
                       const Topology& topology) {
  return resolve_location(sub.core_id, topology).package_id == package.id;
}

/// Frequency-scaled, SMT-weighted unhalted cycles of `sub` on `package`;
/// zero when the sub-interval ran on another package. The frequency ratio is
/// that of the execution interval the sub-interval belongs to.
inline double cpu_work(const SubInterval& sub, const PhysicalEntity& package,
                       const Topology& topology, const ModelParams& params) {
  if (package.kind != PhysicalKind::kCpuPackage) {
    throw Error(ErrorCode::kKind, "'" + package.id + "' is not a CpuPackage");
  }
  if (!on_package(sub, package, topology)) return 0.0;
  double ratio = 1.0;
  if (sub.interval_mperf == 0) {
    if (sub.interval_aperf != 0) {
      throw Error(ErrorCode::kDegenerateCounter,
                  "interval of '" + sub.thread_id + "' on '" + sub.core_id +
                      "' has APERF delta without MPERF delta");
    }
  } else {
    ratio = static_cast<double>(sub.interval_aperf) / static_cast<double>(sub.interval_mperf);
  }
  const double sigma = sub.smt_active ? params.smt_sigma : 1.0;
  return static_cast<double>(sub.counters.ucc) * ratio * sigma;
}

/// Reads served by `dram`, weighted by locality of the issuing core.
inline double dram_work(const SubInterval& sub, const PhysicalEntity& dram,
                        const Topology& topology, const ModelParams& params) {
  if (dram.kind != PhysicalKind::kDramNode) {
    throw Error(ErrorCode::kKind, "'" + dram.id + "' is not a DramNode");
  }
  for (const auto& [node, _] : sub.counters.dram_reads) {
    const PhysicalEntity* e = topology.find(node);
    if (e == nullptr || e->kind != PhysicalKind::kDramNode) {
      throw Error(ErrorCode::kUnknownComponent, "reads recorded against unknown DRAM node '" + node + "'");
    }
  }
  auto it = sub.counters.dram_reads.find(dram.id);
  if (it == sub.counters.dram_reads.end() || it->second == 0) return 0.0;
  const bool local = resolve_location(sub.core_id, topology).socket_index == dram.socket_index;
  return static_cast<double>(it->second) * (local ? params.gamma_local : params.gamma_remote);
}

inline double component_work(const SubInterval& sub, const PhysicalEntity& component,
                             const Topology& topology, const ModelParams& params) {
  return component.kind == PhysicalKind::kDramNode ? dram_work(sub, component, topology, params)
                                                   : cpu_work(sub, component, topology, params);
}

// ---------------------------------------------------------------------------
// Distribution

/// Splits each component's active energy over sub-intervals in proportion to
/// their work on that component and sums per thread.
inline Distribution attribute_active(const std::vector<SubInterval>& subs, const Window& window,
                                     const Topology& topology, const ModelParams& params) {
  Distribution out;
  std::vector<double> work(subs.size());
  for (const auto& [cid, energy] : window.components) {
    const PhysicalEntity& component = topology.at(cid);
    ExactSum total;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      work[i] = component_work(subs[i], component, topology, params);
      total.add(work[i]);
    }
    const double total_work = total.value();
    if (total_work == 0.0) {
      if (energy.active_j > kResidualEpsilonJ) {
        out.diagnostics.push_back({DiagnosticKind::kUnattributedActive, cid, energy.active_j});
      }
      continue;
    }
    std::map<EntityId, ExactSum> per_thread;
    for (std::size_t i = 0; i < subs.size(); ++i) {
      if (work[i] == 0.0) continue;
      per_thread[subs[i].thread_id].add(work[i] / total_work * energy.active_j);
    }
    for (const auto& [tid, sum] : per_thread) out.joules[{tid, cid}] = sum.value();
  }
  return out;
}

/// CPU packages: idle energy by each sub-interval's share of busy time on the
/// package. DRAM nodes: equal shares for every thread that issued reads to
/// the node during the window, one share per thread.
inline Distribution attribute_idle(const std::vector<SubInterval>& subs, const Window& window,
                                   const Topology& topology) {
  Distribution out;
  for (const auto& [cid, energy] : window.components) {
    const PhysicalEntity& component = topology.at(cid);
    if (component.kind == PhysicalKind::kCpuPackage) {
      std::int64_t busy = 0;
      std::vector<Nanos> time(subs.size(), 0);
      for (std::size_t i = 0; i < subs.size(); ++i) {
        if (on_package(subs[i], component, topology)) time[i] = duration(subs[i]);
        busy += time[i];
      }
      if (busy == 0) {
        if (energy.idle_j > kResidualEpsilonJ) {
          out.diagnostics.push_back({DiagnosticKind::kUnattributedIdle, cid, energy.idle_j});
        }
        continue;
      }
      std::map<EntityId, ExactSum> per_thread;
      for (std::size_t i = 0; i < subs.size(); ++i) {
        if (time[i] == 0) continue;
        per_thread[subs[i].thread_id].add(static_cast<double>(time[i]) /
                                          static_cast<double>(busy) * energy.idle_j);
      }
      for (const auto& [tid, sum] : per_thread) out.joules[{tid, cid}] = sum.value();
    } else if (component.kind == PhysicalKind::kDramNode) {
      std::set<EntityId> active;
      for (const auto& sub : subs) {
        auto it = sub.counters.dram_reads.find(cid);
        if (it != sub.counters.dram_reads.end() && it->second > 0) active.insert(sub.thread_id);
      }
      if (active.empty()) {
        if (energy.idle_j > kResidualEpsilonJ) {
          out.diagnostics.push_back({DiagnosticKind::kUnattributedIdle, cid, energy.idle_j});
        }
        continue;
      }
      const double share = energy.idle_j / static_cast<double>(active.size());
      for (const auto& tid : active) out.joules[{tid, cid}] = share;
    } else {
      throw Error(ErrorCode::kKind, "'" + cid + "' is not an energy-sensed component");
    }
  }
  return out;
}

/// Combines per-thread active and idle energy and rolls threads up to their
/// applications.
inline AttributionReport aggregate(const Window& window, const Distribution& active,
                                   const Distribution& idle,
                                   const std::map<EntityId, LogicalEntity>& logical_entities) {
  AttributionReport report;
  report.window = window;
  for (const auto& [key, j] : active.joules) report.per_thread[key.first][key.second].active_j = j;
  for (const auto& [key, j] : idle.joules) report.per_thread[key.first][key.second].idle_j = j;

  std::map<EntityId, std::map<EntityId, std::pair<ExactSum, ExactSum>>> sums;
  for (const auto& [tid, components] : report.per_thread) {
    auto it = logical_entities.find(tid);
    if (it == logical_entities.end() || it->second.kind != LogicalKind::kThread ||
        !it->second.parent_id) {
      throw Error(ErrorCode::kOrphanThread, "thread '" + tid + "' has no parent application");
    }
    auto parent = logical_entities.find(*it->second.parent_id);
    if (parent == logical_entities.end() || parent->second.kind != LogicalKind::kApplication) {
      throw Error(ErrorCode::kOrphanThread,
                  "thread '" + tid + "' names missing application '" + *it->second.parent_id + "'");
    }
    for (const auto& [cid, share] : components) {
      auto& [a, i] = sums[parent->first][cid];
      a.add(share.active_j);
      i.add(share.idle_j);
    }
  }
  for (const auto& [aid, components] : sums) {
    for (const auto& [cid, pair] : components) {
      report.per_application[aid][cid] = {pair.first.value(), pair.second.value()};
    }
  }

  for (const auto& [cid, energy] : window.components) {
    if (energy.clamped) report.diagnostics.push_back({DiagnosticKind::kClamp, cid, energy.raw_active_j});
  }
  report.diagnostics.insert(report.diagnostics.end(), active.diagnostics.begin(),
                            active.diagnostics.end());
  report.diagnostics.insert(report.diagnostics.end(), idle.diagnostics.begin(),
                            idle.diagnostics.end());
  return report;
}

// ---------------------------------------------------------------------------
// Windows

namespace detail {

inline double reading_at(const std::vector<EnergySample>& samples, Nanos t, const EntityId& cid) {
  if (samples.empty() || t < samples.front().t || t > samples.back().t) {
    throw Error(ErrorCode::kArgument, "no energy samples for '" + cid + "' bracket t=" +
                                          std::to_string(t));
  }
  auto hi = std::lower_bound(samples.begin(), samples.end(), t,
                             [](const EnergySample& s, Nanos v) { return s.t < v; });
  if (hi->t == t) return hi->cumulative_j;
  auto lo = std::prev(hi);
  const double frac = static_cast<double>(t - lo->t) / static_cast<double>(hi->t - lo->t);
  return lo->cumulative_j + (hi->cumulative_j - lo->cumulative_j) * frac;
}

}  // namespace detail

/// Total, idle, and active energy per component over [t_start, t_stop).
/// `samples` must be sorted by time; readings are linearly interpolated
/// between the samples bracketing each boundary.
inline Window compute_window(const std::map<EntityId, std::vector<EnergySample>>& samples,
                             const std::map<EntityId, double>& idle_power_w, Nanos t_start,
                             Nanos t_stop) {
  if (t_start >= t_stop) throw Error(ErrorCode::kArgument, "window must have t_start < t_stop");
  Window w;
  w.t_start = t_start;
  w.t_stop = t_stop;
  for (const auto& [cid, series] : samples) {
    for (std::size_t i = 1; i < series.size(); ++i) {
      if (series[i].t < series[i - 1].t) {
        throw Error(ErrorCode::kArgument, "energy samples for '" + cid + "' are not time-ordered");
      }
      if (series[i].cumulative_j < series[i - 1].cumulative_j) {
        throw Error(ErrorCode::kCounterRegression,
                    "cumulative energy of '" + cid + "' decreases at t=" + std::to_string(series[i].t));
      }
    }
    auto idle = idle_power_w.find(cid);
    if (idle == idle_power_w.end()) {
      throw Error(ErrorCode::kArgument, "no idle power calibrated for '" + cid + "'");
    }
    ComponentEnergy e;
    e.total_j = detail::reading_at(series, t_stop, cid) - detail::reading_at(series, t_start, cid);
    e.idle_j = idle->second * w.seconds();
    e.raw_active_j = e.total_j - e.idle_j;
    e.active_j = std::max(0.0, e.raw_active_j);
    e.clamped = e.raw_active_j <= 0.0 && e.idle_j > 0.0;
    w.components.emplace(cid, e);
  }
  return w;
}

/// Fixed-length tiling of [t_begin, t_end); the last window may be shorter
/// and is flagged partial.
inline std::vector<std::pair<Nanos, Nanos>> tile_windows(Nanos t_begin, Nanos t_end, Nanos length) {
  if (length <= 0) throw Error(ErrorCode::kArgument, "window length must be positive");
  std::vector<std::pair<Nanos, Nanos>> out;
  for (Nanos t = t_begin; t < t_end; t += length) out.emplace_back(t, std::min(t + length, t_end));
  return out;
}

/// Full attribution of one window from the sub-intervals that fall in it.
inline AttributionReport attribute_window(const std::vector<SubInterval>& subs, const Window& window,
                                          const Topology& topology, const ModelParams& params,
                                          const std::map<EntityId, LogicalEntity>& logical_entities) {
  const Distribution active = attribute_active(subs, window, topology, params);
  const Distribution idle = attribute_idle(subs, window, topology);
  return aggregate(window, active, idle, logical_entities);
}

/// Checks that attributed energy adds back to the window's energy for every
/// component that had activity. Returns one message per breach.
inline std::vector<std::string> check_conservation(const AttributionReport& report,
                                                   double rel_tolerance = 1e-9) {
  std::vector<std::string> breaches;
  auto unattributed = [&](DiagnosticKind kind, const EntityId& cid) {
    return std::any_of(report.diagnostics.begin(), report.diagnostics.end(),
                       [&](const Diagnostic& d) { return d.kind == kind && d.component == cid; });
  };
  auto close = [&](double got, double want) {
    return std::fabs(got - want) <= rel_tolerance * std::max(std::fabs(want), kResidualEpsilonJ);
  };
  for (const auto& [cid, energy] : report.window.components) {
    ExactSum active;
    ExactSum idle;
    for (const auto& [_, components] : report.per_thread) {
      auto it = components.find(cid);
      if (it == components.end()) continue;
      active.add(it->second.active_j);
      idle.add(it->second.idle_j);
    }
    if (!unattributed(DiagnosticKind::kUnattributedActive, cid) && energy.active_j > kResidualEpsilonJ &&
        !close(active.value(), energy.active_j)) {
      breaches.push_back("active energy of '" + cid + "' not conserved");
    }
    if (!unattributed(DiagnosticKind::kUnattributedIdle, cid) && energy.idle_j > kResidualEpsilonJ &&
        !close(idle.value(), energy.idle_j)) {
      breaches.push_back("idle energy of '" + cid + "' not conserved");
    }
  }
  return breaches;
}

}  // namespace metrion
