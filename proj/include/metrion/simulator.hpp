#pragma once

// Synthetic workloads with known ground truth. The simulator schedules
// threads onto a regular multi-socket SMT machine, derives their counter
// deltas from configured profiles, charges each thread energy according to a
// work-proportional power model, and emits both a trace and a ledger of the
// energy it charged.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "metrion/core_model.hpp"
#include "metrion/error.hpp"
#include "metrion/exact_sum.hpp"
#include "metrion/ingestion.hpp"

namespace metrion {

struct FrequencyStep {
  Nanos t = 0;  // relative to workload start
  double ratio = 1.0;

  bool operator==(const FrequencyStep&) const = default;
};

struct ThreadSpec {
  EntityId application;
  EntityId thread;
  /// Fraction of scheduled time the core is unhalted.
  double cpu_intensity = 1.0;
  /// DRAM reads per second of scheduled time.
  double dram_read_rate = 0.0;
  /// Fraction of reads served by the socket-local DRAM node.
  double locality = 1.0;
  /// Probability of being runnable in a scheduling quantum.
  double duty_cycle = 1.0;
  /// Piecewise-constant APERF/MPERF ratio; ratio 1 when empty.
  std::vector<FrequencyStep> frequency;
  /// Logical core the thread is pinned to; free placement otherwise.
  std::optional<EntityId> core;
  /// DRAM writes per second (adversarial mode only; never counted).
  double dram_write_rate = 0.0;

  bool operator==(const ThreadSpec&) const = default;
};

enum class SimMode { kDefault, kAdversarial };

struct SimConfig {
  std::uint64_t seed = 1;
  SimMode mode = SimMode::kDefault;
  std::uint32_t sockets = 1;
  std::uint32_t cores_per_socket = 2;
  std::uint32_t smt_factor = 2;
  Nanos duration_ns = kNanosPerSecond;
  Nanos calibration_ns = kNanosPerSecond;
  Nanos quantum_ns = 1'000'000;
  Nanos sample_period_ns = 10'000'000;
  /// Scheduling spans are shortened at both ends by up to this fraction of a quantum.
  double jitter_fraction = 0.25;
  double base_frequency_hz = 2.1e9;
  double package_idle_w = 10.0;
  double dram_idle_w = 2.0;
  std::map<EntityId, double> idle_w_overrides;
  double cpu_joules_per_work = 5e-9;
  double dram_joules_per_work = 1e-7;
  double smt_sigma = 1.15;
  double gamma_remote = 9.67;
  /// Relative standard deviation of multiplicative noise on each sensor increment.
  double noise_rel_stddev = 0.0;
  // Adversarial-mode energy that the counters do not see.
  double dram_joules_per_write = 1e-7;
  double uncore_joules_per_read = 2e-8;
  std::vector<ThreadSpec> threads;

  bool operator==(const SimConfig&) const = default;
};

/// Energy the simulator charged, per ledger window (one sensor sample period).
struct LedgerWindow {
  Nanos t_start = 0;
  Nanos t_stop = 0;
  struct Component {
    double idle_j = 0.0;
    double active_j = 0.0;
    double total_j = 0.0;
    /// Sensor delta minus total_j.
    double noise_j = 0.0;
  };
  std::map<EntityId, Component> components;
  /// thread -> component -> true active joules
  std::map<EntityId, std::map<EntityId, double>> threads;
};

struct GroundTruthLedger {
  std::uint64_t seed = 0;
  SimMode mode = SimMode::kDefault;
  Nanos window_ns = 0;
  Nanos t_start = 0;
  Nanos t_stop = 0;
  /// application -> its threads
  std::map<EntityId, std::vector<EntityId>> applications;
  std::vector<LedgerWindow> windows;

  /// Whole-run active joules per (thread, component).
  std::map<EntityId, std::map<EntityId, double>> thread_totals() const {
    std::map<EntityId, std::map<EntityId, ExactSum>> acc;
    for (const auto& w : windows) {
      for (const auto& [tid, comps] : w.threads) {
        for (const auto& [cid, j] : comps) acc[tid][cid].add(j);
      }
    }
    std::map<EntityId, std::map<EntityId, double>> out;
    for (const auto& [tid, comps] : acc) {
      for (const auto& [cid, s] : comps) out[tid][cid] = s.value();
    }
    return out;
  }

  /// Whole-run active joules per (application, component).
  std::map<EntityId, std::map<EntityId, double>> application_totals() const {
    const auto per_thread = thread_totals();
    std::map<EntityId, std::map<EntityId, ExactSum>> acc;
    for (const auto& [aid, tids] : applications) {
      acc[aid];
      for (const auto& tid : tids) {
        auto it = per_thread.find(tid);
        if (it == per_thread.end()) continue;
        for (const auto& [cid, j] : it->second) acc[aid][cid].add(j);
      }
    }
    std::map<EntityId, std::map<EntityId, double>> out;
    for (const auto& [aid, comps] : acc) {
      out[aid];
      for (const auto& [cid, s] : comps) out[aid][cid] = s.value();
    }
    return out;
  }
};

/// One span the simulator's scheduler placed, as logged by the scheduler.
struct ScheduledSpan {
  EntityId thread_id;
  EntityId core_id;
  Nanos t_in = 0;
  Nanos t_out = 0;
};

struct SimResult {
  std::string trace_text;
  TraceData trace;
  GroundTruthLedger ledger;
  std::vector<ScheduledSpan> schedule;
};

// ---------------------------------------------------------------------------
// Config validation and JSON

inline std::string_view to_string(SimMode m) {
  return m == SimMode::kDefault ? "default" : "adversarial";
}

inline void validate_config(const SimConfig& c) {
  auto bad = [](const std::string& msg) { throw Error(ErrorCode::kConfig, msg); };
  if (c.sockets < 1 || c.cores_per_socket < 1 || c.smt_factor < 1) bad("topology sizes must be >= 1");
  if (c.duration_ns <= 0) bad("duration_ns must be positive");
  if (c.calibration_ns <= 0) bad("calibration_ns must be positive");
  if (c.quantum_ns <= 0) bad("quantum_ns must be positive");
  if (c.sample_period_ns <= 0) bad("sample_period_ns must be positive");
  if (!(c.jitter_fraction >= 0.0 && c.jitter_fraction < 0.5)) bad("jitter_fraction must be in [0, 0.5)");
  auto non_negative = [&](double v, const std::string& what) {
    if (!(v >= 0.0) || !std::isfinite(v)) bad(what + " must be finite and non-negative");
  };
  non_negative(c.base_frequency_hz, "base_frequency_hz");
  non_negative(c.package_idle_w, "package_idle_w");
  non_negative(c.dram_idle_w, "dram_idle_w");
  non_negative(c.cpu_joules_per_work, "cpu_joules_per_work");
  non_negative(c.dram_joules_per_work, "dram_joules_per_work");
  non_negative(c.noise_rel_stddev, "noise_rel_stddev");
  non_negative(c.dram_joules_per_write, "dram_joules_per_write");
  non_negative(c.uncore_joules_per_read, "uncore_joules_per_read");
  if (!(c.smt_sigma >= 1.0)) bad("smt_sigma must be >= 1");
  if (!(c.gamma_remote >= 1.0)) bad("gamma_remote must be >= 1");

  const Topology topology = make_regular_topology(c.sockets, c.cores_per_socket, c.smt_factor);
  for (const auto& [id, w] : c.idle_w_overrides) {
    const PhysicalEntity* e = topology.find(id);
    if (e == nullptr || e->kind == PhysicalKind::kLogicalCore) bad("idle override for unknown component '" + id + "'");
    non_negative(w, "idle override for '" + id + "'");
  }

  std::set<EntityId> thread_ids;
  std::set<EntityId> app_ids;
  std::map<EntityId, EntityId> pinned;
  for (const auto& t : c.threads) {
    if (t.thread.empty() || t.application.empty()) bad("thread and application ids must be non-empty");
    if (!thread_ids.insert(t.thread).second) bad("duplicate thread id '" + t.thread + "'");
    app_ids.insert(t.application);
    if (!(t.cpu_intensity >= 0.0 && t.cpu_intensity <= 1.0)) bad("cpu_intensity of '" + t.thread + "' must be in [0,1]");
    non_negative(t.dram_read_rate, "dram_read_rate of '" + t.thread + "'");
    non_negative(t.dram_write_rate, "dram_write_rate of '" + t.thread + "'");
    if (!(t.locality >= 0.0 && t.locality <= 1.0)) bad("locality of '" + t.thread + "' must be in [0,1]");
    if (!(t.duty_cycle >= 0.0 && t.duty_cycle <= 1.0)) bad("duty_cycle of '" + t.thread + "' must be in [0,1]");
    for (std::size_t i = 0; i < t.frequency.size(); ++i) {
      if (!(t.frequency[i].ratio > 0.0) || !std::isfinite(t.frequency[i].ratio)) {
        bad("frequency ratios of '" + t.thread + "' must be positive");
      }
      if (i > 0 && t.frequency[i].t <= t.frequency[i - 1].t) {
        bad("frequency steps of '" + t.thread + "' must be strictly increasing in time");
      }
    }
    if (t.core) {
      const PhysicalEntity* core = topology.find(*t.core);
      if (core == nullptr || core->kind != PhysicalKind::kLogicalCore) {
        bad("thread '" + t.thread + "' pinned to unknown logical core '" + *t.core + "'");
      }
      auto [it, inserted] = pinned.emplace(*t.core, t.thread);
      if (!inserted) {
        bad("threads '" + it->second + "' and '" + t.thread + "' are both pinned to '" + *t.core +
            "': one thread per logical core");
      }
    }
  }
  for (const auto& t : c.threads) {
    if (thread_ids.count(t.application)) bad("id '" + t.application + "' is both a thread and an application");
  }
}

namespace detail {

inline nlohmann::ordered_json to_json(const ThreadSpec& t) {
  nlohmann::ordered_json j;
  j["application"] = t.application;
  j["thread"] = t.thread;
  j["cpu_intensity"] = t.cpu_intensity;
  j["dram_read_rate"] = t.dram_read_rate;
  j["locality"] = t.locality;
  j["duty_cycle"] = t.duty_cycle;
  j["frequency"] = nlohmann::ordered_json::array();
  for (const auto& s : t.frequency) j["frequency"].push_back({{"t", s.t}, {"ratio", s.ratio}});
  j["core"] = t.core ? nlohmann::ordered_json(*t.core) : nlohmann::ordered_json();
  j["dram_write_rate"] = t.dram_write_rate;
  return j;
}

inline ThreadSpec thread_spec_from_json(const nlohmann::json& j) {
  constexpr std::string_view what = "thread spec";
  reject_unknown_fields(j,
                        {"application", "thread", "cpu_intensity", "dram_read_rate", "locality",
                         "duty_cycle", "frequency", "core", "dram_write_rate"},
                        what);
  ThreadSpec t;
  t.application = required<std::string>(j, "application", what);
  t.thread = required<std::string>(j, "thread", what);
  t.cpu_intensity = optional_field<double>(j, "cpu_intensity", t.cpu_intensity, what);
  t.dram_read_rate = optional_field<double>(j, "dram_read_rate", t.dram_read_rate, what);
  t.locality = optional_field<double>(j, "locality", t.locality, what);
  t.duty_cycle = optional_field<double>(j, "duty_cycle", t.duty_cycle, what);
  t.dram_write_rate = optional_field<double>(j, "dram_write_rate", t.dram_write_rate, what);
  t.core = optional_id(j, "core", what);
  if (auto it = j.find("frequency"); it != j.end() && !it->is_null()) {
    if (!it->is_array()) throw Error(ErrorCode::kParse, "frequency must be an array");
    for (const auto& s : *it) {
      reject_unknown_fields(s, {"t", "ratio"}, "frequency step");
      t.frequency.push_back({required<Nanos>(s, "t", "frequency step"),
                             required<double>(s, "ratio", "frequency step")});
    }
  }
  return t;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const SimConfig& c) {
  nlohmann::ordered_json j;
  j["seed"] = c.seed;
  j["mode"] = to_string(c.mode);
  j["topology"] = {{"sockets", c.sockets},
                   {"cores_per_socket", c.cores_per_socket},
                   {"smt_factor", c.smt_factor}};
  j["duration_ns"] = c.duration_ns;
  j["calibration_ns"] = c.calibration_ns;
  j["quantum_ns"] = c.quantum_ns;
  j["sample_period_ns"] = c.sample_period_ns;
  j["jitter_fraction"] = c.jitter_fraction;
  j["base_frequency_hz"] = c.base_frequency_hz;
  j["package_idle_w"] = c.package_idle_w;
  j["dram_idle_w"] = c.dram_idle_w;
  j["idle_w_overrides"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : c.idle_w_overrides) j["idle_w_overrides"][k] = v;
  j["cpu_joules_per_work"] = c.cpu_joules_per_work;
  j["dram_joules_per_work"] = c.dram_joules_per_work;
  j["smt_sigma"] = c.smt_sigma;
  j["gamma_remote"] = c.gamma_remote;
  j["noise_rel_stddev"] = c.noise_rel_stddev;
  j["dram_joules_per_write"] = c.dram_joules_per_write;
  j["uncore_joules_per_read"] = c.uncore_joules_per_read;
  j["threads"] = nlohmann::ordered_json::array();
  for (const auto& t : c.threads) j["threads"].push_back(detail::to_json(t));
  return j;
}

/// Parses and validates a SimConfig document. Any problem is a config error.
inline SimConfig sim_config_from_json(const nlohmann::json& j) {
  constexpr std::string_view what = "simulation config";
  SimConfig c;
  try {
    detail::reject_unknown_fields(
        j,
        {"seed", "mode", "topology", "duration_ns", "calibration_ns", "quantum_ns",
         "sample_period_ns", "jitter_fraction", "base_frequency_hz", "package_idle_w",
         "dram_idle_w", "idle_w_overrides", "cpu_joules_per_work", "dram_joules_per_work",
         "smt_sigma", "gamma_remote", "noise_rel_stddev", "dram_joules_per_write",
         "uncore_joules_per_read", "threads"},
        what);
    using detail::optional_field;
    c.seed = detail::required<std::uint64_t>(j, "seed", what);
    const auto mode = optional_field<std::string>(j, "mode", "default", what);
    if (mode == "default") c.mode = SimMode::kDefault;
    else if (mode == "adversarial") c.mode = SimMode::kAdversarial;
    else throw Error(ErrorCode::kConfig, "unknown mode '" + mode + "'");
    const auto& topo = j.at("topology");
    detail::reject_unknown_fields(topo, {"sockets", "cores_per_socket", "smt_factor"}, "topology");
    c.sockets = detail::required<std::uint32_t>(topo, "sockets", "topology");
    c.cores_per_socket = detail::required<std::uint32_t>(topo, "cores_per_socket", "topology");
    c.smt_factor = detail::required<std::uint32_t>(topo, "smt_factor", "topology");
    c.duration_ns = detail::required<Nanos>(j, "duration_ns", what);
    c.calibration_ns = optional_field<Nanos>(j, "calibration_ns", c.calibration_ns, what);
    c.quantum_ns = optional_field<Nanos>(j, "quantum_ns", c.quantum_ns, what);
    c.sample_period_ns = optional_field<Nanos>(j, "sample_period_ns", c.sample_period_ns, what);
    c.jitter_fraction = optional_field<double>(j, "jitter_fraction", c.jitter_fraction, what);
    c.base_frequency_hz = optional_field<double>(j, "base_frequency_hz", c.base_frequency_hz, what);
    c.package_idle_w = optional_field<double>(j, "package_idle_w", c.package_idle_w, what);
    c.dram_idle_w = optional_field<double>(j, "dram_idle_w", c.dram_idle_w, what);
    c.idle_w_overrides = optional_field<std::map<std::string, double>>(j, "idle_w_overrides", {}, what);
    c.cpu_joules_per_work = optional_field<double>(j, "cpu_joules_per_work", c.cpu_joules_per_work, what);
    c.dram_joules_per_work = optional_field<double>(j, "dram_joules_per_work", c.dram_joules_per_work, what);
    c.smt_sigma = optional_field<double>(j, "smt_sigma", c.smt_sigma, what);
    c.gamma_remote = optional_field<double>(j, "gamma_remote", c.gamma_remote, what);
    c.noise_rel_stddev = optional_field<double>(j, "noise_rel_stddev", c.noise_rel_stddev, what);
    c.dram_joules_per_write = optional_field<double>(j, "dram_joules_per_write", c.dram_joules_per_write, what);
    c.uncore_joules_per_read = optional_field<double>(j, "uncore_joules_per_read", c.uncore_joules_per_read, what);
    const auto& threads = j.at("threads");
    if (!threads.is_array()) throw Error(ErrorCode::kConfig, "threads must be an array");
    for (const auto& t : threads) c.threads.push_back(detail::thread_spec_from_json(t));
  } catch (const Error& e) {
    throw Error(ErrorCode::kConfig, e.detail());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, e.what());
  }
  validate_config(c);
  return c;
}

inline nlohmann::ordered_json to_json(const GroundTruthLedger& l) {
  nlohmann::ordered_json j;
  j["format"] = "metrion-ledger/1";
  j["seed"] = l.seed;
  j["mode"] = to_string(l.mode);
  j["window_ns"] = l.window_ns;
  j["t_start"] = l.t_start;
  j["t_stop"] = l.t_stop;
  j["applications"] = nlohmann::ordered_json::object();
  for (const auto& [aid, tids] : l.applications) j["applications"][aid] = tids;
  j["windows"] = nlohmann::ordered_json::array();
  for (const auto& w : l.windows) {
    nlohmann::ordered_json wj;
    wj["t_start"] = w.t_start;
    wj["t_stop"] = w.t_stop;
    wj["components"] = nlohmann::ordered_json::object();
    for (const auto& [cid, c] : w.components) {
      wj["components"][cid] = {{"idle_j", c.idle_j},
                               {"active_j", c.active_j},
                               {"total_j", c.total_j},
                               {"noise_j", c.noise_j}};
    }
    wj["threads"] = nlohmann::ordered_json::object();
    for (const auto& [tid, comps] : w.threads) {
      wj["threads"][tid] = nlohmann::ordered_json::object();
      for (const auto& [cid, v] : comps) wj["threads"][tid][cid] = v;
    }
    j["windows"].push_back(std::move(wj));
  }
  return j;
}

inline GroundTruthLedger ledger_from_json(const nlohmann::json& j) {
  constexpr std::string_view what = "ledger";
  try {
    detail::reject_unknown_fields(
        j, {"format", "seed", "mode", "window_ns", "t_start", "t_stop", "applications", "windows"},
        what);
    if (detail::required<std::string>(j, "format", what) != "metrion-ledger/1") {
      throw Error(ErrorCode::kVersioning, "unsupported ledger format");
    }
    GroundTruthLedger l;
    l.seed = detail::required<std::uint64_t>(j, "seed", what);
    l.mode = detail::required<std::string>(j, "mode", what) == "adversarial" ? SimMode::kAdversarial
                                                                             : SimMode::kDefault;
    l.window_ns = detail::required<Nanos>(j, "window_ns", what);
    l.t_start = detail::required<Nanos>(j, "t_start", what);
    l.t_stop = detail::required<Nanos>(j, "t_stop", what);
    l.applications = j.at("applications").get<std::map<std::string, std::vector<std::string>>>();
    for (const auto& wj : j.at("windows")) {
      detail::reject_unknown_fields(wj, {"t_start", "t_stop", "components", "threads"}, "ledger window");
      LedgerWindow w;
      w.t_start = detail::required<Nanos>(wj, "t_start", "ledger window");
      w.t_stop = detail::required<Nanos>(wj, "t_stop", "ledger window");
      for (const auto& [cid, cj] : wj.at("components").items()) {
        detail::reject_unknown_fields(cj, {"idle_j", "active_j", "total_j", "noise_j"}, "ledger component");
        w.components[cid] = {cj.at("idle_j").get<double>(), cj.at("active_j").get<double>(),
                             cj.at("total_j").get<double>(), cj.at("noise_j").get<double>()};
      }
      w.threads = wj.at("threads").get<std::map<std::string, std::map<std::string, double>>>();
      l.windows.push_back(std::move(w));
    }
    return l;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("malformed ledger: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Simulation

namespace detail {

struct SimSpan {
  std::size_t thread = 0;
  std::size_t core = 0;
  Nanos t_in = 0;
  Nanos t_out = 0;
  std::uint64_t ucc = 0;
  std::uint64_t aperf = 0;
  std::uint64_t mperf = 0;
  std::map<EntityId, std::uint64_t> reads;
  std::map<EntityId, std::uint64_t> writes;
};

inline double ratio_at(const ThreadSpec& t, Nanos rel) {
  double r = 1.0;
  for (const auto& s : t.frequency) {
    if (s.t <= rel) r = s.ratio;
  }
  return r;
}

inline std::uint64_t round_count(double x) {
  return x <= 0.0 ? 0 : static_cast<std::uint64_t>(std::llround(x));
}

/// Splits `total` events of a thread on `socket` between the local node and
/// the remote nodes (evenly, remainder to the lowest socket).
inline std::map<EntityId, std::uint64_t> place_accesses(std::uint64_t total, double locality,
                                                        std::uint32_t socket,
                                                        std::uint32_t sockets) {
  std::map<EntityId, std::uint64_t> out;
  if (total == 0) return out;
  const std::uint64_t local = sockets == 1 ? total : round_count(static_cast<double>(total) * locality);
  if (local > 0) out["dram" + std::to_string(socket)] = local;
  std::uint64_t remote = total - local;
  if (remote == 0) return out;
  const std::uint64_t others = sockets - 1;
  const std::uint64_t each = remote / others;
  std::uint64_t extra = remote % others;
  for (std::uint32_t s = 0; s < sockets; ++s) {
    if (s == socket) continue;
    const std::uint64_t n = each + (extra > 0 ? 1 : 0);
    if (extra > 0) --extra;
    if (n > 0) out["dram" + std::to_string(s)] = n;
  }
  return out;
}

/// Length of the union of `segments` (sorted by start) inside [a, b).
inline Nanos covered(const std::vector<std::pair<Nanos, Nanos>>& segments, Nanos a, Nanos b) {
  Nanos len = 0;
  for (const auto& [s, e] : segments) {
    const Nanos lo = std::max(s, a);
    const Nanos hi = std::min(e, b);
    if (hi > lo) len += hi - lo;
  }
  return len;
}

}  // namespace detail

/// Runs one simulation. Deterministic for a fixed config (including seed).
inline SimResult simulate(const SimConfig& config) {
  validate_config(config);
  const Topology topology = make_regular_topology(config.sockets, config.cores_per_socket, config.smt_factor);
  const auto cores = topology.of_kind(PhysicalKind::kLogicalCore);
  std::map<EntityId, std::size_t> core_index;
  for (std::size_t i = 0; i < cores.size(); ++i) core_index[cores[i]->id] = i;

  const Nanos w0 = config.calibration_ns;
  const Nanos w_end = w0 + config.duration_ns;
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Scheduling: per quantum, runnable pinned threads take their core, the
  // rest land on random free cores or wait.
  std::vector<detail::SimSpan> spans;
  std::vector<std::size_t> free_cores;
  for (Nanos qs = w0; qs < w_end; qs += config.quantum_ns) {
    const Nanos qe = std::min(qs + config.quantum_ns, w_end);
    std::vector<bool> busy(cores.size(), false);
    std::vector<std::size_t> runnable;
    for (std::size_t t = 0; t < config.threads.size(); ++t) {
      if (unit(rng) < config.threads[t].duty_cycle) runnable.push_back(t);
    }
    std::vector<std::pair<std::size_t, std::size_t>> placed;  // thread, core
    for (std::size_t t : runnable) {
      if (config.threads[t].core) {
        const std::size_t c = core_index.at(*config.threads[t].core);
        busy[c] = true;
        placed.emplace_back(t, c);
      }
    }
    free_cores.clear();
    for (std::size_t c = 0; c < cores.size(); ++c) {
      if (!busy[c]) free_cores.push_back(c);
    }
    for (std::size_t i = free_cores.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(free_cores[i - 1], free_cores[pick(rng)]);
    }
    std::size_t next_free = 0;
    for (std::size_t t : runnable) {
      if (config.threads[t].core) continue;
      if (next_free == free_cores.size()) break;
      placed.emplace_back(t, free_cores[next_free++]);
    }
    const Nanos jmax = static_cast<Nanos>(config.jitter_fraction * static_cast<double>(qe - qs));
    for (const auto& [t, c] : placed) {
      detail::SimSpan s;
      s.thread = t;
      s.core = c;
      s.t_in = qs + static_cast<Nanos>(unit(rng) * static_cast<double>(jmax));
      s.t_out = qe - static_cast<Nanos>(unit(rng) * static_cast<double>(jmax));
      if (s.t_out <= s.t_in) continue;
      spans.push_back(std::move(s));
    }
  }

  // Counters derived from the thread profile; rates are constant per span.
  for (auto& s : spans) {
    const ThreadSpec& spec = config.threads[s.thread];
    const double seconds = static_cast<double>(s.t_out - s.t_in) / kNanosPerSecond;
    const double ratio = detail::ratio_at(spec, s.t_in - w0);
    s.mperf = detail::round_count(config.base_frequency_hz * seconds * spec.cpu_intensity);
    s.aperf = detail::round_count(static_cast<double>(s.mperf) * ratio);
    s.ucc = s.aperf;
    const std::uint32_t socket = cores[s.core]->socket_index;
    s.reads = detail::place_accesses(detail::round_count(spec.dram_read_rate * seconds), spec.locality,
                                     socket, config.sockets);
    if (config.mode == SimMode::kAdversarial) {
      s.writes = detail::place_accesses(detail::round_count(spec.dram_write_rate * seconds),
                                        spec.locality, socket, config.sockets);
    }
  }

  // Ledger windows follow the sensor sample grid.
  std::vector<std::pair<Nanos, Nanos>> grid;
  for (Nanos t = w0; t < w_end; t += config.sample_period_ns) {
    grid.emplace_back(t, std::min(t + config.sample_period_ns, w_end));
  }
  using Acc = std::map<EntityId, std::map<EntityId, ExactSum>>;
  std::vector<Acc> charged(grid.size());

  // Sibling occupancy per span, from the simulator's own schedule.
  std::vector<std::vector<std::size_t>> by_core(cores.size());
  for (std::size_t i = 0; i < spans.size(); ++i) by_core[spans[i].core].push_back(i);

  for (const auto& s : spans) {
    const ThreadSpec& spec = config.threads[s.thread];
    const EntityId& tid = spec.thread;
    const PhysicalEntity& core = *cores[s.core];
    const EntityId package = *core.parent_id;

    std::vector<std::pair<Nanos, Nanos>> sibling_busy;
    for (const auto& sid : core.smt_sibling_ids) {
      for (std::size_t k : by_core[core_index.at(sid)]) {
        const Nanos lo = std::max(spans[k].t_in, s.t_in);
        const Nanos hi = std::min(spans[k].t_out, s.t_out);
        if (hi > lo) sibling_busy.emplace_back(lo, hi);
      }
    }
    std::sort(sibling_busy.begin(), sibling_busy.end());
    std::vector<std::pair<Nanos, Nanos>> merged;
    for (const auto& seg : sibling_busy) {
      if (!merged.empty() && seg.first <= merged.back().second) {
        merged.back().second = std::max(merged.back().second, seg.second);
      } else {
        merged.push_back(seg);
      }
    }

    const double span_ns = static_cast<double>(s.t_out - s.t_in);
    const double ratio = s.mperf == 0 ? 1.0 : static_cast<double>(s.aperf) / static_cast<double>(s.mperf);
    const double cpu_density = config.cpu_joules_per_work * static_cast<double>(s.ucc) * ratio / span_ns;
    std::uint64_t total_reads = 0;
    for (const auto& [_, n] : s.reads) total_reads += n;

    const auto first = std::upper_bound(grid.begin(), grid.end(), s.t_in,
                                        [](Nanos t, const auto& w) { return t < w.second; });
    for (auto w = first; w != grid.end() && w->first < s.t_out; ++w) {
      const Nanos a = std::max(w->first, s.t_in);
      const Nanos b = std::min(w->second, s.t_out);
      if (b <= a) continue;
      Acc& acc = charged[static_cast<std::size_t>(w - grid.begin())];
      const double len = static_cast<double>(b - a);
      const double smt_len = static_cast<double>(detail::covered(merged, a, b));
      acc[tid][package].add(cpu_density * (len + (config.smt_sigma - 1.0) * smt_len));
      for (const auto& [node, n] : s.reads) {
        const bool local = node == "dram" + std::to_string(core.socket_index);
        const double gamma = local ? 1.0 : config.gamma_remote;
        acc[tid][node].add(config.dram_joules_per_work * gamma * static_cast<double>(n) * len / span_ns);
      }
      if (config.mode == SimMode::kAdversarial) {
        for (const auto& [node, n] : s.writes) {
          acc[tid][node].add(config.dram_joules_per_write * static_cast<double>(n) * len / span_ns);
        }
        acc[tid][package].add(config.uncore_joules_per_read * static_cast<double>(total_reads) * len / span_ns);
      }
    }
  }

  // Sensor streams and ledger.
  std::vector<EntityId> sensed;
  for (const auto* p : topology.of_kind(PhysicalKind::kCpuPackage)) sensed.push_back(p->id);
  for (const auto* d : topology.of_kind(PhysicalKind::kDramNode)) sensed.push_back(d->id);
  auto idle_w = [&](const EntityId& cid) {
    auto it = config.idle_w_overrides.find(cid);
    if (it != config.idle_w_overrides.end()) return it->second;
    return topology.at(cid).kind == PhysicalKind::kCpuPackage ? config.package_idle_w : config.dram_idle_w;
  };

  std::mt19937_64 noise_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto noisy = [&](double increment) {
    if (config.noise_rel_stddev == 0.0) return increment;
    return std::max(0.0, increment * (1.0 + config.noise_rel_stddev * gauss(noise_rng)));
  };

  SimResult result;
  TraceData& data = result.trace;
  data.topology = topology;
  for (const auto& t : config.threads) {
    const bool known = std::any_of(data.registry.begin(), data.registry.end(),
                                   [&](const LogicalEntity& e) { return e.id == t.application; });
    if (!known) data.registry.push_back({t.application, LogicalKind::kApplication, std::nullopt, t.application});
  }
  for (const auto& t : config.threads) {
    data.registry.push_back({t.thread, LogicalKind::kThread, t.application, t.thread});
    result.ledger.applications[t.application].push_back(t.thread);
  }

  std::map<EntityId, double> reading;
  constexpr double kCounterOffsetJ = 1000.0;
  for (const auto& cid : sensed) {
    reading[cid] = kCounterOffsetJ;
    IdleCalibration cal;
    cal.physical_entity_id = cid;
    cal.t_start = 0;
    cal.t_stop = w0;
    cal.pre_reading_j = reading[cid];
    for (Nanos t = 0; t < w0; t += config.sample_period_ns) {
      const Nanos e = std::min(t + config.sample_period_ns, w0);
      reading[cid] += noisy(idle_w(cid) * static_cast<double>(e - t) / kNanosPerSecond);
    }
    cal.post_reading_j = reading[cid];
    data.calibrations.push_back(cal);
    data.measurements.push_back({cid, MetricName::kEnergyTotalJ, std::nullopt, w0, w0, reading[cid]});
  }

  GroundTruthLedger& ledger = result.ledger;
  ledger.seed = config.seed;
  ledger.mode = config.mode;
  ledger.window_ns = config.sample_period_ns;
  ledger.t_start = w0;
  ledger.t_stop = w_end;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    LedgerWindow lw;
    lw.t_start = grid[k].first;
    lw.t_stop = grid[k].second;
    std::map<EntityId, ExactSum> active;
    for (const auto& [tid, comps] : charged[k]) {
      for (const auto& [cid, sum] : comps) {
        const double j = sum.value();
        lw.threads[tid][cid] = j;
        active[cid].add(j);
      }
    }
    for (const auto& cid : sensed) {
      LedgerWindow::Component c;
      c.idle_j = idle_w(cid) * static_cast<double>(lw.t_stop - lw.t_start) / kNanosPerSecond;
      c.active_j = active[cid].value();
      ExactSum total = active[cid];
      total.add(c.idle_j);
      c.total_j = total.value();
      const double before = reading[cid];
      reading[cid] = before + noisy(c.total_j);
      c.noise_j = (reading[cid] - before) - c.total_j;
      lw.components[cid] = c;
      data.measurements.push_back(
          {cid, MetricName::kEnergyTotalJ, std::nullopt, lw.t_stop, lw.t_stop, reading[cid]});
    }
    ledger.windows.push_back(std::move(lw));
  }

  for (const auto& s : spans) {
    const EntityId& tid = config.threads[s.thread].thread;
    const EntityId& core = cores[s.core]->id;
    result.schedule.push_back({tid, core, s.t_in, s.t_out});
    auto add = [&](MetricName m, const EntityId& entity, std::uint64_t v) {
      data.measurements.push_back({entity, m, tid, s.t_in, s.t_out, static_cast<double>(v)});
    };
    add(MetricName::kUccDelta, core, s.ucc);
    add(MetricName::kAperfDelta, core, s.aperf);
    add(MetricName::kMperfDelta, core, s.mperf);
    for (const auto& [node, n] : s.reads) {
      const bool local = node == "dram" + std::to_string(cores[s.core]->socket_index);
      add(local ? MetricName::kDramReadsLocal : MetricName::kDramReadsRemote, node, n);
    }
  }

  result.trace_text = serialize_trace(data);
  result.trace = parse_trace(result.trace_text);
  return result;
}

// ---------------------------------------------------------------------------
// Accuracy

struct MapeResult {
  double percent = 0.0;
  std::size_t keys_used = 0;
  /// Keys left out because their true value is zero.
  std::vector<std::string> excluded;
  /// Absolute percentage error per key that was used.
  std::map<std::string, double> per_key;
};

/// Mean absolute percentage error over keys with non-zero truth.
inline MapeResult mape(const std::map<std::string, double>& attributed,
                       const std::map<std::string, double>& truth) {
  if (attributed.size() != truth.size() ||
      !std::equal(attributed.begin(), attributed.end(), truth.begin(),
                  [](const auto& a, const auto& b) { return a.first == b.first; })) {
    throw Error(ErrorCode::kArgument, "attributed and truth key sets differ");
  }
  MapeResult r;
  ExactSum sum;
  for (const auto& [key, t] : truth) {
    if (t == 0.0) {
      r.excluded.push_back(key);
      continue;
    }
    const double ape = std::fabs(attributed.at(key) - t) / std::fabs(t) * 100.0;
    r.per_key[key] = ape;
    sum.add(ape);
    ++r.keys_used;
  }
  r.percent = r.keys_used == 0 ? 0.0 : sum.value() / static_cast<double>(r.keys_used);
  return r;
}

}  // namespace metrion
