#pragma once

// Trace files (`.metrion.jsonl`, one JSON record per line) and the data
// source interface through which measurements enter the pipeline.
// Record layouts are documented in FORMAT.md.

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "metrion/attribution.hpp"
#include "metrion/core_model.hpp"
#include "metrion/error.hpp"

namespace metrion {

enum class RecordType { kTopology, kIdleCalibration, kEnergySample, kSchedInterval, kAppRegistry };

inline std::string_view to_string(RecordType t) {
  switch (t) {
    case RecordType::kTopology: return "TOPOLOGY";
    case RecordType::kIdleCalibration: return "IDLE_CALIBRATION";
    case RecordType::kEnergySample: return "ENERGY_SAMPLE";
    case RecordType::kSchedInterval: return "SCHED_INTERVAL";
    case RecordType::kAppRegistry: return "APP_REGISTRY";
  }
  return "?";
}

/// Two cumulative readings of one component taken while the system idles.
struct IdleCalibration {
  EntityId physical_entity_id;
  Nanos t_start = 0;
  Nanos t_stop = 0;
  double pre_reading_j = 0.0;
  double post_reading_j = 0.0;

  bool operator==(const IdleCalibration&) const = default;
};

/// Idle power from a calibration segment: energy difference over duration.
inline double compute_idle_power(double pre_reading_j, double post_reading_j, double duration_s) {
  if (!(duration_s > 0.0)) throw Error(ErrorCode::kArgument, "calibration duration must be positive");
  if (post_reading_j < pre_reading_j) {
    throw Error(ErrorCode::kCounterRegression, "calibration reading decreased");
  }
  return (post_reading_j - pre_reading_j) / duration_s;
}

inline double idle_power(const IdleCalibration& c) {
  return compute_idle_power(c.pre_reading_j, c.post_reading_j,
                            static_cast<double>(c.t_stop - c.t_start) / kNanosPerSecond);
}

/// Everything a trace carries, in PIDM form.
struct TraceData {
  Topology topology;
  /// Applications and threads in registration order.
  std::vector<LogicalEntity> registry;
  std::vector<IdleCalibration> calibrations;
  /// Sorted by t_start (stable with respect to file order).
  std::vector<Measurement> measurements;
  /// 1-based source line of each measurement; empty for in-memory traces.
  std::vector<std::size_t> measurement_lines;

  std::map<EntityId, LogicalEntity> logical_index() const {
    std::map<EntityId, LogicalEntity> out;
    for (const auto& e : registry) out.emplace(e.id, e);
    return out;
  }
};

/// Cumulative energy series per component, sorted by time.
inline std::map<EntityId, std::vector<EnergySample>> energy_series(
    const std::vector<Measurement>& measurements) {
  std::map<EntityId, std::vector<EnergySample>> out;
  for (const auto& m : measurements) {
    if (m.metric == MetricName::kEnergyTotalJ) {
      out[m.physical_entity_id].push_back({m.t_start, m.value});
    }
  }
  for (auto& [_, s] : out) {
    std::stable_sort(s.begin(), s.end(),
                     [](const EnergySample& a, const EnergySample& b) { return a.t < b.t; });
  }
  return out;
}

/// Latest calibrated idle power per component.
inline std::map<EntityId, double> idle_power_by_component(const std::vector<Measurement>& measurements) {
  std::map<EntityId, std::pair<Nanos, double>> latest;
  for (const auto& m : measurements) {
    if (m.metric != MetricName::kPowerIdleW) continue;
    auto [it, inserted] = latest.try_emplace(m.physical_entity_id, m.t_stop, m.value);
    if (!inserted && m.t_stop >= it->second.first) it->second = {m.t_stop, m.value};
  }
  std::map<EntityId, double> out;
  for (const auto& [cid, v] : latest) out[cid] = v.second;
  return out;
}

// ---------------------------------------------------------------------------
// Data sources

struct DataSourceDescriptor {
  std::string name;
  std::set<MetricName> provided_metrics;
  std::set<PhysicalKind> provided_entity_kinds;
};

/// A backend that yields PIDM data. A live collector (scheduler tracepoints
/// plus powercap counters) would implement the same interface.
class DataSource {
 public:
  virtual ~DataSource() = default;
  virtual DataSourceDescriptor descriptor() const = 0;
  virtual TraceData collect() = 0;
};

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

class TraceParser {
 public:
  TraceData finish() {
    if (!seen_topology_) throw Error(ErrorCode::kSemantic, "trace has no TOPOLOGY record");
    std::vector<std::size_t> order(data_.measurements.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return data_.measurements[a].t_start < data_.measurements[b].t_start;
    });
    TraceData out;
    out.topology = std::move(data_.topology);
    out.registry = std::move(data_.registry);
    out.calibrations = std::move(data_.calibrations);
    out.measurements.reserve(order.size());
    out.measurement_lines.reserve(order.size());
    for (std::size_t i : order) {
      out.measurements.push_back(std::move(data_.measurements[i]));
      out.measurement_lines.push_back(lines_[i]);
    }
    return out;
  }

  void line(const std::string& text, std::size_t number) {
    line_ = number;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::kParse, "line " + std::to_string(number) + ": malformed JSON: " + e.what());
    }
    try {
      record(j);
    } catch (const Error& e) {
      throw Error(e.code(), "line " + std::to_string(number) + ": " + e.detail());
    }
  }

 private:
  [[noreturn]] static void fail(ErrorCode code, const std::string& msg) { throw Error(code, msg); }

  void record(const nlohmann::json& j) {
    if (!j.is_object()) fail(ErrorCode::kParse, "record must be a JSON object");
    auto type_it = j.find("type");
    if (type_it == j.end() || !type_it->is_string()) fail(ErrorCode::kParse, "record has no \"type\"");
    const std::string type = type_it->get<std::string>();

    if (type == "TOPOLOGY") {
      if (seen_topology_) fail(ErrorCode::kSemantic, "duplicate TOPOLOGY record");
      data_.topology = topology_from_json(j, {"type"});
      const auto violations = validate_topology(data_.topology);
      if (!violations.empty()) {
        fail(ErrorCode::kSemantic, "invalid topology: " + violations.front().entity_id + ": " +
                                       violations.front().message);
      }
      seen_topology_ = true;
      return;
    }
    if (type != "APP_REGISTRY" && type != "IDLE_CALIBRATION" && type != "ENERGY_SAMPLE" &&
        type != "SCHED_INTERVAL") {
      fail(ErrorCode::kVersioning, "unknown record type '" + type + "'");
    }
    if (!seen_topology_) fail(ErrorCode::kSemantic, "first record must be TOPOLOGY");

    if (type == "APP_REGISTRY") {
      app_registry(j);
    } else if (type == "IDLE_CALIBRATION") {
      idle_calibration(j);
    } else if (type == "ENERGY_SAMPLE") {
      energy_sample(j);
    } else {
      sched_interval(j);
    }
  }

  void app_registry(const nlohmann::json& j) {
    constexpr std::string_view what = "APP_REGISTRY";
    reject_unknown_fields(j, {"type", "id", "kind", "parent_id", "name"}, what);
    LogicalEntity e;
    e.id = required<std::string>(j, "id", what);
    e.kind = parse_logical_kind(required<std::string>(j, "kind", what));
    e.parent_id = optional_id(j, "parent_id", what);
    e.name = optional_field<std::string>(j, "name", "", what);
    if (logical_.count(e.id)) fail(ErrorCode::kSemantic, "duplicate logical entity '" + e.id + "'");
    if (e.kind == LogicalKind::kApplication && e.parent_id) {
      fail(ErrorCode::kSemantic, "application '" + e.id + "' must not have a parent");
    }
    if (e.kind == LogicalKind::kThread) {
      if (!e.parent_id) fail(ErrorCode::kSemantic, "thread '" + e.id + "' has no parent application");
      auto p = logical_.find(*e.parent_id);
      if (p == logical_.end() || p->second != LogicalKind::kApplication) {
        fail(ErrorCode::kSemantic,
             "thread '" + e.id + "' names unregistered application '" + *e.parent_id + "'");
      }
    }
    logical_.emplace(e.id, e.kind);
    data_.registry.push_back(std::move(e));
  }

  void idle_calibration(const nlohmann::json& j) {
    constexpr std::string_view what = "IDLE_CALIBRATION";
    reject_unknown_fields(
        j, {"type", "physical_entity_id", "t_start", "t_stop", "pre_reading_j", "post_reading_j"},
        what);
    if (seen_energy_) fail(ErrorCode::kSemantic, "IDLE_CALIBRATION after an ENERGY_SAMPLE");
    IdleCalibration c;
    c.physical_entity_id = required<std::string>(j, "physical_entity_id", what);
    c.t_start = required<Nanos>(j, "t_start", what);
    c.t_stop = required<Nanos>(j, "t_stop", what);
    c.pre_reading_j = required<double>(j, "pre_reading_j", what);
    c.post_reading_j = required<double>(j, "post_reading_j", what);
    Measurement m;
    m.physical_entity_id = c.physical_entity_id;
    m.metric = MetricName::kPowerIdleW;
    m.t_start = c.t_start;
    m.t_stop = c.t_stop;
    m.value = idle_power(c);
    add(std::move(m));
    data_.calibrations.push_back(std::move(c));
  }

  void energy_sample(const nlohmann::json& j) {
    constexpr std::string_view what = "ENERGY_SAMPLE";
    reject_unknown_fields(j, {"type", "physical_entity_id", "t", "energy_j"}, what);
    seen_energy_ = true;
    Measurement m;
    m.physical_entity_id = required<std::string>(j, "physical_entity_id", what);
    m.metric = MetricName::kEnergyTotalJ;
    m.t_start = m.t_stop = required<Nanos>(j, "t", what);
    m.value = required<double>(j, "energy_j", what);
    add(std::move(m));
  }

  void sched_interval(const nlohmann::json& j) {
    constexpr std::string_view what = "SCHED_INTERVAL";
    reject_unknown_fields(j,
                          {"type", "thread_id", "core_id", "t_in", "t_out", "ucc_delta",
                           "aperf_delta", "mperf_delta", "dram_reads"},
                          what);
    const auto thread = required<std::string>(j, "thread_id", what);
    auto reg = logical_.find(thread);
    if (reg == logical_.end() || reg->second != LogicalKind::kThread) {
      fail(ErrorCode::kSemantic, "thread '" + thread + "' is not in the APP_REGISTRY");
    }
    const auto core_id = required<std::string>(j, "core_id", what);
    const auto t_in = required<Nanos>(j, "t_in", what);
    const auto t_out = required<Nanos>(j, "t_out", what);
    const PhysicalEntity* core = data_.topology.find(core_id);
    if (core == nullptr || core->kind != PhysicalKind::kLogicalCore) {
      fail(ErrorCode::kSemantic, "'" + core_id + "' is not a logical core");
    }
    auto counter = [&](MetricName metric, const EntityId& entity, std::uint64_t v) {
      Measurement m;
      m.physical_entity_id = entity;
      m.metric = metric;
      m.logical_entity_id = thread;
      m.t_start = t_in;
      m.t_stop = t_out;
      m.value = static_cast<double>(v);
      add(std::move(m));
    };
    counter(MetricName::kUccDelta, core_id, required<std::uint64_t>(j, "ucc_delta", what));
    counter(MetricName::kAperfDelta, core_id, required<std::uint64_t>(j, "aperf_delta", what));
    counter(MetricName::kMperfDelta, core_id, required<std::uint64_t>(j, "mperf_delta", what));
    std::map<std::string, std::uint64_t> reads;
    if (auto it = j.find("dram_reads"); it != j.end() && !it->is_null()) {
      if (!it->is_object()) fail(ErrorCode::kParse, "dram_reads must be an object");
      for (const auto& [node_id, n] : it->items()) {
        if (!n.is_number_unsigned()) {
          fail(ErrorCode::kParse, "dram_reads['" + node_id + "'] must be a non-negative integer");
        }
        reads[node_id] = n.get<std::uint64_t>();
      }
    }
    for (const auto& [node_id, n] : reads) {
      const PhysicalEntity* node = data_.topology.find(node_id);
      if (node == nullptr || node->kind != PhysicalKind::kDramNode) {
        fail(ErrorCode::kSemantic, "'" + node_id + "' is not a DRAM node");
      }
      counter(node->socket_index == core->socket_index ? MetricName::kDramReadsLocal
                                                       : MetricName::kDramReadsRemote,
              node_id, n);
    }
  }

  void add(Measurement m) {
    const auto violations = validate_measurement(m, data_.topology);
    if (!violations.empty()) {
      fail(ErrorCode::kSemantic, std::string(to_string(m.metric)) + " on '" +
                                     violations.front().entity_id + "': " + violations.front().message);
    }
    data_.measurements.push_back(std::move(m));
    lines_.push_back(line_);
  }

  TraceData data_;
  std::vector<std::size_t> lines_;
  std::map<EntityId, LogicalKind> logical_;
  std::size_t line_ = 0;
  bool seen_topology_ = false;
  bool seen_energy_ = false;
};

}  // namespace detail

inline TraceData parse_trace(std::istream& in) {
  detail::TraceParser parser;
  std::string text;
  std::size_t number = 0;
  while (std::getline(in, text)) {
    ++number;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    parser.line(text, number);
  }
  return parser.finish();
}

inline TraceData parse_trace(const std::string& text) {
  std::istringstream in(text);
  return parse_trace(in);
}

inline TraceData parse_trace_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kArgument, "cannot open trace '" + path + "'");
  return parse_trace(in);
}

// ---------------------------------------------------------------------------
// Serialization

/// Canonical trace text: TOPOLOGY, APP_REGISTRY records in registration
/// order, IDLE_CALIBRATION records, then ENERGY_SAMPLE and SCHED_INTERVAL
/// records ordered by time (samples first on ties).
inline std::string serialize_trace(const TraceData& data) {
  using ojson = nlohmann::ordered_json;
  std::string out;
  auto emit = [&](const ojson& j) {
    out += j.dump();
    out += '\n';
  };

  ojson topo;
  topo["type"] = "TOPOLOGY";
  const ojson topo_fields = to_json(data.topology);
  for (const auto& [k, v] : topo_fields.items()) topo[k] = v;
  emit(topo);

  for (const auto& e : data.registry) {
    ojson j;
    j["type"] = "APP_REGISTRY";
    const ojson fields = to_json(e);
    for (const auto& [k, v] : fields.items()) j[k] = v;
    emit(j);
  }
  for (const auto& c : data.calibrations) {
    ojson j;
    j["type"] = "IDLE_CALIBRATION";
    j["physical_entity_id"] = c.physical_entity_id;
    j["t_start"] = c.t_start;
    j["t_stop"] = c.t_stop;
    j["pre_reading_j"] = c.pre_reading_j;
    j["post_reading_j"] = c.post_reading_j;
    emit(j);
  }

  struct Event {
    Nanos t;
    int rank;  // 0 = energy sample, 1 = scheduling interval
    EntityId id;
    Nanos t_end;
    ojson record;
  };
  std::vector<Event> events;

  struct Span {
    EntityId core;
    std::uint64_t ucc = 0, aperf = 0, mperf = 0;
    std::map<EntityId, std::uint64_t> reads;
  };
  std::map<std::tuple<EntityId, Nanos, Nanos>, Span> spans;
  for (const auto& m : data.measurements) {
    if (m.metric == MetricName::kEnergyTotalJ) {
      ojson j;
      j["type"] = "ENERGY_SAMPLE";
      j["physical_entity_id"] = m.physical_entity_id;
      j["t"] = m.t_start;
      j["energy_j"] = m.value;
      events.push_back({m.t_start, 0, m.physical_entity_id, m.t_start, std::move(j)});
      continue;
    }
    if (!is_thread_counter(m.metric) || !m.logical_entity_id) continue;
    Span& s = spans[{*m.logical_entity_id, m.t_start, m.t_stop}];
    const auto v = static_cast<std::uint64_t>(m.value);
    switch (m.metric) {
      case MetricName::kUccDelta: s.core = m.physical_entity_id; s.ucc = v; break;
      case MetricName::kAperfDelta: s.core = m.physical_entity_id; s.aperf = v; break;
      case MetricName::kMperfDelta: s.core = m.physical_entity_id; s.mperf = v; break;
      default: s.reads[m.physical_entity_id] += v; break;
    }
  }
  for (const auto& [key, s] : spans) {
    const auto& [thread, t_in, t_out] = key;
    ojson j;
    j["type"] = "SCHED_INTERVAL";
    j["thread_id"] = thread;
    j["core_id"] = s.core;
    j["t_in"] = t_in;
    j["t_out"] = t_out;
    j["ucc_delta"] = s.ucc;
    j["aperf_delta"] = s.aperf;
    j["mperf_delta"] = s.mperf;
    j["dram_reads"] = ojson::object();
    for (const auto& [node, n] : s.reads) j["dram_reads"][node] = n;
    events.push_back({t_in, 1, thread, t_out, std::move(j)});
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    return std::tie(a.t, a.rank, a.id, a.t_end) < std::tie(b.t, b.rank, b.id, b.t_end);
  });
  for (const auto& e : events) emit(e.record);
  return out;
}

/// Reads a trace file; the only shipped DataSource implementation.
class TraceFileSource : public DataSource {
 public:
  explicit TraceFileSource(std::string path) : path_(std::move(path)) {}

  DataSourceDescriptor descriptor() const override {
    DataSourceDescriptor d;
    d.name = "trace-file:" + path_;
    d.provided_metrics.insert(std::begin(kAllMetrics), std::end(kAllMetrics));
    d.provided_entity_kinds = {PhysicalKind::kCpuPackage, PhysicalKind::kLogicalCore,
                               PhysicalKind::kDramNode};
    return d;
  }

  TraceData collect() override { return parse_trace_file(path_); }

 private:
  std::string path_;
};

}  // namespace metrion
