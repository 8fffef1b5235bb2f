#pragma once

// Platform-independent data model: physical and logical entities, metrics,
// measurements, and the machine topology every other stage operates on.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "metrion/error.hpp"

namespace metrion {

using EntityId = std::string;
/// Nanoseconds relative to the trace epoch.
using Nanos = std::int64_t;

inline constexpr Nanos kNanosPerSecond = 1'000'000'000;

// ---------------------------------------------------------------------------
// Physical entities

enum class PhysicalKind { kCpuPackage, kLogicalCore, kDramNode, kGpu };

inline std::string_view to_string(PhysicalKind kind) {
  switch (kind) {
    case PhysicalKind::kCpuPackage: return "CpuPackage";
    case PhysicalKind::kLogicalCore: return "LogicalCore";
    case PhysicalKind::kDramNode: return "DramNode";
    case PhysicalKind::kGpu: return "Gpu";
  }
  return "?";
}

inline PhysicalKind parse_physical_kind(std::string_view s) {
  if (s == "CpuPackage") return PhysicalKind::kCpuPackage;
  if (s == "LogicalCore") return PhysicalKind::kLogicalCore;
  if (s == "DramNode") return PhysicalKind::kDramNode;
  if (s == "Gpu") return PhysicalKind::kGpu;
  throw Error(ErrorCode::kParse, "unknown physical entity kind '" + std::string(s) + "'");
}

struct PhysicalEntity {
  EntityId id;
  PhysicalKind kind = PhysicalKind::kCpuPackage;
  std::optional<EntityId> parent_id;
  std::uint32_t socket_index = 0;
  std::uint32_t physical_core_index = 0;  // LogicalCore only
  std::vector<EntityId> smt_sibling_ids;  // LogicalCore only
  std::map<std::string, std::string> metadata;

  bool operator==(const PhysicalEntity&) const = default;
};

// ---------------------------------------------------------------------------
// Logical entities

enum class LogicalKind { kApplication, kThread };

inline std::string_view to_string(LogicalKind kind) {
  return kind == LogicalKind::kApplication ? "Application" : "Thread";
}

inline LogicalKind parse_logical_kind(std::string_view s) {
  if (s == "Application") return LogicalKind::kApplication;
  if (s == "Thread") return LogicalKind::kThread;
  throw Error(ErrorCode::kParse, "unknown logical entity kind '" + std::string(s) + "'");
}

struct LogicalEntity {
  EntityId id;
  LogicalKind kind = LogicalKind::kApplication;
  std::optional<EntityId> parent_id;
  std::string name;

  bool operator==(const LogicalEntity&) const = default;
};

// ---------------------------------------------------------------------------
// Metrics

enum class MetricName {
  kUccDelta,
  kAperfDelta,
  kMperfDelta,
  kDramReadsLocal,
  kDramReadsRemote,
  kEnergyTotalJ,
  kPowerIdleW,
};

inline constexpr MetricName kAllMetrics[] = {
    MetricName::kUccDelta,       MetricName::kAperfDelta,      MetricName::kMperfDelta,
    MetricName::kDramReadsLocal, MetricName::kDramReadsRemote, MetricName::kEnergyTotalJ,
    MetricName::kPowerIdleW,
};

inline std::string_view to_string(MetricName m) {
  switch (m) {
    case MetricName::kUccDelta: return "UCC_DELTA";
    case MetricName::kAperfDelta: return "APERF_DELTA";
    case MetricName::kMperfDelta: return "MPERF_DELTA";
    case MetricName::kDramReadsLocal: return "DRAM_READS_LOCAL";
    case MetricName::kDramReadsRemote: return "DRAM_READS_REMOTE";
    case MetricName::kEnergyTotalJ: return "ENERGY_TOTAL_J";
    case MetricName::kPowerIdleW: return "POWER_IDLE_W";
  }
  return "?";
}

inline MetricName parse_metric(std::string_view s) {
  for (MetricName m : kAllMetrics) {
    if (to_string(m) == s) return m;
  }
  throw Error(ErrorCode::kParse, "unknown metric '" + std::string(s) + "'");
}

/// Unit is fixed by the metric name.
inline std::string_view metric_unit(MetricName m) {
  switch (m) {
    case MetricName::kEnergyTotalJ: return "joule";
    case MetricName::kPowerIdleW: return "watt";
    default: return "count";
  }
}

inline bool is_thread_counter(MetricName m) {
  return m != MetricName::kEnergyTotalJ && m != MetricName::kPowerIdleW;
}

inline bool is_core_counter(MetricName m) {
  return m == MetricName::kUccDelta || m == MetricName::kAperfDelta ||
         m == MetricName::kMperfDelta;
}

inline bool is_dram_counter(MetricName m) {
  return m == MetricName::kDramReadsLocal || m == MetricName::kDramReadsRemote;
}

struct Metric {
  MetricName name;
  std::string_view id() const { return to_string(name); }
  std::string_view unit() const { return metric_unit(name); }
};

// ---------------------------------------------------------------------------
// Measurements

struct Measurement {
  EntityId physical_entity_id;
  MetricName metric = MetricName::kUccDelta;
  std::optional<EntityId> logical_entity_id;
  Nanos t_start = 0;
  Nanos t_stop = 0;
  double value = 0.0;

  bool operator==(const Measurement&) const = default;
};

/// Total order used wherever measurement collections must be canonical.
inline bool measurement_less(const Measurement& a, const Measurement& b) {
  auto key = [](const Measurement& m) {
    return std::tie(m.t_start, m.t_stop, m.physical_entity_id, m.metric, m.logical_entity_id,
                    m.value);
  };
  return key(a) < key(b);
}

// ---------------------------------------------------------------------------
// Topology

class Topology {
 public:
  Topology() = default;

  Topology(std::vector<PhysicalEntity> entities, std::uint32_t smt_factor)
      : entities_(std::move(entities)), smt_factor_(smt_factor) {
    for (std::size_t i = 0; i < entities_.size(); ++i) {
      by_id_.emplace(entities_[i].id, i);
    }
  }

  const std::vector<PhysicalEntity>& entities() const { return entities_; }
  std::uint32_t smt_factor() const { return smt_factor_; }

  const PhysicalEntity* find(std::string_view id) const {
    auto it = by_id_.find(std::string(id));
    return it == by_id_.end() ? nullptr : &entities_[it->second];
  }

  const PhysicalEntity& at(std::string_view id) const {
    const PhysicalEntity* e = find(id);
    if (e == nullptr) {
      throw Error(ErrorCode::kLookup, "unknown physical entity '" + std::string(id) + "'");
    }
    return *e;
  }

  std::vector<const PhysicalEntity*> of_kind(PhysicalKind kind) const {
    std::vector<const PhysicalEntity*> out;
    for (const auto& e : entities_) {
      if (e.kind == kind) out.push_back(&e);
    }
    return out;
  }

  std::vector<const PhysicalEntity*> on_socket(std::uint32_t socket) const {
    std::vector<const PhysicalEntity*> out;
    for (const auto& e : entities_) {
      if (e.socket_index == socket) out.push_back(&e);
    }
    return out;
  }

  const PhysicalEntity* package_on_socket(std::uint32_t socket) const {
    for (const auto& e : entities_) {
      if (e.kind == PhysicalKind::kCpuPackage && e.socket_index == socket) return &e;
    }
    return nullptr;
  }

  bool operator==(const Topology& o) const {
    return smt_factor_ == o.smt_factor_ && entities_ == o.entities_;
  }

 private:
  std::vector<PhysicalEntity> entities_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::uint32_t smt_factor_ = 1;
};

struct Violation {
  EntityId entity_id;
  std::string message;

  bool operator==(const Violation&) const = default;
};

/// Checks every topology invariant and returns all violations found. An
/// empty result means the topology is valid.
inline std::vector<Violation> validate_topology(const Topology& topology) {
  std::vector<Violation> out;
  auto violate = [&](const EntityId& id, std::string msg) {
    out.push_back({id, std::move(msg)});
  };

  if (topology.smt_factor() < 1) violate("", "smt_factor must be at least 1");

  std::set<EntityId> seen;
  std::map<std::uint32_t, int> packages_per_socket;
  std::map<std::uint32_t, int> dram_per_socket;
  for (const auto& e : topology.entities()) {
    if (!seen.insert(e.id).second) violate(e.id, "duplicate entity id");
    if (e.kind == PhysicalKind::kCpuPackage) ++packages_per_socket[e.socket_index];
    if (e.kind == PhysicalKind::kDramNode) ++dram_per_socket[e.socket_index];
  }
  for (const auto& [socket, count] : packages_per_socket) {
    if (count > 1) violate("", "socket " + std::to_string(socket) + " has more than one CpuPackage");
  }

  for (const auto& e : topology.entities()) {
    switch (e.kind) {
      case PhysicalKind::kGpu:
        violate(e.id, "GPU entities are not supported");
        break;
      case PhysicalKind::kCpuPackage:
      case PhysicalKind::kDramNode:
        if (e.parent_id) violate(e.id, "only logical cores may have a parent");
        if (!e.smt_sibling_ids.empty()) violate(e.id, "only logical cores may have SMT siblings");
        if (e.kind == PhysicalKind::kDramNode) {
          if (packages_per_socket.count(e.socket_index) == 0) {
            violate(e.id, "DRAM node socket has no CpuPackage");
          }
          if (dram_per_socket[e.socket_index] > 1) {
            violate(e.id, "more than one DRAM node on socket");
          }
        }
        break;
      case PhysicalKind::kLogicalCore: {
        const PhysicalEntity* parent = e.parent_id ? topology.find(*e.parent_id) : nullptr;
        if (parent == nullptr || parent->kind != PhysicalKind::kCpuPackage) {
          violate(e.id, "logical core must have a CpuPackage parent");
        } else if (parent->socket_index != e.socket_index) {
          violate(e.id, "logical core socket differs from its package");
        }
        if (e.smt_sibling_ids.size() + 1 > topology.smt_factor()) {
          violate(e.id, "more SMT siblings than smt_factor allows");
        }
        std::set<EntityId> unique_siblings;
        for (const auto& sid : e.smt_sibling_ids) {
          if (!unique_siblings.insert(sid).second) violate(e.id, "duplicate SMT sibling " + sid);
          if (sid == e.id) {
            violate(e.id, "irreflexive siblingship");
            continue;
          }
          const PhysicalEntity* s = topology.find(sid);
          if (s == nullptr || s->kind != PhysicalKind::kLogicalCore) {
            violate(e.id, "SMT sibling " + sid + " is not a logical core");
            continue;
          }
          if (std::find(s->smt_sibling_ids.begin(), s->smt_sibling_ids.end(), e.id) ==
              s->smt_sibling_ids.end()) {
            violate(e.id, "symmetric siblingship: " + sid + " does not list this core");
          }
          if (s->physical_core_index != e.physical_core_index || s->parent_id != e.parent_id) {
            violate(e.id, "SMT sibling " + sid + " is on a different physical core");
          }
        }
        break;
      }
    }
  }
  return out;
}

struct Location {
  EntityId package_id;
  std::uint32_t socket_index = 0;

  bool operator==(const Location&) const = default;
};

/// Maps a logical core to the package (and socket) it belongs to.
inline Location resolve_location(std::string_view core_id, const Topology& topology) {
  const PhysicalEntity& core = topology.at(core_id);
  if (core.kind != PhysicalKind::kLogicalCore) {
    throw Error(ErrorCode::kKind, "'" + core.id + "' is a " + std::string(to_string(core.kind)) +
                                      ", expected LogicalCore");
  }
  if (!core.parent_id) {
    throw Error(ErrorCode::kLookup, "logical core '" + core.id + "' has no parent package");
  }
  const PhysicalEntity& package = topology.at(*core.parent_id);
  return {package.id, package.socket_index};
}

/// Checks a measurement against the metric/entity pairing rules.
inline std::vector<Violation> validate_measurement(const Measurement& m, const Topology& topology) {
  std::vector<Violation> out;
  const std::string ref = m.physical_entity_id;
  if (m.t_start > m.t_stop) out.push_back({ref, "t_start after t_stop"});
  if (!std::isfinite(m.value) || m.value < 0.0) {
    out.push_back({ref, "value must be finite and non-negative"});
  }
  const PhysicalEntity* e = topology.find(m.physical_entity_id);
  if (e == nullptr) {
    out.push_back({ref, "unknown physical entity"});
    return out;
  }
  if (m.metric == MetricName::kEnergyTotalJ || m.metric == MetricName::kPowerIdleW) {
    if (e->kind != PhysicalKind::kCpuPackage && e->kind != PhysicalKind::kDramNode) {
      out.push_back({ref, std::string(to_string(m.metric)) + " must reference a package or DRAM node"});
    }
    if (m.logical_entity_id) {
      out.push_back({ref, std::string(to_string(m.metric)) + " must not reference a thread"});
    }
  } else {
    const PhysicalKind expected =
        is_core_counter(m.metric) ? PhysicalKind::kLogicalCore : PhysicalKind::kDramNode;
    if (e->kind != expected) {
      out.push_back({ref, std::string(to_string(m.metric)) + " must reference a " +
                              std::string(to_string(expected))});
    }
    if (!m.logical_entity_id) {
      out.push_back({ref, std::string(to_string(m.metric)) + " requires a thread"});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON encoding. Field names match the struct members; unknown fields are
// rejected on input.

namespace detail {

inline void reject_unknown_fields(const nlohmann::json& j,
                                  std::initializer_list<std::string_view> allowed,
                                  std::string_view what) {
  if (!j.is_object()) throw Error(ErrorCode::kParse, std::string(what) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) {
      throw Error(ErrorCode::kParse, "unknown field '" + key + "' in " + std::string(what));
    }
  }
}

template <typename T>
bool json_type_matches(const nlohmann::json& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v.is_boolean();
  } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
    return v.is_number_unsigned();
  } else if constexpr (std::is_integral_v<T>) {
    return v.is_number_integer();
  } else if constexpr (std::is_floating_point_v<T>) {
    return v.is_number();
  } else {
    return true;
  }
}

template <typename T>
T required(const nlohmann::json& j, const char* key, std::string_view what) {
  auto it = j.find(key);
  if (it == j.end()) {
    throw Error(ErrorCode::kParse, "missing field '" + std::string(key) + "' in " + std::string(what));
  }
  try {
    if (json_type_matches<T>(*it)) return it->get<T>();
  } catch (const nlohmann::json::exception&) {
  }
  throw Error(ErrorCode::kParse, "field '" + std::string(key) + "' in " + std::string(what) +
                                     " has the wrong type");
}

template <typename T>
T optional_field(const nlohmann::json& j, const char* key, T fallback, std::string_view what) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return fallback;
  try {
    if (json_type_matches<T>(*it)) return it->get<T>();
  } catch (const nlohmann::json::exception&) {
  }
  throw Error(ErrorCode::kParse, "field '" + std::string(key) + "' in " + std::string(what) +
                                     " has the wrong type");
}

inline std::optional<std::string> optional_id(const nlohmann::json& j, const char* key,
                                              std::string_view what) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) {
    throw Error(ErrorCode::kParse, "field '" + std::string(key) + "' in " + std::string(what) +
                                       " must be a string or null");
  }
  return it->get<std::string>();
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const PhysicalEntity& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["kind"] = to_string(e.kind);
  j["parent_id"] = e.parent_id ? nlohmann::ordered_json(*e.parent_id) : nlohmann::ordered_json();
  j["socket_index"] = e.socket_index;
  j["physical_core_index"] = e.physical_core_index;
  j["smt_sibling_ids"] = e.smt_sibling_ids;
  j["metadata"] = nlohmann::ordered_json::object();
  for (const auto& [k, v] : e.metadata) j["metadata"][k] = v;
  return j;
}

inline PhysicalEntity physical_entity_from_json(const nlohmann::json& j) {
  constexpr std::string_view what = "physical entity";
  detail::reject_unknown_fields(j,
                                {"id", "kind", "parent_id", "socket_index", "physical_core_index",
                                 "smt_sibling_ids", "metadata"},
                                what);
  PhysicalEntity e;
  e.id = detail::required<std::string>(j, "id", what);
  e.kind = parse_physical_kind(detail::required<std::string>(j, "kind", what));
  e.parent_id = detail::optional_id(j, "parent_id", what);
  e.socket_index = detail::required<std::uint32_t>(j, "socket_index", what);
  e.physical_core_index = detail::optional_field<std::uint32_t>(j, "physical_core_index", 0, what);
  e.smt_sibling_ids =
      detail::optional_field<std::vector<std::string>>(j, "smt_sibling_ids", {}, what);
  e.metadata =
      detail::optional_field<std::map<std::string, std::string>>(j, "metadata", {}, what);
  return e;
}

inline nlohmann::ordered_json to_json(const Topology& t) {
  nlohmann::ordered_json j;
  j["smt_factor"] = t.smt_factor();
  j["entities"] = nlohmann::ordered_json::array();
  for (const auto& e : t.entities()) j["entities"].push_back(to_json(e));
  return j;
}

/// Parses a topology snapshot document `{"smt_factor": n, "entities": [...]}`.
/// `extra_fields` lists additional keys the caller tolerates (the trace
/// record embeds the snapshot next to its "type" tag).
inline Topology topology_from_json(const nlohmann::json& j,
                                   std::initializer_list<std::string_view> extra_fields = {}) {
  constexpr std::string_view what = "topology";
  if (!j.is_object()) throw Error(ErrorCode::kParse, "topology must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = key == "smt_factor" || key == "entities";
    for (auto x : extra_fields) ok = ok || key == x;
    if (!ok) throw Error(ErrorCode::kParse, "unknown field '" + key + "' in topology");
  }
  const auto smt = detail::required<std::uint32_t>(j, "smt_factor", what);
  const auto& arr = j.at("entities");
  if (!arr.is_array()) throw Error(ErrorCode::kParse, "topology entities must be an array");
  std::vector<PhysicalEntity> entities;
  entities.reserve(arr.size());
  for (const auto& ej : arr) entities.push_back(physical_entity_from_json(ej));
  return Topology(std::move(entities), smt);
}

inline nlohmann::ordered_json to_json(const LogicalEntity& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["kind"] = to_string(e.kind);
  j["parent_id"] = e.parent_id ? nlohmann::ordered_json(*e.parent_id) : nlohmann::ordered_json();
  j["name"] = e.name;
  return j;
}

inline nlohmann::ordered_json to_json(const Measurement& m) {
  nlohmann::ordered_json j;
  j["physical_entity_id"] = m.physical_entity_id;
  j["metric_id"] = to_string(m.metric);
  j["logical_entity_id"] =
      m.logical_entity_id ? nlohmann::ordered_json(*m.logical_entity_id) : nlohmann::ordered_json();
  j["t_start"] = m.t_start;
  j["t_stop"] = m.t_stop;
  j["value"] = m.value;
  return j;
}

inline Measurement measurement_from_json(const nlohmann::json& j) {
  constexpr std::string_view what = "measurement";
  detail::reject_unknown_fields(
      j, {"physical_entity_id", "metric_id", "logical_entity_id", "t_start", "t_stop", "value"},
      what);
  Measurement m;
  m.physical_entity_id = detail::required<std::string>(j, "physical_entity_id", what);
  m.metric = parse_metric(detail::required<std::string>(j, "metric_id", what));
  m.logical_entity_id = detail::optional_id(j, "logical_entity_id", what);
  m.t_start = detail::required<Nanos>(j, "t_start", what);
  m.t_stop = detail::required<Nanos>(j, "t_stop", what);
  m.value = detail::required<double>(j, "value", what);
  return m;
}

/// Builds the regular machine shape used throughout tests and the simulator:
/// `sockets` packages, each with `cores_per_socket` physical cores of
/// `smt_factor` logical cores, plus one DRAM node per socket.
/// Ids: pkg<s>, cpu<n> (numbered socket-major), dram<s>.
inline Topology make_regular_topology(std::uint32_t sockets, std::uint32_t cores_per_socket,
                                      std::uint32_t smt_factor) {
  std::vector<PhysicalEntity> entities;
  std::uint32_t next_cpu = 0;
  for (std::uint32_t s = 0; s < sockets; ++s) {
    PhysicalEntity pkg;
    pkg.id = "pkg" + std::to_string(s);
    pkg.kind = PhysicalKind::kCpuPackage;
    pkg.socket_index = s;
    entities.push_back(pkg);
  }
  for (std::uint32_t s = 0; s < sockets; ++s) {
    for (std::uint32_t c = 0; c < cores_per_socket; ++c) {
      std::vector<EntityId> group;
      for (std::uint32_t k = 0; k < smt_factor; ++k) group.push_back("cpu" + std::to_string(next_cpu + k));
      for (std::uint32_t k = 0; k < smt_factor; ++k) {
        PhysicalEntity core;
        core.id = group[k];
        core.kind = PhysicalKind::kLogicalCore;
        core.parent_id = "pkg" + std::to_string(s);
        core.socket_index = s;
        core.physical_core_index = c;
        for (std::uint32_t o = 0; o < smt_factor; ++o) {
          if (o != k) core.smt_sibling_ids.push_back(group[o]);
        }
        entities.push_back(std::move(core));
      }
      next_cpu += smt_factor;
    }
  }
  for (std::uint32_t s = 0; s < sockets; ++s) {
    PhysicalEntity dram;
    dram.id = "dram" + std::to_string(s);
    dram.kind = PhysicalKind::kDramNode;
    dram.socket_index = s;
    entities.push_back(dram);
  }
  return Topology(std::move(entities), smt_factor);
}

}  // namespace metrion
