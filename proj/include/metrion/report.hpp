#pragma once

// Report documents: attribution results as JSON, their text rendering, and
// accuracy evaluation of a report against a simulator ledger.

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "metrion/attribution.hpp"
#include "metrion/core_model.hpp"
#include "metrion/error.hpp"
#include "metrion/exact_sum.hpp"
#include "metrion/pipeline.hpp"
#include "metrion/simulator.hpp"

namespace metrion {

inline constexpr std::string_view kReportFormat = "metrion-report/1";
inline constexpr std::string_view kEvaluationFormat = "metrion-evaluation/1";

/// Rounds to 6 significant digits unless `raw`; negative zero becomes zero.
inline double format_number(double v, bool raw) {
  if (v == 0.0) return 0.0;
  if (raw || !std::isfinite(v)) return v;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::strtod(buf, nullptr);
}

namespace detail {

inline nlohmann::ordered_json share_table_json(const ShareTable& table, bool raw, bool with_total) {
  nlohmann::ordered_json out = nlohmann::ordered_json::object();
  for (const auto& [id, comps] : table) {
    nlohmann::ordered_json cj = nlohmann::ordered_json::object();
    ExactSum total;
    for (const auto& [cid, s] : comps) {
      cj[cid] = {{"active_j", format_number(s.active_j, raw)}, {"idle_j", format_number(s.idle_j, raw)}};
      total.add(s.active_j);
      total.add(s.idle_j);
    }
    if (with_total) {
      out[id] = {{"total_j", format_number(total.value(), raw)}, {"components", std::move(cj)}};
    } else {
      out[id] = std::move(cj);
    }
  }
  return out;
}

inline ShareTable share_table_from_json(const nlohmann::json& j, bool with_total) {
  ShareTable out;
  for (const auto& [id, v] : j.items()) {
    const nlohmann::json* comps = &v;
    if (with_total) {
      reject_unknown_fields(v, {"total_j", "components"}, "report total");
      comps = &v.at("components");
    }
    auto& row = out[id];
    for (const auto& [cid, s] : comps->items()) {
      reject_unknown_fields(s, {"active_j", "idle_j"}, "report share");
      row[cid] = {required<double>(s, "active_j", "report share"), required<double>(s, "idle_j", "report share")};
    }
  }
  return out;
}

inline DiagnosticKind parse_diagnostic_kind(const std::string& s) {
  for (auto k : {DiagnosticKind::kClamp, DiagnosticKind::kUnattributedActive, DiagnosticKind::kUnattributedIdle}) {
    if (to_string(k) == s) return k;
  }
  throw Error(ErrorCode::kParse, "unknown diagnostic kind '" + s + "'");
}

}  // namespace detail

/// Copy of `r` with every energy value passed through format_number.
inline RunResult rounded(const RunResult& r, bool raw) {
  RunResult out = r;
  for (auto& w : out.windows) {
    for (auto& [_, e] : w.window.components) {
      e.total_j = format_number(e.total_j, raw);
      e.idle_j = format_number(e.idle_j, raw);
      e.active_j = format_number(e.active_j, raw);
    }
    for (auto* table : {&w.per_application, &w.per_thread}) {
      for (auto& [_, comps] : *table) {
        for (auto& [__, s] : comps) s = {format_number(s.active_j, raw), format_number(s.idle_j, raw)};
      }
    }
    for (auto& d : w.diagnostics) d.joules = format_number(d.joules, raw);
  }
  return out;
}

/// Totals are summed from the rounded window values so that a report read
/// back and written again is byte-identical.
inline nlohmann::ordered_json to_json(const RunResult& result, bool raw = false) {
  const RunResult r = rounded(result, raw);
  nlohmann::ordered_json j;
  j["format"] = kReportFormat;
  j["params"] = {{"smt_sigma", r.params.smt_sigma},
                 {"gamma_remote", r.params.gamma_remote},
                 {"gamma_local", r.params.gamma_local}};
  j["window_ns"] = r.window_ns;
  j["t_start"] = r.t_start;
  j["t_stop"] = r.t_stop;
  j["components"] = nlohmann::ordered_json::object();
  for (const auto& [cid, kind] : r.components) j["components"][cid] = to_string(kind);
  j["warnings"] = r.warnings;
  j["totals"] = {{"applications", detail::share_table_json(r.application_totals(), raw, true)},
                 {"threads", detail::share_table_json(r.thread_totals(), raw, true)}};
  j["windows"] = nlohmann::ordered_json::array();
  for (const auto& w : r.windows) {
    nlohmann::ordered_json wj;
    wj["t_start"] = w.window.t_start;
    wj["t_stop"] = w.window.t_stop;
    wj["partial"] = w.window.partial;
    wj["components"] = nlohmann::ordered_json::object();
    for (const auto& [cid, e] : w.window.components) {
      wj["components"][cid] = {{"total_j", format_number(e.total_j, raw)},
                               {"idle_j", format_number(e.idle_j, raw)},
                               {"active_j", format_number(e.active_j, raw)},
                               {"clamped", e.clamped}};
    }
    wj["applications"] = detail::share_table_json(w.per_application, raw, false);
    wj["threads"] = detail::share_table_json(w.per_thread, raw, false);
    wj["diagnostics"] = nlohmann::ordered_json::array();
    for (const auto& d : w.diagnostics) {
      wj["diagnostics"].push_back(
          {{"kind", to_string(d.kind)}, {"component", d.component}, {"joules", format_number(d.joules, raw)}});
    }
    j["windows"].push_back(std::move(wj));
  }
  return j;
}

/// Reads a report document back. Totals are derived from the windows and
/// are only checked for shape.
inline RunResult run_result_from_json(const nlohmann::json& j) {
  constexpr std::string_view what = "report";
  try {
    detail::reject_unknown_fields(
        j, {"format", "params", "window_ns", "t_start", "t_stop", "components", "warnings", "totals", "windows"},
        what);
    if (detail::required<std::string>(j, "format", what) != kReportFormat) {
      throw Error(ErrorCode::kVersioning, "unsupported report format");
    }
    RunResult r;
    const auto& p = j.at("params");
    detail::reject_unknown_fields(p, {"smt_sigma", "gamma_remote", "gamma_local"}, "report params");
    r.params.smt_sigma = detail::required<double>(p, "smt_sigma", "report params");
    r.params.gamma_remote = detail::required<double>(p, "gamma_remote", "report params");
    r.params.gamma_local = detail::required<double>(p, "gamma_local", "report params");
    r.window_ns = detail::required<Nanos>(j, "window_ns", what);
    r.t_start = detail::required<Nanos>(j, "t_start", what);
    r.t_stop = detail::required<Nanos>(j, "t_stop", what);
    for (const auto& [cid, kind] : j.at("components").items()) {
      r.components[cid] = parse_physical_kind(kind.get<std::string>());
    }
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    for (const auto& wj : j.at("windows")) {
      detail::reject_unknown_fields(
          wj, {"t_start", "t_stop", "partial", "components", "applications", "threads", "diagnostics"},
          "report window");
      AttributionReport w;
      w.window.t_start = detail::required<Nanos>(wj, "t_start", "report window");
      w.window.t_stop = detail::required<Nanos>(wj, "t_stop", "report window");
      w.window.partial = detail::required<bool>(wj, "partial", "report window");
      for (const auto& [cid, cj] : wj.at("components").items()) {
        detail::reject_unknown_fields(cj, {"total_j", "idle_j", "active_j", "clamped"}, "report component");
        ComponentEnergy e;
        e.total_j = detail::required<double>(cj, "total_j", "report component");
        e.idle_j = detail::required<double>(cj, "idle_j", "report component");
        e.active_j = detail::required<double>(cj, "active_j", "report component");
        e.clamped = detail::required<bool>(cj, "clamped", "report component");
        e.raw_active_j = e.total_j - e.idle_j;
        w.window.components[cid] = e;
      }
      w.per_application = detail::share_table_from_json(wj.at("applications"), false);
      w.per_thread = detail::share_table_from_json(wj.at("threads"), false);
      for (const auto& dj : wj.at("diagnostics")) {
        detail::reject_unknown_fields(dj, {"kind", "component", "joules"}, "report diagnostic");
        w.diagnostics.push_back({detail::parse_diagnostic_kind(detail::required<std::string>(dj, "kind", "diagnostic")),
                                 detail::required<std::string>(dj, "component", "diagnostic"),
                                 detail::required<double>(dj, "joules", "diagnostic")});
      }
      r.windows.push_back(std::move(w));
    }
    // Totals are derived data; they only need to parse.
    const auto& totals = j.at("totals");
    detail::reject_unknown_fields(totals, {"applications", "threads"}, "report totals");
    detail::share_table_from_json(totals.at("applications"), true);
    detail::share_table_from_json(totals.at("threads"), true);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("malformed report: ") + e.what());
  }
}

/// Human-readable summary: whole-run energy per application and component,
/// followed by diagnostics.
inline std::string render_text(const RunResult& r) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "span [%lld, %lld) ns, %zu window(s) of %lld ns\n",
                static_cast<long long>(r.t_start), static_cast<long long>(r.t_stop), r.windows.size(),
                static_cast<long long>(r.window_ns));
  out << buf;
  std::snprintf(buf, sizeof buf, "%-20s %-12s %14s %14s %14s\n", "application", "component", "active_j", "idle_j",
                "total_j");
  out << buf;
  for (const auto& [aid, comps] : r.application_totals()) {
    ExactSum total;
    for (const auto& [cid, s] : comps) {
      std::snprintf(buf, sizeof buf, "%-20s %-12s %14.6g %14.6g %14.6g\n", aid.c_str(), cid.c_str(), s.active_j,
                    s.idle_j, s.total_j());
      out << buf;
      total.add(s.total_j());
    }
    std::snprintf(buf, sizeof buf, "%-20s %-12s %14s %14s %14.6g\n", aid.c_str(), "all", "", "", total.value());
    out << buf;
  }
  std::map<std::pair<std::string, std::string>, std::pair<std::size_t, ExactSum>> diags;
  for (const auto& w : r.windows) {
    for (const auto& d : w.diagnostics) {
      auto& [n, j] = diags[{std::string(to_string(d.kind)), d.component}];
      ++n;
      j.add(d.joules);
    }
  }
  for (const auto& [key, v] : diags) {
    std::snprintf(buf, sizeof buf, "diagnostic %s on %s: %zu window(s), %.6g J\n", key.first.c_str(),
                  key.second.c_str(), v.first, v.second.value());
    out << buf;
  }
  for (const auto& w : r.warnings) out << "warning: " << w << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvaluationRow {
  std::string workload;
  EntityId application;
  /// Component id, or a component class ("cpu", "dram").
  std::string component;
  double attributed_j = 0.0;
  double truth_j = 0.0;
};

struct ClassStats {
  double mape = 0.0;
  double stddev = 0.0;
  /// stddev / mape; zero when mape is zero.
  double cv = 0.0;
  std::size_t keys = 0;
  std::size_t excluded = 0;
};

struct Evaluation {
  std::vector<EvaluationRow> rows;
  /// "cpu", "dram", "all" -> statistics over per-application class errors.
  std::map<std::string, ClassStats> summary;
};

inline std::string component_class(PhysicalKind kind) {
  return kind == PhysicalKind::kDramNode ? "dram" : "cpu";
}

/// Compares whole-run active energy per application against a ledger.
/// Rows are produced per (application, component) and per (application,
/// class); statistics run over the class rows of all workloads.
inline Evaluation evaluate(const std::vector<std::pair<std::string, std::pair<RunResult, GroundTruthLedger>>>& runs) {
  Evaluation ev;
  std::map<std::string, std::vector<double>> errors;
  std::map<std::string, std::size_t> excluded;
  for (const auto& [name, pair] : runs) {
    const auto& [report, ledger] = pair;
    if (report.t_start != ledger.t_start || report.t_stop != ledger.t_stop) {
      throw Error(ErrorCode::kArgument, name + ": report covers [" + std::to_string(report.t_start) + "," +
                                            std::to_string(report.t_stop) + ") but ledger covers [" +
                                            std::to_string(ledger.t_start) + "," + std::to_string(ledger.t_stop) + ")");
    }
    const auto attributed = report.application_totals();
    const auto truth = ledger.application_totals();
    std::set<EntityId> report_apps;
    for (const auto& [aid, _] : attributed) report_apps.insert(aid);
    std::set<EntityId> ledger_apps;
    for (const auto& [aid, _] : ledger.applications) ledger_apps.insert(aid);
    for (const auto& aid : report_apps) {
      if (!ledger_apps.count(aid)) throw Error(ErrorCode::kArgument, name + ": application '" + aid + "' not in ledger");
    }
    std::set<EntityId> ledger_components;
    for (const auto& w : ledger.windows) {
      for (const auto& [cid, _] : w.components) ledger_components.insert(cid);
    }
    for (const auto& [cid, _] : report.components) {
      if (!ledger_components.count(cid)) {
        throw Error(ErrorCode::kArgument, name + ": component '" + cid + "' not in ledger");
      }
    }
    for (const auto& cid : ledger_components) {
      if (!report.components.count(cid)) {
        throw Error(ErrorCode::kArgument, name + ": component '" + cid + "' not in report");
      }
    }

    for (const auto& aid : ledger_apps) {
      std::map<std::string, std::pair<ExactSum, ExactSum>> by_class;
      for (const auto& [cid, kind] : report.components) {
        double got = 0.0;
        double want = 0.0;
        if (auto a = attributed.find(aid); a != attributed.end()) {
          if (auto c = a->second.find(cid); c != a->second.end()) got = c->second.active_j;
        }
        if (auto t = truth.find(aid); t != truth.end()) {
          if (auto c = t->second.find(cid); c != t->second.end()) want = c->second;
        }
        ev.rows.push_back({name, aid, cid, got, want});
        auto& [g, w] = by_class[component_class(kind)];
        g.add(got);
        w.add(want);
      }
      for (const auto& [cls, sums] : by_class) {
        const double got = sums.first.value();
        const double want = sums.second.value();
        ev.rows.push_back({name, aid, cls, got, want});
        if (want == 0.0) {
          ++excluded[cls];
          ++excluded["all"];
          continue;
        }
        const double ape = std::fabs(got - want) / want * 100.0;
        errors[cls].push_back(ape);
        errors["all"].push_back(ape);
      }
    }
  }
  for (const auto& cls : {std::string("cpu"), std::string("dram"), std::string("all")}) {
    ClassStats s;
    s.excluded = excluded[cls];
    const auto& e = errors[cls];
    s.keys = e.size();
    if (!e.empty()) {
      s.mape = exact_sum(e) / static_cast<double>(e.size());
      std::vector<double> sq;
      for (double x : e) sq.push_back((x - s.mape) * (x - s.mape));
      s.stddev = std::sqrt(exact_sum(sq) / static_cast<double>(e.size()));
      s.cv = s.mape == 0.0 ? 0.0 : s.stddev / s.mape;
    }
    ev.summary[cls] = s;
  }
  return ev;
}

inline nlohmann::ordered_json to_json(const Evaluation& ev, bool raw = false) {
  nlohmann::ordered_json j;
  j["format"] = kEvaluationFormat;
  j["summary"] = nlohmann::ordered_json::object();
  for (const auto& [cls, s] : ev.summary) {
    j["summary"][cls] = {{"mape_percent", format_number(s.mape, raw)},
                         {"stddev_percent", format_number(s.stddev, raw)},
                         {"cv", format_number(s.cv, raw)},
                         {"keys", s.keys},
                         {"excluded", s.excluded}};
  }
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : ev.rows) {
    j["rows"].push_back({{"workload", r.workload},
                         {"application", r.application},
                         {"component", r.component},
                         {"attributed_active_j", format_number(r.attributed_j, raw)},
                         {"truth_active_j", format_number(r.truth_j, raw)}});
  }
  return j;
}

inline std::string render_text(const Evaluation& ev) {
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-6s %12s %12s %10s %6s %9s\n", "class", "mape_%", "stddev_%", "cv", "keys",
                "excluded");
  out << buf;
  for (const auto& [cls, s] : ev.summary) {
    std::snprintf(buf, sizeof buf, "%-6s %12.6g %12.6g %10.4g %6zu %9zu\n", cls.c_str(), s.mape, s.stddev, s.cv,
                  s.keys, s.excluded);
    out << buf;
  }
  return out.str();
}

}  // namespace metrion
