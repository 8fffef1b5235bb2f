// metrion command-line tool: simulate, ingest, attribute, report, evaluate.
//
// Exit codes: 0 success, 2 bad input (usage, parse, semantic, config),
// 3 conservation breach, 1 anything unexpected.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "CLI11.hpp"
#include "metrion/metrion.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitInput = 2;
constexpr int kExitBreach = 3;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("metrion");
  logger->set_pattern("metrion: %l: %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* env = std::getenv("METRION_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off") {
      spdlog::warn("ignoring unknown METRION_LOG level '{}'", env);
    } else {
      spdlog::set_level(level);
    }
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw metrion::Error(metrion::ErrorCode::kArgument, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw metrion::Error(metrion::ErrorCode::kParse, path + ": malformed JSON: " + e.what());
  }
}

/// Writes via a sibling temporary file and rename, so readers never see a
/// partial file.
void write_file(const fs::path& path, const std::string& body) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << body;
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw metrion::Error(metrion::ErrorCode::kStorage, "cannot write '" + path.string() + "'");
    }
  }
  fs::rename(tmp, path);
}

void emit(const std::string& out_path, const std::string& body) {
  if (out_path.empty() || out_path == "-") {
    std::cout << body;
  } else {
    write_file(out_path, body);
  }
}

std::string stem_of(const std::string& path) {
  std::string name = fs::path(path).filename().string();
  for (const char* suffix : {".metrion.jsonl", ".json", ".jsonl"}) {
    const std::string s(suffix);
    if (name.size() > s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0) {
      return name.substr(0, name.size() - s.size());
    }
  }
  return name;
}

struct Options {
  std::string config;
  std::string trace;
  std::string store;
  std::string out;
  std::string report;
  std::vector<std::string> pairs;
  metrion::Nanos window_ns = metrion::kNanosPerSecond;
  double sigma = metrion::ModelParams{}.smt_sigma;
  double gamma_remote = metrion::ModelParams{}.gamma_remote;
  unsigned jobs = 1;
  bool raw = false;
  std::optional<std::uint64_t> seed;
};

int cmd_simulate(const Options& o) {
  metrion::SimConfig config = metrion::sim_config_from_json(read_json(o.config));
  if (o.seed) config.seed = *o.seed;
  const metrion::SimResult result = metrion::simulate(config);
  const fs::path dir = o.out.empty() ? fs::path(".") : fs::path(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  const std::string name = stem_of(o.config);
  const fs::path trace = dir / (name + ".metrion.jsonl");
  const fs::path ledger = dir / (name + ".ledger.json");
  write_file(trace, result.trace_text);
  write_file(ledger, metrion::to_json(result.ledger).dump(2) + "\n");
  spdlog::info("{} scheduled spans, {} ledger windows", result.schedule.size(), result.ledger.windows.size());
  std::cout << trace.string() << "\n" << ledger.string() << "\n";
  return kExitOk;
}

int cmd_ingest(const Options& o) {
  const metrion::TraceData trace = metrion::parse_trace_file(o.trace);
  metrion::FileStore store(o.store);
  const std::size_t before = store.size();
  const std::size_t added = store.append(trace.measurements);
  spdlog::info("store '{}' held {} measurements", o.store, before);
  std::cout << "ingested " << added << " of " << trace.measurements.size() << " measurements into " << o.store
            << " (" << store.size() << " total)\n";
  return kExitOk;
}

int cmd_attribute(const Options& o) {
  const metrion::TraceData trace = metrion::parse_trace_file(o.trace);
  metrion::RunOptions run;
  run.window_ns = o.window_ns;
  run.params.smt_sigma = o.sigma;
  run.params.gamma_remote = o.gamma_remote;
  run.jobs = o.jobs;

  metrion::RunResult result;
  if (o.store.empty()) {
    result = metrion::run_attribution(trace, run);
  } else {
    metrion::FileStore store(o.store);
    store.append(trace.measurements);
    result = metrion::run_attribution(store, trace.topology, trace.logical_index(), run);
  }
  spdlog::info("{} window(s) over [{}, {}) ns", result.windows.size(), result.t_start, result.t_stop);
  for (const auto& w : result.warnings) spdlog::warn("{}", w);
  for (const auto& w : result.windows) {
    for (const auto& d : w.diagnostics) {
      spdlog::debug("window [{}, {}): {} on {}: {} J", w.window.t_start, w.window.t_stop,
                    metrion::to_string(d.kind), d.component, d.joules);
    }
  }
  emit(o.out, metrion::to_json(result, o.raw).dump(2) + "\n");

  const auto breaches = metrion::check_conservation(result);
  for (const auto& b : breaches) spdlog::error("conservation breach: {}", b);
  return breaches.empty() ? kExitOk : kExitBreach;
}

int cmd_report(const Options& o) {
  const metrion::RunResult result = metrion::run_result_from_json(read_json(o.report));
  emit(o.out, metrion::render_text(result));
  return kExitOk;
}

int cmd_evaluate(const Options& o) {
  if (o.pairs.size() % 2 != 0) {
    throw metrion::Error(metrion::ErrorCode::kArgument, "evaluate takes REPORT LEDGER pairs");
  }
  std::vector<std::pair<std::string, std::pair<metrion::RunResult, metrion::GroundTruthLedger>>> runs;
  for (std::size_t i = 0; i < o.pairs.size(); i += 2) {
    runs.push_back({stem_of(o.pairs[i + 1]),
                    {metrion::run_result_from_json(read_json(o.pairs[i])),
                     metrion::ledger_from_json(read_json(o.pairs[i + 1]))}});
  }
  const metrion::Evaluation ev = metrion::evaluate(runs);
  std::cout << metrion::render_text(ev);
  if (!o.out.empty()) write_file(o.out, metrion::to_json(ev, o.raw).dump(2) + "\n");
  return kExitOk;
}

void add_model_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--window-ns", o.window_ns, "Attribution window length in ns")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--sigma", o.sigma, "SMT energy factor (>= 1)");
  cmd->add_option("--gamma-remote", o.gamma_remote, "Remote DRAM read weight (>= 1)");
  cmd->add_option("--jobs", o.jobs, "Windows attributed in parallel")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  Options o;
  CLI::App app{"metrion: trace-driven energy attribution"};
  app.require_subcommand(1);

  auto* simulate = app.add_subcommand("simulate", "Generate a trace and ground-truth ledger from a config");
  simulate->add_option("config", o.config, "Simulation config (JSON)")->required()->check(CLI::ExistingFile);
  simulate->add_option("--out", o.out, "Output directory");
  simulate->add_option("--seed", o.seed, "Override the config's seed");

  auto* ingest = app.add_subcommand("ingest", "Append a trace's measurements to a store");
  ingest->add_option("--trace", o.trace, "Trace file (.metrion.jsonl)")->required();
  ingest->add_option("--store", o.store, "Store file")->required();

  auto* attribute = app.add_subcommand("attribute", "Attribute a trace's energy to threads and applications");
  attribute->add_option("--trace", o.trace, "Trace file (.metrion.jsonl)")->required();
  attribute->add_option("--store", o.store, "Store file; in-memory when omitted");
  attribute->add_option("--out", o.out, "Report destination; stdout when omitted");
  attribute->add_flag("--raw", o.raw, "Full-precision numbers");
  add_model_flags(attribute, o);

  auto* report = app.add_subcommand("report", "Summarize a report file as a text table");
  report->add_option("report", o.report, "Report file (JSON)")->required();
  report->add_option("--out", o.out, "Destination; stdout when omitted");

  auto* evaluate = app.add_subcommand("evaluate", "MAPE of reports against simulator ledgers");
  evaluate->add_option("pairs", o.pairs, "REPORT LEDGER [REPORT LEDGER ...]")->required()->expected(2, -1);
  evaluate->add_option("--out", o.out, "Write the evaluation as JSON");
  evaluate->add_flag("--raw", o.raw, "Full-precision numbers");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*simulate) return cmd_simulate(o);
    if (*ingest) return cmd_ingest(o);
    if (*attribute) return cmd_attribute(o);
    if (*report) return cmd_report(o);
    if (*evaluate) return cmd_evaluate(o);
  } catch (const metrion::Error& e) {
    spdlog::error("{}", e.what());
    return kExitInput;
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return kExitInternal;
  }
  return kExitInternal;
}
