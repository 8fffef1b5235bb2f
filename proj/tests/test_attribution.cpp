#include <random>

#include <gtest/gtest.h>

#include "metrion/attribution.hpp"
#include "metrion/pipeline.hpp"
#include "oracles.hpp"

using namespace metrion;

namespace {

SubInterval sub(const std::string& thread, const std::string& core, Nanos a, Nanos b, std::uint64_t ucc,
                bool smt = false) {
  SubInterval s;
  s.thread_id = thread;
  s.core_id = core;
  s.t_start = a;
  s.t_stop = b;
  s.smt_active = smt;
  s.counters.ucc = ucc;
  s.counters.aperf = ucc;
  s.counters.mperf = ucc;
  s.interval_aperf = ucc;
  s.interval_mperf = ucc;
  return s;
}

Window window_with(std::map<EntityId, ComponentEnergy> components, Nanos a = 0, Nanos b = kNanosPerSecond) {
  Window w;
  w.t_start = a;
  w.t_stop = b;
  w.components = std::move(components);
  return w;
}

ComponentEnergy energy(double total, double idle) {
  ComponentEnergy e;
  e.total_j = total;
  e.idle_j = idle;
  e.raw_active_j = total - idle;
  e.active_j = std::max(0.0, total - idle);
  e.clamped = e.raw_active_j <= 0.0 && idle > 0.0;
  return e;
}

std::map<EntityId, LogicalEntity> registry(const std::map<std::string, std::string>& thread_to_app) {
  std::map<EntityId, LogicalEntity> out;
  for (const auto& [t, a] : thread_to_app) {
    out[a] = {a, LogicalKind::kApplication, std::nullopt, a};
    out[t] = {t, LogicalKind::kThread, a, t};
  }
  return out;
}

}  // namespace

TEST(ComputeWindow, InterpolatesBetweenSamples) {
  const std::map<EntityId, std::vector<EnergySample>> samples{{"pkg0", {{0, 100.0}, {1000, 200.0}}}};
  const Window w = compute_window(samples, {{"pkg0", 1e6}}, 250, 750);
  const auto& e = w.components.at("pkg0");
  EXPECT_DOUBLE_EQ(e.total_j, 50.0);
  EXPECT_DOUBLE_EQ(e.idle_j, 1e6 * 500e-9);
  EXPECT_DOUBLE_EQ(e.active_j, 49.5);
  EXPECT_FALSE(e.clamped);
}

TEST(ComputeWindow, ClampsWhenIdleExceedsTotal) {
  const std::map<EntityId, std::vector<EnergySample>> samples{{"pkg0", {{0, 0.0}, {kNanosPerSecond, 5.0}}}};
  const auto& e = compute_window(samples, {{"pkg0", 10.0}}, 0, kNanosPerSecond).components.at("pkg0");
  EXPECT_EQ(e.active_j, 0.0);
  EXPECT_DOUBLE_EQ(e.raw_active_j, -5.0);
  EXPECT_TRUE(e.clamped);
}

TEST(ComputeWindow, ZeroIdleZeroTotalIsNotClamp) {
  const std::map<EntityId, std::vector<EnergySample>> samples{{"pkg0", {{0, 1.0}, {10, 1.0}}}};
  EXPECT_FALSE(compute_window(samples, {{"pkg0", 0.0}}, 0, 10).components.at("pkg0").clamped);
}

TEST(ComputeWindow, Errors) {
  const std::map<EntityId, std::vector<EnergySample>> regress{{"pkg0", {{0, 5.0}, {10, 4.0}}}};
  try {
    compute_window(regress, {{"pkg0", 0.0}}, 0, 10);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kCounterRegression);
  }
  const std::map<EntityId, std::vector<EnergySample>> ok{{"pkg0", {{0, 5.0}, {10, 6.0}}}};
  EXPECT_THROW(compute_window(ok, {}, 0, 10), Error);
  EXPECT_THROW(compute_window(ok, {{"pkg0", 0.0}}, 0, 11), Error);
  EXPECT_THROW(compute_window(ok, {{"pkg0", 0.0}}, 5, 5), Error);
}

TEST(TileWindows, LastWindowMayBeShort) {
  const auto w = tile_windows(0, 25, 10);
  ASSERT_EQ(w.size(), 3u);
  EXPECT_EQ(w[2], std::make_pair(Nanos{20}, Nanos{25}));
  EXPECT_THROW(tile_windows(0, 10, 0), Error);
}

TEST(CpuWork, FrequencySmtAndPackage) {
  const Topology t = make_regular_topology(2, 1, 2);
  const auto& pkg0 = t.at("pkg0");
  ModelParams p;
  p.smt_sigma = 1.5;
  SubInterval s = sub("a", "cpu0", 0, 10, 1000);
  s.interval_aperf = 3;
  s.interval_mperf = 2;
  EXPECT_DOUBLE_EQ(cpu_work(s, pkg0, t, p), 1500.0);
  s.smt_active = true;
  EXPECT_DOUBLE_EQ(cpu_work(s, pkg0, t, p), 2250.0);
  EXPECT_EQ(cpu_work(s, t.at("pkg1"), t, p), 0.0);
  EXPECT_THROW(cpu_work(s, t.at("dram0"), t, p), Error);
}

TEST(CpuWork, RatioComesFromTheWholeInterval) {
  const Topology t = make_regular_topology(1, 1, 1);
  SubInterval s = sub("a", "cpu0", 0, 10, 100);
  s.counters.aperf = 7;
  s.counters.mperf = 0;
  s.interval_aperf = 20;
  s.interval_mperf = 10;
  EXPECT_DOUBLE_EQ(cpu_work(s, t.at("pkg0"), t, {}), 200.0);
}

TEST(CpuWork, DegenerateCounters) {
  const Topology t = make_regular_topology(1, 1, 1);
  SubInterval s = sub("a", "cpu0", 0, 10, 100);
  s.interval_mperf = 0;
  try {
    cpu_work(s, t.at("pkg0"), t, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateCounter);
  }
  s.interval_aperf = 0;
  EXPECT_DOUBLE_EQ(cpu_work(s, t.at("pkg0"), t, {}), 100.0);
}

TEST(DramWork, LocalityWeights) {
  const Topology t = make_regular_topology(2, 1, 1);
  SubInterval s = sub("a", "cpu0", 0, 10, 0);
  s.counters.dram_reads = {{"dram0", 10}, {"dram1", 10}};
  const ModelParams p;
  EXPECT_DOUBLE_EQ(dram_work(s, t.at("dram0"), t, p), 10.0);
  EXPECT_DOUBLE_EQ(dram_work(s, t.at("dram1"), t, p), 96.7);
  s.counters.dram_reads["dramX"] = 1;
  try {
    dram_work(s, t.at("dram0"), t, p);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownComponent);
  }
}

TEST(AttributeIdle, CpuByBusyTimeDramOncePerReadingThread) {
  const Topology t = make_regular_topology(1, 2, 1);
  SubInterval a1 = sub("a", "cpu0", 0, 100, 1);
  SubInterval a2 = sub("a", "cpu0", 200, 300, 1);
  SubInterval b = sub("b", "cpu1", 0, 200, 1);
  a1.counters.dram_reads["dram0"] = 5;
  a2.counters.dram_reads["dram0"] = 7;
  b.counters.dram_reads["dram0"] = 0;
  const Window w = window_with({{"pkg0", energy(20.0, 8.0)}, {"dram0", energy(3.0, 3.0)}});
  const auto d = attribute_idle({a1, a2, b}, w, t);
  EXPECT_DOUBLE_EQ(d.joules.at({"a", "pkg0"}), 4.0);
  EXPECT_DOUBLE_EQ(d.joules.at({"b", "pkg0"}), 4.0);
  EXPECT_DOUBLE_EQ(d.joules.at({"a", "dram0"}), 3.0);
  EXPECT_FALSE(d.joules.count({"b", "dram0"}));
  EXPECT_TRUE(d.diagnostics.empty());
}

TEST(AttributeActive, ProportionalToWork) {
  const Topology t = make_regular_topology(1, 2, 1);
  const Window w = window_with({{"pkg0", energy(50.0, 10.0)}});
  const auto d = attribute_active({sub("a", "cpu0", 0, 10, 100), sub("b", "cpu1", 0, 10, 300)}, w, t, {});
  EXPECT_DOUBLE_EQ(d.joules.at({"a", "pkg0"}), 10.0);
  EXPECT_DOUBLE_EQ(d.joules.at({"b", "pkg0"}), 30.0);
}

TEST(AttributeActive, NoWorkGivesUnattributedDiagnostic) {
  const Topology t = make_regular_topology(1, 1, 1);
  const Window w = window_with({{"pkg0", energy(5.0, 1.0)}, {"dram0", energy(5.0, 1.0)}});
  const auto d = attribute_active({sub("a", "cpu0", 0, 10, 100)}, w, t, {});
  ASSERT_EQ(d.diagnostics.size(), 1u);
  EXPECT_EQ(d.diagnostics[0].kind, DiagnosticKind::kUnattributedActive);
  EXPECT_EQ(d.diagnostics[0].component, "dram0");
  EXPECT_DOUBLE_EQ(d.diagnostics[0].joules, 4.0);
}

TEST(Aggregate, WorkedExampleShares) {
  const Topology t = make_regular_topology(1, 2, 1);
  const Window w = window_with({{"pkg0", energy(50.0, 10.0)}});
  const auto r = attribute_window({sub("a", "cpu0", 0, kNanosPerSecond, 10), sub("b", "cpu1", 0, kNanosPerSecond, 20)},
                                  w, t, {}, registry({{"a", "A"}, {"b", "B"}}));
  // 40 J active split 1:2, 10 J idle split evenly.
  EXPECT_NEAR(r.application_total("A"), 40.0 / 3.0 + 5.0, 1e-12);
  EXPECT_NEAR(r.application_total("B"), 80.0 / 3.0 + 5.0, 1e-12);
  EXPECT_TRUE(check_conservation(r).empty());
}

TEST(Aggregate, OrphanThread) {
  const Topology t = make_regular_topology(1, 1, 1);
  const Window w = window_with({{"pkg0", energy(5.0, 1.0)}});
  auto reg = registry({{"a", "A"}});
  reg.erase("A");
  try {
    attribute_window({sub("a", "cpu0", 0, 10, 1)}, w, t, {}, reg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kOrphanThread);
  }
}

TEST(Aggregate, ClampDiagnosticComesFirst) {
  const Topology t = make_regular_topology(1, 1, 1);
  const Window w = window_with({{"pkg0", energy(1.0, 2.0)}, {"dram0", energy(1.0, 0.5)}});
  const auto r = attribute_window({sub("a", "cpu0", 0, 10, 1)}, w, t, {}, registry({{"a", "A"}}));
  ASSERT_EQ(r.diagnostics.size(), 3u);
  EXPECT_EQ(r.diagnostics[0].kind, DiagnosticKind::kClamp);
  EXPECT_EQ(r.diagnostics[1].kind, DiagnosticKind::kUnattributedActive);
  EXPECT_EQ(r.diagnostics[2].kind, DiagnosticKind::kUnattributedIdle);
  EXPECT_TRUE(check_conservation(r).empty());
}

TEST(CheckConservation, DetectsLostEnergy) {
  const Topology t = make_regular_topology(1, 1, 1);
  const Window w = window_with({{"pkg0", energy(5.0, 1.0)}});
  auto r = attribute_window({sub("a", "cpu0", 0, 10, 1)}, w, t, {}, registry({{"a", "A"}}));
  r.per_thread["a"]["pkg0"].active_j *= 0.5;
  EXPECT_EQ(check_conservation(r).size(), 1u);
}

TEST(ModelParams, Validation) {
  ModelParams p;
  EXPECT_NO_THROW(p.validate());
  p.smt_sigma = 0.99;
  EXPECT_THROW(p.validate(), Error);
  p = {};
  p.gamma_remote = 0.5;
  EXPECT_THROW(p.validate(), Error);
}

TEST(BruteForce, MatchesPipelineOnSmallTraces) {
  std::mt19937_64 rng(101);
  for (int i = 0; i < 40; ++i) {
    const TraceData trace = oracle::random_small_trace(rng, 4, 12);
    RunOptions options;
    options.window_ns = 100'000 + static_cast<Nanos>(rng() % 3'000'000);
    const RunResult got = run_attribution(trace, options);
    const auto diffs = oracle::compare(got, oracle::brute_force(trace, options.window_ns, options.params));
    ASSERT_TRUE(diffs.empty()) << "case " << i << ": " << diffs.front();
  }
}
