// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Tolerances and runtime budgets are pinned
// below; nothing here reads them from the environment.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"
#include "tracecheck/cli.hpp"
#include "tracecheck/gen.hpp"
#include "tracecheck/rules.hpp"
#include "tracecheck/store.hpp"
#include "tracecheck/verify.hpp"

namespace tc = tracecheck;
using tc::Verdict;
using tc::testing::at_min;
using tc::testing::fixture_path;
using tc::testing::read_fixture;
using nlohmann::json;

namespace {

constexpr double kTrapezoidTol = 1e-9;
constexpr double kRuntimeThresholdSec = 1;
constexpr double kRuntimeGeofenceSec = 5;
constexpr double kRuntimeMsodSec = 30;
constexpr double kRuntimePerfSec = 120;
constexpr int kMsodSeeds = 20;
constexpr int kMsodMinWins = 18;
constexpr double kIngestOverheadMax = 0.05;
constexpr double kVerifyRatioMax = 3.0;
constexpr std::size_t kBenchEvents = 1000;
constexpr double kDetourCoverageMin = 0.8;

struct Outcome {
  bool pass = true;
  std::ostringstream why;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) why << "; ";
      why << what;
      pass = false;
    }
  }
};

double elapsed_sec(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - since).count();
}

std::string fmt(const char* f, double a, double b = 0, double c = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

std::vector<tc::rules::ScalarSample> cold_chain_series() {
  std::vector<tc::rules::ScalarSample> s;
  const auto& v = tc::testing::cold_chain_values();
  for (std::size_t i = 0; i < v.size(); ++i) s.push_back({at_min(10.0 * static_cast<double>(i)), v[i]});
  return s;
}

std::vector<tc::model::Point> points_of(const std::vector<tc::gen::SensorReading>& readings) {
  std::vector<tc::model::Point> out;
  for (const auto& r : readings) out.push_back({"J", "S", r.reading, r.topic});
  return out;
}

tc::verify::GpsBundle prepare(const std::vector<tc::gen::SensorReading>& readings, tc::model::Mode mode) {
  return tc::verify::prepare_gps(points_of(readings), mode, {}, false, {});
}

std::size_t count_code(const tc::model::RuleResult& r, const std::string& code) {
  std::size_t n = 0;
  for (const auto& v : r.violations) n += v.code == code;
  return n;
}

// ---------------------------------------------------------------------------

Outcome rectangle_reproduction() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  tc::rules::ThresholdParams p;
  p.t_max = 4;
  p.cumulative_limit = 30;
  p.mode = tc::rules::SamplingMode::Rectangle;
  const auto series = cold_chain_series();
  const auto r = tc::rules::rule_threshold(series, p);
  std::vector<double> flagged;
  for (const auto& v : r.violations) {
    if (v.code == "aboveMax") flagged.push_back(series.at(*v.first_index).value);
  }
  o.check(flagged == std::vector<double>{4.5, 5.0, 6.0}, "fixed-threshold flags are not {4.5, 5.0, 6.0}");
  const auto alert = r.metrics.find("cumulativeAlertIndex");
  o.check(alert != r.metrics.end() && series.at(static_cast<std::size_t>(alert->second)).value == 6.0,
          "cumulative alert not at the 6.0 sample");
  o.check(r.metrics.at("cumulativeSeverity") == 35.0, fmt("severity %g, expected 35", r.metrics.at("cumulativeSeverity")));
  o.check(r.verdict == Verdict::Alert, "verdict is not alert");
  const double t = elapsed_sec(start);
  o.check(t < kRuntimeThresholdSec, fmt("runtime %.3f s", t));
  return o;
}

Outcome trapezoid_integral() {
  Outcome o;
  tc::rules::ThresholdParams p;
  p.t_max = 4;
  p.cumulative_limit = 30;
  const auto series = cold_chain_series();
  p.mode = tc::rules::SamplingMode::Trapezoid;
  const auto trap = tc::rules::cumulative_severity(series, p);
  p.mode = tc::rules::SamplingMode::Rectangle;
  const auto rect = tc::rules::cumulative_severity(series, p);

  // Hand oracle: (E_i + E_{i+1}) / 2 * 10 min over the excesses above 4.
  const std::vector<double> expected{2.5, 7.5, 5, 0, 0, 0, 10, 10};
  o.check(trap.contributions.size() == expected.size(), "wrong number of trapezoid segments");
  for (std::size_t i = 0; i < expected.size() && i < trap.contributions.size(); ++i) {
    o.check(std::abs(trap.contributions[i] - expected[i]) <= kTrapezoidTol,
            fmt("segment %g contributes %g, expected %g", static_cast<double>(i), trap.contributions[i], expected[i]));
  }
  o.check(std::abs(trap.total - 35) <= kTrapezoidTol, fmt("trapezoid total %g", trap.total));
  o.check(trap.alert_index == series.size() - 1, "trapezoid running sum does not first exceed 30 at the final sample");
  // Both modes agree on the total but not on when the limit is crossed.
  o.check(std::abs(rect.total - trap.total) <= kTrapezoidTol, "modes disagree on the total");
  o.check(rect.alert_index == 7u && trap.alert_index != rect.alert_index,
          "rectangle/trapezoid alert positions are not 7 vs 8");
  return o;
}

Outcome claims_reproduction() {
  Outcome o;
  tc::ledger::WorldState ws;
  tc::model::Store store(ws);
  store.load_policy(read_fixture("claims_policy.json"));
  tc::cli::ingest_files(store, {fixture_path("claims_events.jsonl")});
  tc::verify::VerificationManager mgr(store);
  const auto v = mgr.verify_journey({"urn:epc:id:sgtin:560.cherry.box7", "manual", ""});
  std::set<std::string> discrepant, consistent;
  for (const auto& d : v.discrepancies) (d.discrepant ? discrepant : consistent).insert(d.attribute);
  o.check(discrepant == std::set<std::string>{"parentId", "weightKg"}, "discrepant set is not {parentId, weightKg}");
  o.check(consistent.count("variety") && consistent.count("colorGrade"), "variety/colorGrade not consistent");
  o.check(v.outcome == Verdict::Alert, "journey outcome is not alert");
  return o;
}

Outcome geofence_pair() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  tc::gen::Scenario valid;
  valid.start = at_min(0);
  valid.waypoints = {{40.137, -7.501}, {40.160, -7.480}, {40.190, -7.478}, {40.210, -7.455}};
  valid.speed_mps = 12;
  valid.sample_interval_sec = 10;
  valid.sensors = {{"gps-a", tc::epcis::ReadingKind::Gps, "carrier", 0, std::nullopt, {}}};
  valid.faults = {{tc::gen::FaultSpec::Kind::GaussianNoise, "", 3, 0, 0, 0, {}, {}, {}, 0}};

  // The nearby field: same shape, 700 m east of the authorized road.
  auto field = valid;
  const tc::geo::LocalFrame frame(valid.waypoints.front());
  for (auto& w : field.waypoints) {
    auto xy = frame.to_local(w);
    xy.east += 700;
    w = frame.to_geo(xy);
  }

  tc::rules::GeofenceParams gp;
  gp.polygon = tc::gen::corridor_polygon(valid.waypoints, 150);
  gp.start_center = valid.waypoints.front();
  gp.start_radius_m = 250;
  gp.end_center = valid.waypoints.back();
  gp.end_radius_m = 250;

  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto ok = tc::rules::rule_geofence(prepare(tc::gen::gen_readings(valid, seed), tc::model::Mode::SSoD).track, gp);
    const auto bad = tc::rules::rule_geofence(prepare(tc::gen::gen_readings(field, seed), tc::model::Mode::SSoD).track, gp);
    const auto s = static_cast<double>(seed);
    o.check(ok.verdict == Verdict::Okay, fmt("seed %g: valid route not okay", s));
    o.check(count_code(bad, "outsideGeofence") >= 1, fmt("seed %g: field route has no outsideGeofence", s));
    o.check(count_code(bad, "startOutOfRange") == 1, fmt("seed %g: field route passes the start radius", s));
  }
  const double t = elapsed_sec(start);
  o.check(t < kRuntimeGeofenceSec, fmt("runtime %.3f s", t));
  return o;
}

Outcome backtrack_pair() {
  Outcome o;
  const auto j = json::parse(read_fixture("detour_scenario.json"));
  const auto sc = tc::gen::parse_scenario(j);
  const auto seed = j.at("seed").get<std::uint64_t>();
  tc::rules::BacktrackParams bp;
  bp.destination = sc.waypoints.back();

  const auto detoured = tc::gen::inject_faults(tc::gen::gen_route(sc), sc.faults, seed, "gps-a");
  const auto window = detoured.windows.at(0);
  const auto r = tc::rules::rule_backtrack(prepare(tc::gen::gen_readings(sc, seed), tc::model::Mode::SSoD).track, bp);
  o.check(!r.violations.empty(), "detour not flagged");
  double covered = 0;
  for (const auto& v : r.violations) {
    o.check(*v.first_time >= window.start && *v.last_time <= window.end, "violation outside the detour window");
    covered += tc::seconds_between(*v.first_time, *v.last_time);
  }
  const double span = tc::seconds_between(window.start, window.end);
  o.check(covered >= kDetourCoverageMin * span, fmt("flagged %.0f s of a %.0f s detour", covered, span));

  auto straight = sc;
  straight.faults.erase(straight.faults.begin());
  const auto clean =
      tc::rules::rule_backtrack(prepare(tc::gen::gen_readings(straight, seed), tc::model::Mode::SSoD).track, bp);
  o.check(clean.violations.empty(), fmt("monotone approach flagged %g times", static_cast<double>(clean.violations.size())));
  return o;
}

Outcome msod_superiority() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  const auto j = json::parse(read_fixture("msod_scenario.json"));
  auto sc = tc::gen::parse_scenario(j);
  const auto fixture_seed = j.at("seed").get<std::uint64_t>();
  tc::rules::GeofenceParams gp;
  gp.polygon = tc::gen::corridor_polygon(sc.waypoints, j.at("corridorHalfWidthM").get<double>());

  const auto fixture = tc::gen::gen_readings(sc, fixture_seed);
  const auto fused = prepare(fixture, tc::model::Mode::MSoD);
  const auto equal = prepare(fixture, tc::model::Mode::SSoD);
  o.check(fused.pipeline == "fused" && equal.pipeline == "equal", "unexpected pipelines " + fused.pipeline + "/" + equal.pipeline);
  o.check(tc::rules::rule_geofence(fused.track, gp).verdict == Verdict::Okay, "fused track fails the geofence");
  o.check(tc::rules::rule_geofence(equal.track, gp).verdict != Verdict::Okay, "equal-weight track passes the geofence");

  int wins = 0;
  for (int seed = 1; seed <= kMsodSeeds; ++seed) {
    const auto readings = tc::gen::gen_readings(sc, static_cast<std::uint64_t>(seed));
    const double f = tc::gen::max_cross_track(prepare(readings, tc::model::Mode::MSoD).track, sc.waypoints);
    const double e = tc::gen::max_cross_track(prepare(readings, tc::model::Mode::SSoD).track, sc.waypoints);
    wins += f <= e;
  }
  o.check(wins >= kMsodMinWins, fmt("fused wins %g of %g seeds", wins, kMsodSeeds));
  const double t = elapsed_sec(start);
  o.check(t < kRuntimeMsodSec, fmt("runtime %.3f s", t));
  if (o.pass) o.why << "fused wins " << wins << "/" << kMsodSeeds;
  return o;
}

tc::model::GuardsVerification pilot_run(double minutes, const std::string& timeout_params) {
  tc::ledger::WorldState ws;
  tc::model::Store store(ws);
  store.load_policy(R"({"policyId": "pilot", "productType": "cherry", "mode": "SSoD", "phases": ["shipping"],
    "rules": [{"ruleName": "shipmentTimeout", "params": )" + timeout_params + "}]}");
  tc::gen::Scenario sc;
  sc.start = at_min(0);
  sc.waypoints = {{40.137, -7.501}, {41.149, -8.611}};
  sc.speed_mps = tc::gen::route_length_m(sc.waypoints) / (minutes * 60);
  sc.events_plan = {{0.0, "producer", {{"bizStep", "shipping"}, {"itemAttributes", {{"productType", "cherry"}}}}},
                    {std::nullopt, "receiver", {{"bizStep", "receiving"}}}};
  for (const auto& e : tc::gen::gen_events(sc, "urn:epc:id:sgtin:560.cherry.pilot")) store.apply_event(e);
  tc::verify::VerificationManager mgr(store);
  return mgr.verify_step({store.steps("urn:epc:id:sgtin:560.cherry.pilot").at(0).step_id, "manual", ""});
}

Outcome pilot_timing() {
  Outcome o;
  const auto on_time = pilot_run(16, R"({"minDurationMin": 5, "maxDurationMin": 60})");
  o.check(on_time.outcome == Verdict::Okay, "16-minute shipment is not okay");
  const auto fast = pilot_run(105, R"({"minDurationMin": 150})");
  bool flagged = false;
  for (const auto& r : fast.rule_results) {
    for (const auto& v : r.violations) {
      flagged |= v.code == "implausiblyShort" && v.level == Verdict::Alert &&
                 v.detail.find("implausibly short") != std::string::npos;
    }
  }
  o.check(flagged && fast.outcome == Verdict::Alert, "105-minute shipment not flagged implausibly short");
  return o;
}

Outcome performance() {
  Outcome o;
  const auto start = std::chrono::steady_clock::now();
  const auto scratch = std::filesystem::temp_directory_path() / "tracecheck-acceptance";
  std::filesystem::remove_all(scratch);
  std::filesystem::create_directories(scratch);

  // (a) Mean per-transaction latency, engine versus raw storage, both in
  // memory and on a journaled ledger.
  auto mean_of = [&](tc::cli::BenchMode mode, std::optional<std::filesystem::path> journal) {
    tc::cli::BenchOptions b;
    b.mode = mode;
    b.events = kBenchEvents;
    b.journal_dir = journal;
    return tc::cli::run_bench(b).at(0).stats.avg_ms;
  };
  std::ostringstream info;
  for (bool journaled : {false, true}) {
    std::optional<std::filesystem::path> dir;
    if (journaled) dir = scratch / "journal";
    const double base = mean_of(tc::cli::BenchMode::IngestBaseline, dir ? std::optional(*dir / "base") : dir);
    const double engine = mean_of(tc::cli::BenchMode::IngestEngine, dir ? std::optional(*dir / "engine") : dir);
    const double overhead = engine / base - 1;
    info << (journaled ? " journaled" : " in-memory") << " overhead " << fmt("%+.1f%%", overhead * 100) << " ("
         << fmt("%.4f vs %.4f ms", engine, base) << ")";
    o.check(overhead <= kIngestOverheadMax,
            std::string("(a) ") + (journaled ? "journaled" : "in-memory") + " ingest overhead " +
                fmt("%.1f%% > %.0f%%", overhead * 100, kIngestOverheadMax * 100));
  }

  // (b) Verify latency, 1000-point batch versus 10-point batch.
  tc::cli::BenchOptions v;
  v.mode = tc::cli::BenchMode::Verify;
  v.batches = {10, 1000};
  v.repeats = 5;
  const auto rows = tc::cli::run_bench(v);
  const double ratio = rows.at(1).stats.avg_ms / rows.at(0).stats.avg_ms;
  info << " verify ratio " << fmt("%.1fx (%.3f vs %.3f ms)", ratio, rows[1].stats.avg_ms, rows[0].stats.avg_ms);
  o.check(ratio <= kVerifyRatioMax, fmt("(b) verify 1000/10 latency ratio %.1f > %.0f", ratio, kVerifyRatioMax));

  // (c) Three device files ingested concurrently.
  tc::ledger::WorldState ws;
  tc::model::Store store(ws);
  tc::cli::ingest_files(store, {fixture_path("cold_chain_events.jsonl")});
  std::vector<std::filesystem::path> paths;
  constexpr int kPerDevice = 500;
  for (int d = 0; d < 3; ++d) {
    paths.push_back(scratch / ("gps-" + std::to_string(d) + ".csv"));
    std::ofstream out(paths.back());
    out << "device_id,timestamp,lat,lon\n";
    for (int i = 0; i < kPerDevice; ++i) {
      out << "gps-" << d << "," << tc::format_time(at_min(i / 6.0)) << "," << 40.137 + i * 1e-5 << ",-7.501\n";
    }
  }
  std::size_t committed = 0, rejected = 0;
  try {
    const auto s = tc::cli::ingest_files(store, paths, {.parallel = true});
    committed = s.points;
    rejected = s.rejects.size();
  } catch (const tc::Error& e) {
    o.check(false, std::string("(c) parallel ingest threw ") + e.what());
  }
  o.check(committed == 3 * kPerDevice && rejected == 0,
          fmt("(c) %g of %g points committed, %g rejected", static_cast<double>(committed), 3.0 * kPerDevice,
              static_cast<double>(rejected)));

  const double t = elapsed_sec(start);
  o.check(t < kRuntimePerfSec, fmt("runtime %.1f s", t));
  o.why << (o.pass ? "" : " |") << info.str();
  std::filesystem::remove_all(scratch);
  return o;
}

Outcome invariants() {
  Outcome o;
  const std::vector<std::pair<const char*, std::function<std::string()>>> suites{
      {"ledger replay", [] { return tc::testing::prop_ledger_replay(100); }},
      {"kalman psd", [] { return tc::testing::prop_kalman_psd(100); }},
      {"fusion convexity", [] { return tc::testing::prop_fusion_convex(100); }},
      {"weight monotonicity", [] { return tc::testing::prop_weight_monotone(1000); }},
      {"threshold additivity", [] { return tc::testing::prop_threshold_additive(500); }},
      {"aggregate max", [] { return tc::testing::prop_aggregate_max(1000); }},
      {"dsod permutation", [] { return tc::testing::prop_dsod_permutation(300); }},
      {"audit no-loss", [] { return tc::testing::prop_audit_no_loss(150); }},
  };
  for (const auto& [name, run] : suites) {
    const auto failure = run();
    o.check(failure.empty(), std::string(name) + ": " + failure);
  }
  return o;
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"1 cold-chain rectangle reproduction", rectangle_reproduction},
      {"2 trapezoid integral and mode discrepancy", trapezoid_integral},
      {"3 stakeholder claim discrepancies", claims_reproduction},
      {"4 geofence valid route vs nearby field", geofence_pair},
      {"5 backtrack detour vs monotone approach", backtrack_pair},
      {"6 MSoD fused vs equal-weight", msod_superiority},
      {"7 pilot shipment timing", pilot_timing},
      {"8 desk-scale performance", performance},
      {"9 invariant suites", invariants},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.why << "threw: " << e.what();
    }
    failed += !o.pass;
    const auto why = o.why.str();
    std::printf("%s  %s%s%s\n", o.pass ? "PASS" : "FAIL", name, why.empty() ? "" : "  -- ", why.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
