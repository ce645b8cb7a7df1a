#include "tracecheck/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <mutex>
#include <sstream>

#include "tracecheck/gen.hpp"
#include "tracecheck/ledger.hpp"

namespace tracecheck::cli {

using nlohmann::json;
namespace fs = std::filesystem;

int exit_code(Verdict v) noexcept {
  switch (v) {
    case Verdict::Okay: return 0;
    case Verdict::Warning: return 2;
    case Verdict::Alert: return 3;
  }
  return 3;
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

[[noreturn]] void rethrow_for(const fs::path& file, const Error& e, std::size_t line = 0) {
  std::string where = file.string();
  if (line > 0) where += ":" + std::to_string(line);
  throw Error(e.code(), where + ": " + e.message());
}

epcis::IngestEnvelope envelope_with_default(json j, const std::string& topic_default) {
  if (j.is_object() && !j.contains("topic") && !topic_default.empty()) j["topic"] = topic_default;
  return epcis::envelope_from_json(j);
}

std::vector<std::pair<std::size_t, epcis::IngestEnvelope>> read_envelopes(const fs::path& path,
                                                                           const std::string& topic) {
  const auto text = read_file(path);
  std::vector<std::pair<std::size_t, epcis::IngestEnvelope>> out;
  if (path.extension() == ".jsonl") {
    std::istringstream lines(text);
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        json j = json::parse(line);
        out.emplace_back(n, envelope_with_default(std::move(j), topic));
      } catch (const json::exception& e) {
        rethrow_for(path, Error(Errc::MalformedJson, e.what()), n);
      } catch (const Error& e) {
        rethrow_for(path, e, n);
      }
    }
    return out;
  }
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    rethrow_for(path, Error(Errc::MalformedJson, e.what()));
  }
  try {
    if (doc.is_array()) {
      for (std::size_t i = 0; i < doc.size(); ++i) out.emplace_back(i + 1, envelope_with_default(doc[i], topic));
    } else {
      out.emplace_back(1, envelope_with_default(std::move(doc), topic));
    }
  } catch (const Error& e) {
    rethrow_for(path, e, out.size() + 1);
  }
  return out;
}

epcis::ReadingKind csv_kind(const std::string& text, const IngestOptions& options) {
  const auto header = text.substr(0, text.find('\n'));
  if (header.find("lat") != std::string::npos && header.find("lon") != std::string::npos) {
    return epcis::ReadingKind::Gps;
  }
  return options.kind.value_or(epcis::ReadingKind::Temperature);
}

std::string default_journey(const model::Store& store, const IngestOptions& options) {
  if (options.journey) return *options.journey;
  const auto all = store.journeys();
  if (all.size() == 1) return all.front().journey_id;
  throw Error(Errc::InvalidArgument,
              "sensor CSV ingestion needs --journey when the state holds " + std::to_string(all.size()) +
                  " journeys");
}

struct CsvOutcome {
  std::size_t points = 0;
  std::vector<IngestReject> rejects;
  std::vector<std::string> tx_ids;
};

CsvOutcome ingest_csv(model::Store& store, const fs::path& path, const std::string& journey,
                      const IngestOptions& options) {
  const auto text = read_file(path);
  epcis::CsvParseResult parsed;
  try {
    parsed = epcis::parse_sensor_csv(text, csv_kind(text, options));
  } catch (const Error& e) {
    rethrow_for(path, e);
  }
  CsvOutcome out;
  for (const auto& r : parsed.rejects) out.rejects.push_back({path.string(), r.line, r.reason});
  const auto topic = options.csv_topic.empty() ? options.topic_default : options.csv_topic;
  std::vector<model::Point> batch;
  for (const auto& reading : parsed.readings) {
    auto step = store.resolve_step(journey, reading.timestamp);
    if (!step) {
      out.rejects.push_back({path.string(), 0,
                             "no step of " + journey + " covers " + reading.device_id + " at " +
                                 format_time(reading.timestamp)});
      continue;
    }
    batch.push_back({journey, *step, reading, topic});
  }
  if (batch.empty()) return out;
  try {
    out.tx_ids.push_back(store.append_points(batch));
    out.points = batch.size();
  } catch (const Error& e) {
    if (e.code() != Errc::DuplicatePoint && e.code() != Errc::DeviceKindMismatch) rethrow_for(path, e);
    // Fall back to point-by-point so one bad row does not drop the file.
    for (const auto& p : batch) {
      try {
        out.tx_ids.push_back(store.append_points({p}));
        ++out.points;
      } catch (const Error& inner) {
        if (inner.code() != Errc::DuplicatePoint && inner.code() != Errc::DeviceKindMismatch) {
          rethrow_for(path, inner);
        }
        out.rejects.push_back({path.string(), 0, inner.what()});
      }
    }
  }
  return out;
}

}  // namespace

json to_json(const IngestSummary& s) {
  json rejects = json::array();
  for (const auto& r : s.rejects) rejects.push_back({{"file", r.file}, {"line", r.line}, {"reason", r.reason}});
  return {{"files", s.files},     {"events", s.events}, {"applied", s.applied}, {"skipped", s.skipped},
          {"points", s.points},   {"rejects", std::move(rejects)},           {"txIds", s.tx_ids}};
}

IngestSummary ingest_files(model::Store& store, const std::vector<fs::path>& paths,
                           const IngestOptions& options) {
  IngestSummary summary;
  std::vector<fs::path> json_files, csv_files;
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw Error(Errc::Io, p.string() + ": no such file");
    (p.extension() == ".csv" ? csv_files : json_files).push_back(p);
  }
  summary.files = paths.size();

  for (const auto& path : json_files) {
    for (const auto& [line, env] : read_envelopes(path, options.topic_default)) {
      ++summary.events;
      model::ApplyResult r;
      try {
        r = store.apply_event(env);
      } catch (const Error& e) {
        rethrow_for(path, e, line);
      }
      if (r.skipped) {
        ++summary.skipped;
      } else {
        ++summary.applied;
        summary.tx_ids.push_back(r.tx_id);
      }
    }
  }

  if (csv_files.empty()) return summary;
  const auto journey = default_journey(store, options);
  std::vector<CsvOutcome> outcomes(csv_files.size());
  if (options.parallel && csv_files.size() > 1) {
    std::vector<std::future<CsvOutcome>> futures;
    for (const auto& path : csv_files) {
      futures.push_back(std::async(std::launch::async, [&store, path, &journey, &options] {
        return ingest_csv(store, path, journey, options);
      }));
    }
    for (std::size_t i = 0; i < futures.size(); ++i) outcomes[i] = futures[i].get();
  } else {
    for (std::size_t i = 0; i < csv_files.size(); ++i) {
      outcomes[i] = ingest_csv(store, csv_files[i], journey, options);
    }
  }
  for (auto& o : outcomes) {
    summary.points += o.points;
    summary.rejects.insert(summary.rejects.end(), o.rejects.begin(), o.rejects.end());
    summary.tx_ids.insert(summary.tx_ids.end(), o.tx_ids.begin(), o.tx_ids.end());
  }
  return summary;
}

// ---------------------------------------------------------------------------

std::optional<Layer> parse_layer(std::string_view text) noexcept {
  if (text == "raw") return Layer::Raw;
  if (text == "smoothed") return Layer::Smoothed;
  if (text == "fused") return Layer::Fused;
  if (text == "violations") return Layer::Violations;
  return std::nullopt;
}

namespace {

json line_string(const std::vector<geo::GeoSample>& track, json properties) {
  json coords = json::array();
  for (const auto& s : track) coords.push_back({s.pos.lon, s.pos.lat});
  json times = json::array();
  for (const auto& s : track) times.push_back(format_time(s.time));
  properties["times"] = std::move(times);
  return {{"type", "Feature"},
          {"geometry", {{"type", "LineString"}, {"coordinates", std::move(coords)}}},
          {"properties", std::move(properties)}};
}

void add_violation_points(json& features, const verify::StepEvaluation& ev) {
  for (const auto& r : ev.results) {
    if (r.rule_name != "geofence" && r.rule_name != "backtrack") continue;
    auto bundle = ev.gps.find(r.topic);
    if (bundle == ev.gps.end()) continue;
    const auto& track = bundle->second.track;
    for (const auto& v : r.violations) {
      if (!v.first_index || *v.first_index >= track.size()) continue;
      const auto& at = track[*v.first_index];
      json props = {{"layer", "violations"}, {"rule", r.rule_name}, {"code", v.code},
                    {"severity", std::string(to_string(v.level))}, {"detail", v.detail},
                    {"magnitude", v.magnitude}, {"time", format_time(at.time)}};
      if (!r.topic.empty()) props["topic"] = r.topic;
      if (v.last_index) props["lastIndex"] = *v.last_index;
      features.push_back({{"type", "Feature"},
                          {"geometry", {{"type", "Point"}, {"coordinates", {at.pos.lon, at.pos.lat}}}},
                          {"properties", std::move(props)}});
    }
  }
}

}  // namespace

json export_geojson(const verify::StepEvaluation& ev, Layer layer) {
  const bool any_gps = std::any_of(ev.gps.begin(), ev.gps.end(), [](const auto& kv) {
    return std::any_of(kv.second.raw.begin(), kv.second.raw.end(),
                       [](const auto& d) { return !d.second.empty(); });
  });
  if (!any_gps) throw Error(Errc::NoGpsData, "step " + ev.step.step_id + " has no GPS points");

  json features = json::array();
  for (const auto& [group, bundle] : ev.gps) {
    json base = {{"stepId", ev.step.step_id}};
    if (!group.empty()) base["topic"] = group;
    switch (layer) {
      case Layer::Raw:
      case Layer::Smoothed: {
        const auto& per_device = layer == Layer::Raw ? bundle.raw : bundle.smoothed;
        for (const auto& [device, track] : per_device) {
          json props = base;
          props["layer"] = layer == Layer::Raw ? "raw" : "smoothed";
          props["deviceId"] = device;
          features.push_back(line_string(track, std::move(props)));
        }
        break;
      }
      case Layer::Fused: {
        json props = base;
        props["layer"] = "fused";
        props["pipeline"] = bundle.pipeline;
        json rel = json::object();
        for (const auto& [d, score] : bundle.reliability) rel[d] = score;
        props["reliability"] = std::move(rel);
        features.push_back(line_string(bundle.track, std::move(props)));
        break;
      }
      case Layer::Violations: break;
    }
  }
  if (layer == Layer::Fused || layer == Layer::Violations) add_violation_points(features, ev);
  return {{"type", "FeatureCollection"}, {"features", std::move(features)}};
}

// ---------------------------------------------------------------------------

json build_report(const model::Store& store, const std::string& subject) {
  std::string journey_id;
  std::string kind;
  std::set<std::string> subjects{subject};
  if (auto step = store.find_step(subject)) {
    journey_id = step->journey_id;
    kind = "step";
  } else if (store.find_journey(subject)) {
    journey_id = subject;
    kind = "journey";
    for (const auto& s : store.steps(subject)) subjects.insert(s.step_id);
  } else {
    throw Error(Errc::UnknownSubject, "no step or journey named " + subject);
  }

  json history = json::array();
  for (const auto& v : store.verifications(subject)) history.push_back(model::to_json(v));

  json steps = json::array();
  if (kind == "journey") {
    for (const auto& s : store.steps(subject)) {
      json entry = model::to_json(s);
      const auto vs = store.verifications(s.step_id);
      if (!vs.empty()) entry["latestOutcome"] = std::string(to_string(vs.back().outcome));
      steps.push_back(std::move(entry));
    }
  }

  json discrepancies = json::array();
  const auto journey_history = store.verifications(journey_id);
  if (!journey_history.empty()) {
    for (const auto& d : journey_history.back().discrepancies) discrepancies.push_back(model::to_json(d));
  } else {
    const auto claims = store.claims(journey_id);
    for (const auto& d : verify::compare_claims(claims)) discrepancies.push_back(model::to_json(d));
  }

  json notifications = json::array();
  for (const auto& record : store.ledger().tx_log()) {
    for (const auto& e : record.events) {
      if (e.name != verify::kFlaggedEvent) continue;
      try {
        auto n = audit::to_notification(e, record.timestamp);
        if (n && subjects.contains(n->subject)) notifications.push_back(audit::to_json(*n));
      } catch (const Error&) {
        // malformed flagged payloads are reported by the notifier, not here
      }
    }
  }

  return {{"subject", subject},
          {"subjectKind", kind},
          {"journeyId", journey_id},
          {"verifications", std::move(history)},
          {"steps", std::move(steps)},
          {"lineage",
           {{"up", model::to_json(store.lineage(journey_id, model::Direction::Up))},
            {"down", model::to_json(store.lineage(journey_id, model::Direction::Down))}}},
          {"discrepancies", std::move(discrepancies)},
          {"notifications", std::move(notifications)},
          {"ledgerHeight", store.ledger().height()}};
}

// ---------------------------------------------------------------------------

LatencyStats latency_stats(const std::vector<double>& xs) {
  LatencyStats s;
  s.n = xs.size();
  if (xs.empty()) return s;
  s.min_ms = *std::min_element(xs.begin(), xs.end());
  s.max_ms = *std::max_element(xs.begin(), xs.end());
  double sum = 0;
  for (double x : xs) sum += x;
  s.avg_ms = sum / static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - s.avg_ms) * (x - s.avg_ms);
  s.stddev_ms = std::sqrt(ss / static_cast<double>(xs.size()));
  return s;
}

json to_json(const LatencyStats& s) {
  return {{"n", s.n}, {"min", s.min_ms}, {"max", s.max_ms}, {"avg", s.avg_ms}, {"stddev", s.stddev_ms}};
}

std::optional<BenchMode> parse_bench_mode(std::string_view text) noexcept {
  if (text == "ingest-baseline") return BenchMode::IngestBaseline;
  if (text == "ingest-engine") return BenchMode::IngestEngine;
  if (text == "verify") return BenchMode::Verify;
  return std::nullopt;
}

namespace {

const char* mode_name(BenchMode m) {
  switch (m) {
    case BenchMode::IngestBaseline: return "ingest-baseline";
    case BenchMode::IngestEngine: return "ingest-engine";
    case BenchMode::Verify: return "verify";
  }
  return "?";
}

double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

void maybe_journal(ledger::WorldState& ledger, const BenchOptions& o, const std::string& name) {
  if (!o.journal_dir) return;
  fs::create_directories(*o.journal_dir);
  const auto path = *o.journal_dir / (name + ".journal");
  fs::remove(path);
  ledger.attach_journal(path);
}

const char* const kTopics[] = {"producer", "transporter", "retailer"};

std::vector<double> bench_ingest(const BenchOptions& o) {
  const auto events = bench_events(o.events, o.seed);
  ledger::WorldState ledger;
  maybe_journal(ledger, o, mode_name(o.mode));
  model::Store store(ledger);
  std::vector<double> out;
  out.reserve(events.size());
  for (const auto& env : events) {
    const auto t0 = std::chrono::steady_clock::now();
    if (o.mode == BenchMode::IngestBaseline) {
      const auto id = epcis::event_identity(env);
      ledger.submit_transaction({{ledger::encode_composite_key("RawEvent", {id}), epcis::serialize_envelope(env)}},
                                {}, id);
    } else {
      store.apply_event(env);
    }
    out.push_back(elapsed_ms(t0));
  }
  return out;
}

std::string bench_policy(std::size_t devices, const std::vector<geo::LatLon>& route) {
  json corridor = json::array();
  for (const auto& p : gen::corridor_polygon(route, 500)) corridor.push_back({p.lat, p.lon});
  return json{{"policyId", "bench"},
              {"productType", "*"},
              {"mode", devices > 1 ? "MSoD" : "SSoD"},
              {"rules",
               {{{"ruleName", "geofence"}, {"params", {{"polygon", corridor}}}},
                {{"ruleName", "backtrack"}, {"params", {{"destination", {route.back().lat, route.back().lon}}}}}}}}
      .dump();
}

std::vector<double> bench_verify(const BenchOptions& o, std::size_t batch) {
  ledger::WorldState ledger;
  maybe_journal(ledger, o, "verify-" + std::to_string(batch));
  model::Store store(ledger);
  const std::vector<geo::LatLon> route{{40.137, -7.501}, {40.20, -7.45}};
  store.load_policy(bench_policy(o.devices, route));

  const std::size_t devices = std::max<std::size_t>(1, o.devices);
  const std::size_t per_device = std::max<std::size_t>(2, batch / devices);
  gen::Scenario sc;
  sc.name = "bench";
  sc.start = parse_time("2024-05-01T08:00:00Z");
  sc.waypoints = route;
  sc.speed_mps = 10;
  sc.sample_interval_sec = gen::route_duration_sec(sc) / static_cast<double>(per_device - 1);
  for (std::size_t d = 0; d < devices; ++d) {
    sc.sensors.push_back({"gps-" + std::to_string(d), epcis::ReadingKind::Gps, kTopics[0], 0, {}, {}});
    sc.faults.push_back({gen::FaultSpec::Kind::GaussianNoise, "gps-" + std::to_string(d), 5.0 * static_cast<double>(d + 1),
                         0, 0, 0, {}, std::nullopt, std::nullopt, 0});
  }
  const auto duration_min = gen::route_duration_sec(sc) / 60.0;
  sc.events_plan = {
      {0.0, kTopics[0], {{"bizStep", "shipping"}, {"action", "OBSERVE"}}},
      {duration_min + 1.0, kTopics[2], {{"bizStep", "receiving"}, {"action", "OBSERVE"}}},
  };
  const std::string journey = "urn:epc:id:sgtin:bench.verify";
  for (const auto& env : gen::gen_events(sc, journey, o.seed)) store.apply_event(env);
  const auto step_id = store.steps(journey).front().step_id;
  std::vector<model::Point> points;
  for (const auto& r : gen::gen_readings(sc, o.seed)) points.push_back({journey, step_id, r.reading, r.topic});
  store.append_points(points);

  verify::VerificationManager manager(store);
  std::vector<double> out;
  for (std::size_t i = 0; i < o.repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    manager.verify_step({step_id, "manual", "bench"});
    out.push_back(elapsed_ms(t0));
  }
  return out;
}

}  // namespace

std::vector<epcis::IngestEnvelope> bench_events(std::size_t n, std::uint64_t seed) {
  std::vector<epcis::IngestEnvelope> out;
  out.reserve(n);
  const auto start = parse_time("2024-05-01T08:00:00Z");
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t journey = i / 2;
    epcis::IngestEnvelope env;
    env.topic = kTopics[i % 3];
    auto& e = env.event;
    e.type = epcis::EventType::Object;
    e.event_time = start + std::chrono::minutes(journey) + std::chrono::minutes(i % 2 == 0 ? 0 : 16);
    e.epc_list = {"urn:epc:id:sgtin:bench." + std::to_string(seed) + "." + std::to_string(journey)};
    e.biz_step = i % 2 == 0 ? "shipping" : "receiving";
    e.biz_location = i % 2 == 0 ? "urn:epc:id:sgln:farm" : "urn:epc:id:sgln:store";
    e.source_party = env.topic;
    e.action = epcis::Action::Observe;
    e.item_attributes = {{"productType", std::string("cherry")},
                         {"weightKg", 10.0 + static_cast<double>(journey % 7)}};
    out.push_back(std::move(env));
  }
  return out;
}

std::vector<BenchRow> run_bench(const BenchOptions& o) {
  if (o.mode != BenchMode::Verify && o.events < 1) {
    throw Error(Errc::InvalidArgument, "bench needs at least one event");
  }
  std::vector<BenchRow> rows;
  if (o.mode == BenchMode::Verify) {
    for (auto batch : o.batches) rows.push_back({mode_name(o.mode), batch, latency_stats(bench_verify(o, batch))});
  } else {
    rows.push_back({mode_name(o.mode), o.events, latency_stats(bench_ingest(o))});
  }
  return rows;
}

json to_json(const BenchRow& row) {
  return {{"mode", row.mode}, {"size", row.size}, {"unit", "ms"}, {"stats", to_json(row.stats)}};
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "mode,size,n,min_ms,max_ms,avg_ms,stddev_ms\n";
  out.precision(6);
  out << std::fixed;
  for (const auto& r : rows) {
    out << r.mode << ',' << r.size << ',' << r.stats.n << ',' << r.stats.min_ms << ',' << r.stats.max_ms << ','
        << r.stats.avg_ms << ',' << r.stats.stddev_ms << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------

std::vector<std::unique_ptr<audit::Sink>> load_sinks(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    rethrow_for(path, Error(Errc::MalformedJson, e.what()));
  }
  std::vector<std::unique_ptr<audit::Sink>> sinks;
  const auto add = [&](const json& j) { sinks.push_back(audit::make_sink(audit::parse_sink_config(j))); };
  if (doc.is_array()) {
    for (const auto& j : doc) add(j);
  } else {
    add(doc);
  }
  return sinks;
}

}  // namespace tracecheck::cli
