// tracecheck command-line tool. Every subcommand prints JSON; state lives in
// a snapshot file given by --state.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "tracecheck/audit.hpp"
#include "tracecheck/cli.hpp"
#include "tracecheck/gen.hpp"
#include "tracecheck/ledger.hpp"
#include "tracecheck/store.hpp"
#include "tracecheck/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tracecheck;

namespace {

struct Session {
  ledger::WorldState ledger;
  std::unique_ptr<model::Store> store;
  std::unique_ptr<audit::Notifier> notifier;
  fs::path state_path;

  Session(const fs::path& state, const std::string& sink_config) : state_path(state) {
    if (!state.empty() && fs::exists(state)) ledger.load(state);
    store = std::make_unique<model::Store>(ledger);
    if (!sink_config.empty()) {
      notifier = std::make_unique<audit::Notifier>(cli::load_sinks(sink_config));
      notifier->attach(ledger);
    }
  }

  void save() const {
    if (!state_path.empty()) ledger.save(state_path);
  }
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
  if (!out) throw Error(Errc::Io, "cannot write " + p.string());
}

int fail(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << '\n';
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tracecheck: verifiable supply chain traceability on a simulated ledger"};
  app.require_subcommand(1);

  std::string state = "tracecheck.state.json";
  std::string sink;
  app.add_option("--state", state, "ledger snapshot file (created when missing)");
  app.add_option("--sink", sink, "notification sink config (JSON object or array)");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "apply EPCIS envelopes (.json/.jsonl) and sensor CSVs");
  std::vector<std::string> ingest_paths;
  cli::IngestOptions ingest_opts;
  std::string ingest_journey, ingest_kind;
  bool auto_verify = false;
  ingest->add_option("paths", ingest_paths, "input files")->required()->check(CLI::ExistingFile);
  ingest->add_option("--topic-default", ingest_opts.topic_default, "topic for envelopes without one");
  ingest->add_option("--journey", ingest_journey, "journey for CSV readings");
  ingest->add_option("--kind", ingest_kind, "CSV reading kind: temperature, humidity or gps");
  ingest->add_option("--topic", ingest_opts.csv_topic, "stakeholder topic recorded on CSV points");
  ingest->add_flag("--auto-verify", auto_verify, "verify steps closed by trigger bizSteps");

  // policy
  auto* policy = app.add_subcommand("policy", "manage verification policies");
  policy->require_subcommand(1);
  auto* policy_load = policy->add_subcommand("load", "validate and store a policy document");
  std::string policy_file;
  policy_load->add_option("file", policy_file)->required()->check(CLI::ExistingFile);
  auto* policy_list = policy->add_subcommand("list", "list stored policies");

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "verify a step or journey; exit 0/2/3 by outcome");
  std::string verify_step, verify_journey, verify_policy, requested_by;
  auto* step_opt = verify_cmd->add_option("--step", verify_step, "step id");
  auto* journey_opt = verify_cmd->add_option("--journey", verify_journey, "journey id");
  step_opt->excludes(journey_opt);
  verify_cmd->add_option("--policy", verify_policy, "load this policy before verifying")
      ->check(CLI::ExistingFile);
  verify_cmd->add_option("--requested-by", requested_by);

  auto* reverify = app.add_subcommand("reverify", "verify a previously verified subject again");
  std::string reverify_subject;
  reverify->add_option("--subject", reverify_subject)->required();
  reverify->add_option("--requested-by", requested_by);

  auto* report = app.add_subcommand("report", "committed history of a step or journey");
  std::string report_subject;
  report->add_option("--subject", report_subject)->required();

  auto* lineage = app.add_subcommand("lineage", "parent/child graph of a journey");
  std::string lineage_journey, lineage_direction = "up";
  lineage->add_option("--journey", lineage_journey)->required();
  lineage->add_option("--direction", lineage_direction)->check(CLI::IsMember({"up", "down"}));

  auto* geojson = app.add_subcommand("export-geojson", "GeoJSON FeatureCollection of a step");
  std::string geo_step, geo_layer = "fused", geo_out;
  geojson->add_option("--step", geo_step)->required();
  geojson->add_option("--layer", geo_layer)->check(CLI::IsMember({"raw", "smoothed", "fused", "violations"}));
  geojson->add_option("--out", geo_out, "output file (default stdout)");

  auto* gen_cmd = app.add_subcommand("gen", "generate events and sensor CSVs from a scenario");
  std::string gen_scenario, gen_journey = "urn:epc:id:sgtin:synthetic.1", gen_out = ".";
  std::uint64_t gen_seed = 1;
  gen_cmd->add_option("--scenario", gen_scenario)->required()->check(CLI::ExistingFile);
  gen_cmd->add_option("--seed", gen_seed);
  gen_cmd->add_option("--journey", gen_journey);
  gen_cmd->add_option("--out-dir", gen_out);

  auto* bench = app.add_subcommand("bench", "per-transaction latency statistics");
  std::string bench_mode = "ingest-engine", bench_csv, bench_journal;
  cli::BenchOptions bench_opts;
  bench->add_option("--mode", bench_mode)->check(CLI::IsMember({"ingest-baseline", "ingest-engine", "verify"}));
  bench->add_option("--events", bench_opts.events)->check(CLI::PositiveNumber);
  bench->add_option("--devices", bench_opts.devices)->check(CLI::PositiveNumber);
  bench->add_option("--repeats", bench_opts.repeats)->check(CLI::PositiveNumber);
  bench->add_option("--batches", bench_opts.batches, "verify batch sizes");
  bench->add_option("--seed", bench_opts.seed);
  bench->add_option("--journal-dir", bench_journal, "fsync journal directory (durable ledger)");
  bench->add_option("--csv", bench_csv, "also write CSV here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*bench) {
      bench_opts.mode = *cli::parse_bench_mode(bench_mode);
      if (!bench_journal.empty()) bench_opts.journal_dir = bench_journal;
      const auto rows = cli::run_bench(bench_opts);
      for (const auto& r : rows) std::cout << cli::to_json(r).dump() << '\n';
      if (!bench_csv.empty()) write_text(bench_csv, cli::bench_csv(rows));
      return 0;
    }

    if (*gen_cmd) {
      const auto scenario = gen::parse_scenario(json::parse(read_text(gen_scenario)));
      const fs::path out = gen_out;
      fs::create_directories(out);
      json summary = {{"scenario", scenario.name}, {"seed", gen_seed}, {"files", json::array()}};
      if (!scenario.events_plan.empty()) {
        std::string lines;
        for (const auto& env : gen::gen_events(scenario, gen_journey, gen_seed)) {
          lines += epcis::serialize_envelope(env) + "\n";
        }
        write_text(out / "events.jsonl", lines);
        summary["files"].push_back((out / "events.jsonl").string());
      }
      std::map<std::pair<std::string, epcis::ReadingKind>, std::vector<epcis::RawReading>> by_file;
      for (const auto& r : gen::gen_readings(scenario, gen_seed)) {
        by_file[{r.topic, r.reading.kind}].push_back(r.reading);
      }
      for (const auto& [key, readings] : by_file) {
        const auto& [topic, kind] = key;
        const auto name = (topic.empty() ? std::string() : topic + "-") + std::string(epcis::to_string(kind)) + ".csv";
        write_text(out / name, epcis::write_sensor_csv(readings, kind));
        summary["files"].push_back((out / name).string());
      }
      std::cout << summary.dump() << '\n';
      return 0;
    }

    Session session(state, sink);
    auto& store = *session.store;

    if (*ingest) {
      if (!ingest_journey.empty()) ingest_opts.journey = ingest_journey;
      if (!ingest_kind.empty()) ingest_opts.kind = epcis::parse_reading_kind(ingest_kind);
      // Steps closed by a trigger bizStep are verified once every file is in,
      // so readings from CSVs given in the same call are part of the check.
      std::vector<std::pair<std::string, std::string>> triggered;  // step, topic
      if (auto_verify) {
        store.ledger().subscribe([&triggered, trigger = epcis::TriggerConfig{}](const ledger::LedgerEvent& e) {
          if (e.name != model::kStepClosedEvent) return;
          const auto j = json::parse(e.payload);
          if (trigger.biz_steps.contains(j.value("bizStep", std::string{}))) {
            triggered.emplace_back(j.at("stepId").get<std::string>(), j.value("topic", std::string{}));
          }
        });
      }
      std::vector<fs::path> paths(ingest_paths.begin(), ingest_paths.end());
      auto summary = cli::ingest_files(store, paths, ingest_opts);
      auto out = cli::to_json(summary);
      if (auto_verify) {
        verify::VerificationManager manager(store);
        json verdicts = json::array();
        for (const auto& [step, topic] : triggered) {
          const auto v = manager.verify_step({step, "auto", topic});
          verdicts.push_back({{"stepId", step}, {"outcome", std::string(to_string(v.outcome))}});
        }
        out["autoVerified"] = std::move(verdicts);
      }
      session.save();
      std::cout << out.dump() << '\n';
      return 0;
    }

    if (*policy_load) {
      const auto p = store.load_policy(read_text(policy_file));
      session.save();
      std::cout << json{{"loaded", p.policy_id}, {"productType", p.product_type}}.dump() << '\n';
      return 0;
    }
    if (*policy_list) {
      for (const auto& p : store.policies()) std::cout << model::to_json(p).dump() << '\n';
      return 0;
    }

    if (*verify_cmd || *reverify) {
      verify::VerificationManager manager(store);
      model::GuardsVerification v;
      if (*reverify) {
        v = manager.reverify(reverify_subject, requested_by);
      } else {
        if (verify_step.empty() && verify_journey.empty()) return fail("usage", "verify needs --step or --journey");
        if (!verify_policy.empty()) store.load_policy(read_text(verify_policy));
        if (!verify_step.empty()) {
          v = manager.verify_step({verify_step, "manual", requested_by});
        } else {
          v = manager.verify_journey({verify_journey, "manual", requested_by});
        }
      }
      session.save();
      std::cout << model::to_json(v).dump() << '\n';
      return cli::exit_code(v.outcome);
    }

    if (*report) {
      std::cout << cli::build_report(store, report_subject).dump() << '\n';
      return 0;
    }

    if (*lineage) {
      const auto g = store.lineage(lineage_journey, lineage_direction == "up" ? model::Direction::Up
                                                                             : model::Direction::Down);
      std::cout << model::to_json(g).dump() << '\n';
      return 0;
    }

    if (*geojson) {
      verify::VerificationManager manager(store);
      const auto ev = manager.evaluate_step(geo_step);
      const auto doc = cli::export_geojson(ev, *cli::parse_layer(geo_layer));
      if (geo_out.empty()) {
        std::cout << doc.dump() << '\n';
      } else {
        write_text(geo_out, doc.dump(2) + "\n");
        std::cout << json{{"written", geo_out}, {"features", doc["features"].size()}}.dump() << '\n';
      }
      return 0;
    }
  } catch (const Error& e) {
    return fail(std::string(to_string(e.code())), e.message());
  } catch (const json::exception& e) {
    return fail("MalformedJson", e.what());
  } catch (const std::exception& e) {
    return fail("Internal", e.what());
  }
  return 0;
}
