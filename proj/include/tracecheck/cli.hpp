#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracecheck/audit.hpp"
#include "tracecheck/epcis.hpp"
#include "tracecheck/store.hpp"
#include "tracecheck/verify.hpp"

// Building blocks of the command-line tool, kept in the library so they can be
// tested without spawning processes.
namespace tracecheck::cli {

/// 0 okay, 2 warning, 3 alert. 1 is reserved for usage and subject errors.
int exit_code(Verdict v) noexcept;

// ---------------------------------------------------------------------------
// ingest

struct IngestOptions {
  std::string topic_default;                 // for envelopes without a topic
  std::optional<std::string> journey;        // CSV readings; default: the only journey
  std::optional<epcis::ReadingKind> kind;    // CSV kind when not obvious from the header
  std::string csv_topic;                     // topic recorded on CSV points; default topic_default
  bool parallel = true;                      // CSV files ingested concurrently
};

struct IngestReject {
  std::string file;
  std::size_t line = 0;
  std::string reason;
};

struct IngestSummary {
  std::size_t files = 0;
  std::size_t events = 0;
  std::size_t applied = 0;
  std::size_t skipped = 0;
  std::size_t points = 0;
  std::vector<IngestReject> rejects;
  std::vector<std::string> tx_ids;
};

nlohmann::json to_json(const IngestSummary& s);

/// Applies envelopes (.json holding one envelope or an array, .jsonl one per
/// line) and sensor CSVs (.csv). JSON files go first so CSV readings can be
/// mapped to steps. Fatal parse errors throw an Error naming the file.
IngestSummary ingest_files(model::Store& store, const std::vector<std::filesystem::path>& paths,
                           const IngestOptions& options = {});

// ---------------------------------------------------------------------------
// geojson

enum class Layer { Raw, Smoothed, Fused, Violations };
std::optional<Layer> parse_layer(std::string_view text) noexcept;

/// FeatureCollection for one evaluated step. Raw and smoothed layers give one
/// LineString per device; fused gives one per data source group plus the
/// violation Points; violations gives only Points. Throws NoGpsData.
nlohmann::json export_geojson(const verify::StepEvaluation& evaluation, Layer layer);

// ---------------------------------------------------------------------------
// report

/// Everything committed about a subject (step or journey id): verification
/// history, lineage, discrepancies and flagged notifications.
nlohmann::json build_report(const model::Store& store, const std::string& subject);

// ---------------------------------------------------------------------------
// bench

struct LatencyStats {
  std::size_t n = 0;
  double min_ms = 0;
  double max_ms = 0;
  double avg_ms = 0;
  double stddev_ms = 0;  // population
};

LatencyStats latency_stats(const std::vector<double>& samples_ms);
nlohmann::json to_json(const LatencyStats& s);

enum class BenchMode { IngestBaseline, IngestEngine, Verify };
std::optional<BenchMode> parse_bench_mode(std::string_view text) noexcept;

struct BenchOptions {
  BenchMode mode = BenchMode::IngestEngine;
  std::size_t events = 1000;
  std::size_t devices = 1;
  std::vector<std::size_t> batches{10, 100, 1000};  // verify mode
  std::size_t repeats = 5;                          // verify mode, per batch
  std::optional<std::filesystem::path> journal_dir;  // durable ledger when set
  std::uint64_t seed = 1;
};

struct BenchRow {
  std::string mode;
  std::size_t size = 0;  // events, or points per batch
  LatencyStats stats;
};

/// Synthetic EPCIS workload shared by both ingest modes: shipping/receiving
/// pairs for events/2 journeys, rotating over three topics.
std::vector<epcis::IngestEnvelope> bench_events(std::size_t n, std::uint64_t seed);

std::vector<BenchRow> run_bench(const BenchOptions& options);
nlohmann::json to_json(const BenchRow& row);
std::string bench_csv(const std::vector<BenchRow>& rows);

// ---------------------------------------------------------------------------
// sinks

/// A sink config file holds one config object or an array of them.
std::vector<std::unique_ptr<audit::Sink>> load_sinks(const std::filesystem::path& path);

}  // namespace tracecheck::cli
