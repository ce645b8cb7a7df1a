#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "tracecheck/epcis.hpp"
#include "tracecheck/ledger.hpp"
#include "tracecheck/model.hpp"

// Object model persistence on the ledger.
//
// Key layout:
//   Journey            [journeyId]
//   Step               [journeyId, stepId]
//   StepIndex          [stepId] -> journeyId
//   Point              [journeyId, stepId, deviceId, timestamp]
//   ItemData           [journeyId, topic]
//   Policy             [productType, policyId]
//   Verification       [subject, seq, verificationId]
//   DeviceReliability  [deviceId]
//   Event              [eventIdentity] -> canonical envelope
namespace tracecheck::model {

struct StoreOptions {
  /// Reject events that reference journeys never seen before instead of
  /// creating skeleton journeys for them.
  bool strict_references = false;
  /// bizSteps that close the most recent open step of a journey.
  std::set<std::string, std::less<>> closer_steps{"receiving"};
  /// Attempts for read-modify-write transactions that lose a commit race.
  int max_retries = 8;
};

/// Commit heights of every entry a caller read; turned into txIds for
/// verification records.
struct Reads {
  std::set<std::uint64_t> heights;
};

struct ApplyResult {
  bool skipped = false;  // identical envelope already applied
  std::string event_id;
  std::string tx_id;
  std::vector<std::string> journeys_created;
  std::vector<std::string> steps_opened;
  std::vector<std::string> steps_closed;
};

/// Ledger event emitted in the same transaction that closes a step.
inline constexpr std::string_view kStepClosedEvent = "step.closed";

enum class Direction { Up, Down };

struct LineageGraph {
  std::string root;
  std::vector<std::string> nodes;  // discovery order, root first
  std::vector<std::pair<std::string, std::string>> edges;  // (parent, child)
  std::vector<std::string> integrity_errors;  // cycles and dangling links
};

nlohmann::json to_json(const LineageGraph& g);

class Store {
 public:
  explicit Store(ledger::WorldState& ledger, StoreOptions options = {});

  ledger::WorldState& ledger() noexcept { return ledger_; }
  const ledger::WorldState& ledger() const noexcept { return ledger_; }
  const StoreOptions& options() const noexcept { return options_; }

  /// Creates or updates journeys, steps, lineage links and claims for one
  /// envelope, in one transaction. Re-applying an envelope is a no-op.
  ApplyResult apply_event(const epcis::IngestEnvelope& envelope);

  /// Throws UnknownStep, DuplicatePoint or DeviceKindMismatch. Writes only the
  /// Point key.
  Point append_point(const std::string& journey_id, const std::string& step_id,
                     const epcis::RawReading& reading, const std::string& topic);
  /// All-or-nothing batch; returns the txId.
  std::string append_points(const std::vector<Point>& points);

  Policy load_policy(std::string_view json_text);
  Policy store_policy(const Policy& policy);
  std::vector<Policy> policies() const;
  /// Most specific policy for a step: exact productType before "*", explicit
  /// phase list before an empty one, then smallest policyId.
  std::optional<Policy> find_policy(std::string_view product_type, std::string_view phase,
                                    Reads* reads = nullptr) const;
  /// Policy for journey-level verification: exact productType before "*",
  /// policies with journey-level rules or DSoD mode first, then policyId.
  std::optional<Policy> find_journey_policy(std::string_view product_type,
                                            Reads* reads = nullptr) const;

  std::optional<Journey> find_journey(std::string_view journey_id, Reads* reads = nullptr) const;
  Journey journey(std::string_view journey_id, Reads* reads = nullptr) const;  // UnknownJourney
  std::vector<Journey> journeys() const;

  std::optional<Step> find_step(std::string_view step_id, Reads* reads = nullptr) const;
  Step step(std::string_view step_id, Reads* reads = nullptr) const;  // UnknownStep
  std::vector<Step> steps(std::string_view journey_id, Reads* reads = nullptr) const;
  /// Step of the journey whose [start, end] window contains t (open steps
  /// extend forever); the latest-starting one wins.
  std::optional<std::string> resolve_step(std::string_view journey_id, Instant t) const;

  std::vector<Point> points(std::string_view journey_id, std::string_view step_id,
                            Reads* reads = nullptr) const;
  std::vector<ItemData> claims(std::string_view journey_id, Reads* reads = nullptr) const;

  /// Throws UnknownJourney. Cycles are reported in integrity_errors.
  LineageGraph lineage(std::string_view journey_id, Direction direction) const;
  /// Full scan for parent/child links that are not mirrored on both sides.
  std::vector<std::string> check_link_consistency() const;

  std::map<std::string, double> reliability(const std::vector<std::string>& devices) const;
  void store_reliability(const std::map<std::string, double>& scores);

  /// Verification history of a subject in commit order.
  std::vector<GuardsVerification> verifications(std::string_view subject) const;
  std::size_t verification_count(std::string_view subject) const;
  static std::string verification_key(const std::string& subject, std::size_t seq,
                                      const std::string& verification_id);

  static std::string reliability_key(std::string_view device_id);
  static std::string reliability_value(std::string_view device_id, double score);
  static std::string journey_key(std::string_view journey_id);
  static std::string step_key(std::string_view journey_id, std::string_view step_id);
  static std::string point_key(std::string_view journey_id, std::string_view step_id,
                               std::string_view device_id, Instant t);
  static std::string make_step_id(std::string_view journey_id, std::string_view phase,
                                  std::string_view location, Instant start);

 private:
  ledger::WorldState& ledger_;
  StoreOptions options_;
};

}  // namespace tracecheck::model
