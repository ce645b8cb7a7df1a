#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracecheck/common.hpp"
#include "tracecheck/epcis.hpp"

// Journey / Step / Point object model, stakeholder claims, policies and
// verification records, with their JSON representations on the ledger.
namespace tracecheck::model {

using epcis::AttributeMap;
using epcis::Scalar;

/// Reference to the business event that opened or closed a Step.
struct EventRef {
  std::string event_id;
  Instant time{};
  std::string location;
  std::string topic;
  std::string biz_step;

  friend bool operator==(const EventRef&, const EventRef&) = default;
};

enum class StepStatus { Open, Closed };

struct Step {
  std::string step_id;
  std::string journey_id;
  std::string phase;
  std::string location;
  std::optional<EventRef> start;
  std::optional<EventRef> end;
  StepStatus status = StepStatus::Open;

  friend bool operator==(const Step&, const Step&) = default;
};

struct Journey {
  std::string journey_id;
  std::string product_type;
  std::vector<std::string> parents;
  std::vector<std::string> children;
  std::vector<std::string> steps;

  friend bool operator==(const Journey&, const Journey&) = default;
};

struct Point {
  std::string journey_id;
  std::string step_id;
  epcis::RawReading reading;
  std::string topic;
};

struct ItemData {
  std::string topic;
  std::string journey_id;
  AttributeMap attributes;

  friend bool operator==(const ItemData&, const ItemData&) = default;
};

enum class Mode { SSoD, MSoD, DSoD };

enum class RuleName { Threshold, Geofence, Backtrack, HandoverTime, ShipmentTimeout, AttributeConsistency };

std::string_view to_string(Mode m) noexcept;
std::string_view to_string(RuleName r) noexcept;
std::optional<Mode> parse_mode(std::string_view text) noexcept;
std::optional<RuleName> parse_rule_name(std::string_view text) noexcept;

struct RuleSpec {
  RuleName name = RuleName::Threshold;
  nlohmann::json params = nlohmann::json::object();
  Verdict severity = Verdict::Alert;
};

struct Policy {
  std::string policy_id;
  std::string product_type;  // "*" matches any product
  Mode mode = Mode::SSoD;
  std::vector<std::string> phases;  // empty: every phase
  std::vector<RuleSpec> rules;
  std::map<std::string, Verdict> severity_map;  // ruleName -> severity
  nlohmann::json preprocessing = nlohmann::json::object();
  nlohmann::json source;  // document as loaded

  bool applies_to_phase(std::string_view phase) const;
};

struct Violation {
  std::string code;  // short machine-readable label, e.g. "outsideGeofence"
  std::string detail;
  double magnitude = 0;
  Verdict level = Verdict::Alert;
  std::optional<std::size_t> first_index;
  std::optional<std::size_t> last_index;
  std::optional<Instant> first_time;
  std::optional<Instant> last_time;
};

struct RuleResult {
  std::string rule_name;
  std::string topic;  // set for per-stakeholder results
  Verdict verdict = Verdict::Okay;
  std::vector<Violation> violations;
  std::map<std::string, double> metrics;
  std::vector<std::string> notes;

  /// Appends and raises the verdict to at least the violation's level.
  void add(Violation v);
};

struct DiscrepancyReport {
  std::string journey_id;
  std::string attribute;
  std::map<std::string, Scalar> per_topic;
  bool discrepant = false;
  std::vector<std::string> notes;
};

struct GuardsVerification {
  std::string verification_id;
  std::string subject;
  std::string subject_kind;  // "step" | "journey"
  std::string journey_id;
  std::string policy_id;
  std::string trigger;  // "manual" | "auto"
  std::string requested_by;
  Verdict outcome = Verdict::Okay;
  std::vector<RuleResult> rule_results;
  std::vector<DiscrepancyReport> discrepancies;
  std::vector<std::string> tx_ids;
  std::vector<std::string> notes;
  Instant verified_at{};
};

struct DeviceReliability {
  std::string device_id;
  double score = 1.0;
};

nlohmann::json to_json(const EventRef& r);
EventRef event_ref_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Step& s);
Step step_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Journey& j);
Journey journey_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ItemData& d);
ItemData item_data_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Violation& v);
Violation violation_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RuleResult& r);
RuleResult rule_result_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DiscrepancyReport& d);
DiscrepancyReport discrepancy_from_json(const nlohmann::json& j);
nlohmann::json to_json(const GuardsVerification& v);
GuardsVerification verification_from_json(const nlohmann::json& j);

/// Point value stored under its composite key (the key carries journey, step,
/// device and timestamp).
std::string encode_point_value(const Point& p);
Point decode_point(std::string_view key, std::string_view value);

/// Validates a policy document. Throws SchemaViolation naming the offending
/// field as a JSON pointer (e.g. "/rules/1/params/tMax").
Policy parse_policy(const nlohmann::json& doc);
Policy parse_policy(std::string_view json_text);
nlohmann::json to_json(const Policy& p);

}  // namespace tracecheck::model
