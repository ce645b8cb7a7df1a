#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracecheck/epcis.hpp"
#include "tracecheck/geo.hpp"
#include "tracecheck/model.hpp"

// Verification rules. Every rule is a pure function of preprocessed data and
// its parameters, returning a RuleResult.
namespace tracecheck::rules {

using geo::GeoSample;
using geo::LatLon;

struct ScalarSample {
  Instant time{};
  double value = 0;
};

enum class SamplingMode { Trapezoid, Rectangle };

struct ThresholdParams {
  std::optional<double> t_max;
  std::optional<double> t_min;
  std::optional<double> cumulative_limit;
  SamplingMode mode = SamplingMode::Trapezoid;
  std::string unit = "degC";
  epcis::ReadingKind kind = epcis::ReadingKind::Temperature;
  /// Gap credited to the first sample in rectangle mode. Defaults to the
  /// first observed gap of the series.
  std::optional<double> nominal_interval_min;
};

struct GeofenceParams {
  std::vector<LatLon> polygon;
  std::optional<LatLon> start_center;
  double start_radius_m = 0;
  std::optional<LatLon> end_center;
  double end_radius_m = 0;
};

struct BacktrackParams {
  LatLon destination;
  double epsilon_m = 50;
  std::size_t min_consecutive = 3;
};

struct HandoverParams {
  double min_gap_min = 0;
  std::optional<double> max_gap_min;
};

struct TimeoutParams {
  std::optional<double> min_duration_min;
  std::optional<double> max_duration_min;
};

struct ConsistencyParams {
  double tolerance = 0;  // relative spread allowed for numeric claims
  std::map<std::string, double> attribute_tolerance;

  double tolerance_for(const std::string& attribute) const;
};

// Parsers throw SchemaViolation with a JSON pointer rooted at `path`.
ThresholdParams parse_threshold_params(const nlohmann::json& j, const std::string& path = "");
GeofenceParams parse_geofence_params(const nlohmann::json& j, const std::string& path = "");
BacktrackParams parse_backtrack_params(const nlohmann::json& j, const std::string& path = "");
HandoverParams parse_handover_params(const nlohmann::json& j, const std::string& path = "");
TimeoutParams parse_timeout_params(const nlohmann::json& j, const std::string& path = "");
ConsistencyParams parse_consistency_params(const nlohmann::json& j, const std::string& path = "");
void validate_rule_params(model::RuleName name, const nlohmann::json& j, const std::string& path);

/// Time-weighted threshold excess.
///
/// Trapezoid: sum over consecutive pairs of (E_i + E_{i+1}) / 2 * dt_i.
/// Rectangle: sum of E_i * dt_i where dt_i is the gap preceding sample i.
/// E_i is the excess above t_max (or below t_min), dt in minutes.
/// `running[i]` is the cumulative total once sample i has been seen.
struct CumulativeTrace {
  std::vector<double> excess;
  std::vector<double> contributions;  // n-1 segments (trapezoid) or n samples (rectangle)
  std::vector<double> running;        // one per sample
  double total = 0;
  std::optional<std::size_t> alert_index;  // first sample where running > limit
};

CumulativeTrace cumulative_severity(std::span<const ScalarSample> series, const ThresholdParams& p);

model::RuleResult rule_threshold(std::span<const ScalarSample> series, const ThresholdParams& p,
                                 Verdict severity = Verdict::Alert);

model::RuleResult rule_geofence(std::span<const GeoSample> track, const GeofenceParams& p,
                                Verdict severity = Verdict::Alert);

model::RuleResult rule_backtrack(std::span<const GeoSample> track, const BacktrackParams& p,
                                 Verdict severity = Verdict::Alert);

struct CustodyEvent {
  Instant time{};
  std::string ref;
};

model::RuleResult rule_handover(const std::optional<CustodyEvent>& depart,
                                const std::optional<CustodyEvent>& arrive,
                                const HandoverParams& p, Verdict severity = Verdict::Alert);

model::RuleResult rule_shipment_timeout(const model::Step& step, const TimeoutParams& p,
                                        Verdict severity = Verdict::Alert);

}  // namespace tracecheck::rules
