#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracecheck/epcis.hpp"
#include "tracecheck/geo.hpp"

// Synthetic scenarios: routes from waypoints, sensor series, fault injection
// and EPCIS event emission. Every output is a pure function of (scenario, seed).
namespace tracecheck::gen {

using geo::GeoSample;
using geo::LatLon;

struct FaultSpec {
  enum class Kind { GaussianNoise, OutlierSpikes, Detour, ThresholdBreach, Dropout };

  Kind kind = Kind::GaussianNoise;
  std::string target_device;  // empty: every device of a matching kind
  double sigma = 0;           // gaussianNoise: meters (GPS) or reading units
  double rate = 0;            // outlierSpikes: probability per sample
  double magnitude = 0;       // outlierSpikes: meters (GPS) or reading units
  double insert_after_km = 0;
  std::vector<LatLon> detour_waypoints;
  std::optional<double> start_min;  // window; absent means the whole series
  std::optional<double> duration_min;
  double level = 0;  // thresholdBreach
};

struct SensorSpec {
  std::string device_id;
  epcis::ReadingKind kind = epcis::ReadingKind::Gps;
  std::string topic;
  double baseline = 0;          // scalar kinds without explicit values
  std::optional<double> interval_sec;
  std::vector<double> values;  // explicit scalar series, one per interval
};

/// One plan entry: {"offsetMin"?, "topic", plus any EPCIS event fields}.
/// Missing type defaults to ObjectEvent, epcList to the journey id,
/// offsetMin to the end of the route.
struct PlannedEvent {
  std::optional<double> offset_min;
  std::string topic;
  nlohmann::json event;
};

struct Scenario {
  std::string name;
  Instant start{};
  std::vector<LatLon> waypoints;
  double speed_mps = 10;
  double sample_interval_sec = 10;
  std::vector<FaultSpec> faults;
  std::vector<PlannedEvent> events_plan;
  std::vector<SensorSpec> sensors;
};

/// Throws InvalidScenario (or SchemaViolation for malformed fields).
Scenario parse_scenario(const nlohmann::json& j);
void validate_scenario(const Scenario& s);

/// Constant-speed great-circle interpolation through the waypoints, sampled
/// every interval; the final waypoint is always the last sample.
std::vector<GeoSample> gen_route(const Scenario& s, std::uint64_t seed = 0);
double route_length_m(const std::vector<LatLon>& waypoints);
double route_duration_sec(const Scenario& s);

struct FaultWindow {
  FaultSpec::Kind kind;
  Instant start{};
  Instant end{};
};

struct CorruptedTrack {
  std::vector<GeoSample> truth;
  std::vector<GeoSample> samples;
  std::vector<FaultWindow> windows;
};

struct CorruptedSeries {
  std::vector<std::pair<Instant, double>> truth;
  std::vector<std::pair<Instant, double>> samples;
  std::vector<FaultWindow> windows;
};

/// Applies the faults that target `device` (or every device) in order.
CorruptedTrack inject_faults(const std::vector<GeoSample>& track, const std::vector<FaultSpec>& faults,
                             std::uint64_t seed, const std::string& device = {});
CorruptedSeries inject_faults(const std::vector<std::pair<Instant, double>>& series,
                              const std::vector<FaultSpec>& faults, std::uint64_t seed,
                              const std::string& device = {});

/// Envelopes for the events plan, timestamped start + offset. Throws
/// InvalidScenario for an empty plan.
std::vector<epcis::IngestEnvelope> gen_events(const Scenario& s, const std::string& journey_id,
                                              std::uint64_t seed = 0);

struct SensorReading {
  epcis::RawReading reading;
  std::string topic;
};

/// All sensor readings of the scenario with faults applied, sensor by sensor.
std::vector<SensorReading> gen_readings(const Scenario& s, std::uint64_t seed);

/// Buffer polygon of half-width `half_width_m` around a polyline, with the
/// ends extended by the same distance.
std::vector<LatLon> corridor_polygon(const std::vector<LatLon>& route, double half_width_m);

/// Largest distance from any sample to the polyline.
double max_cross_track(const std::vector<GeoSample>& track, const std::vector<LatLon>& route);

}  // namespace tracecheck::gen
