#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "tracecheck/common.hpp"

// Wire formats: topic-wrapped EPCIS-style business events and sensor CSV files.
namespace tracecheck::epcis {

enum class EventType { Object, Aggregation, Transformation };
enum class Action { Add, Observe, Delete };

std::string_view to_string(EventType t) noexcept;
std::string_view to_string(Action a) noexcept;

/// Claim attribute value: JSON numbers become reals, anything else a string.
using Scalar = std::variant<double, std::string>;
using AttributeMap = std::map<std::string, Scalar>;

std::string scalar_to_string(const Scalar& s);
nlohmann::json scalar_to_json(const Scalar& s);
Scalar scalar_from_json(const nlohmann::json& j);

struct EpcisEvent {
  EventType type = EventType::Object;
  Instant event_time{};
  std::vector<std::string> epc_list;
  std::string biz_step;
  std::string biz_location;
  std::string source_party;
  Action action = Action::Observe;
  std::optional<std::string> parent_id;
  std::vector<std::string> child_epcs;
  std::vector<std::string> input_epcs;
  std::vector<std::string> output_epcs;
  AttributeMap item_attributes;

  friend bool operator==(const EpcisEvent&, const EpcisEvent&) = default;
};

struct IngestEnvelope {
  std::string topic;
  EpcisEvent event;

  friend bool operator==(const IngestEnvelope&, const IngestEnvelope&) = default;
};

/// Throws MalformedJson, MissingTopic, UnknownEventType, EventShapeMismatch or
/// InvalidTimestamp. Unknown fields are ignored.
IngestEnvelope parse_envelope(std::string_view json_text);
IngestEnvelope envelope_from_json(const nlohmann::json& j);
nlohmann::json to_json(const IngestEnvelope& envelope);
std::string serialize_envelope(const IngestEnvelope& envelope);

/// Content hash of the canonical envelope serialization (topic included, so
/// the same observation reported by two stakeholders stays two claims).
std::string event_identity(const IngestEnvelope& envelope);

/// "urn:epcglobal:cbv:bizstep:receiving" -> "receiving"; bare names unchanged.
std::string_view bizstep_name(std::string_view biz_step) noexcept;

// ---------------------------------------------------------------------------

enum class ReadingKind { Temperature, Humidity, Gps };

std::string_view to_string(ReadingKind k) noexcept;
ReadingKind parse_reading_kind(std::string_view text);

struct RawReading {
  std::string device_id;
  Instant timestamp{};
  ReadingKind kind = ReadingKind::Temperature;
  std::vector<double> value;  // [v] for scalar kinds, [lat, lon] for GPS

  friend bool operator==(const RawReading&, const RawReading&) = default;
};

struct CsvReject {
  std::size_t line = 0;  // 1-based, header is line 1
  std::string text;
  std::string reason;
};

struct CsvParseResult {
  std::vector<RawReading> readings;
  std::vector<CsvReject> rejects;
};

/// Columns: device_id,timestamp,value (scalar kinds) or
/// device_id,timestamp,lat,lon (GPS), in any order. Throws MissingColumn.
CsvParseResult parse_sensor_csv(std::string_view csv_text, ReadingKind kind);

/// Writes readings in the format parse_sensor_csv reads.
std::string write_sensor_csv(const std::vector<RawReading>& readings, ReadingKind kind);

// ---------------------------------------------------------------------------

struct TriggerConfig {
  std::set<std::string, std::less<>> biz_steps{"receiving"};
};

struct TriggerDecision {
  bool auto_verify = false;
  std::string step_ref;  // filled by the caller once the event has been applied
};

TriggerDecision classify_trigger(const EpcisEvent& event, const TriggerConfig& config = {});

}  // namespace tracecheck::epcis
