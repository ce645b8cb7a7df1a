#include "tracecheck/epcis.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace tracecheck::epcis {

using nlohmann::json;

std::string_view to_string(EventType t) noexcept {
  switch (t) {
    case EventType::Object: return "ObjectEvent";
    case EventType::Aggregation: return "AggregationEvent";
    case EventType::Transformation: return "TransformationEvent";
  }
  return "ObjectEvent";
}

std::string_view to_string(Action a) noexcept {
  switch (a) {
    case Action::Add: return "ADD";
    case Action::Observe: return "OBSERVE";
    case Action::Delete: return "DELETE";
  }
  return "OBSERVE";
}

std::string scalar_to_string(const Scalar& s) {
  if (const auto* d = std::get_if<double>(&s)) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.15g", *d);
    return buf;
  }
  return std::get<std::string>(s);
}

json scalar_to_json(const Scalar& s) {
  if (const auto* d = std::get_if<double>(&s)) return *d;
  return std::get<std::string>(s);
}

Scalar scalar_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return j.get<std::string>();
  return j.dump();
}

namespace {

[[noreturn]] void shape_error(const std::string& what) {
  throw Error(Errc::EventShapeMismatch, what);
}

std::string optional_string(const json& obj, const char* name) {
  auto it = obj.find(name);
  if (it == obj.end() || it->is_null()) return {};
  if (!it->is_string()) shape_error(std::string("field '") + name + "' must be a string");
  return it->get<std::string>();
}

std::vector<std::string> string_list(const json& obj, const char* name) {
  std::vector<std::string> out;
  auto it = obj.find(name);
  if (it == obj.end() || it->is_null()) return out;
  if (!it->is_array()) shape_error(std::string("field '") + name + "' must be an array");
  for (const auto& v : *it) {
    if (!v.is_string()) shape_error(std::string("field '") + name + "' must hold strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

}  // namespace

IngestEnvelope envelope_from_json(const json& j) {
  if (!j.is_object()) throw Error(Errc::MalformedJson, "envelope must be a JSON object");
  IngestEnvelope env;
  auto topic = j.find("topic");
  if (topic == j.end() || !topic->is_string() || topic->get<std::string>().empty()) {
    throw Error(Errc::MissingTopic, "envelope has no non-empty 'topic'");
  }
  env.topic = topic->get<std::string>();

  auto ev_it = j.find("event");
  if (ev_it == j.end() || !ev_it->is_object()) shape_error("envelope has no 'event' object");
  const json& ev = *ev_it;
  auto& e = env.event;

  auto type = ev.find("type");
  if (type == ev.end() || !type->is_string()) {
    throw Error(Errc::UnknownEventType, "event has no 'type'");
  }
  const auto type_name = type->get<std::string>();
  if (type_name == "ObjectEvent") {
    e.type = EventType::Object;
  } else if (type_name == "AggregationEvent") {
    e.type = EventType::Aggregation;
  } else if (type_name == "TransformationEvent") {
    e.type = EventType::Transformation;
  } else {
    throw Error(Errc::UnknownEventType, "unsupported event type '" + type_name + "'");
  }

  const auto time_text = optional_string(ev, "eventTime");
  if (time_text.empty()) shape_error("event has no 'eventTime'");
  e.event_time = parse_time(time_text);

  e.epc_list = string_list(ev, "epcList");
  e.biz_step = optional_string(ev, "bizStep");
  e.biz_location = optional_string(ev, "bizLocation");
  e.source_party = optional_string(ev, "sourceParty");

  const auto action = optional_string(ev, "action");
  if (action.empty() || action == "OBSERVE") {
    e.action = Action::Observe;
  } else if (action == "ADD") {
    e.action = Action::Add;
  } else if (action == "DELETE") {
    e.action = Action::Delete;
  } else {
    shape_error("unknown action '" + action + "'");
  }

  if (auto p = optional_string(ev, "parentID"); !p.empty()) e.parent_id = p;
  e.child_epcs = string_list(ev, "childEPCs");
  e.input_epcs = string_list(ev, "inputEPCs");
  e.output_epcs = string_list(ev, "outputEPCs");

  if (auto attrs = ev.find("itemAttributes"); attrs != ev.end() && !attrs->is_null()) {
    if (!attrs->is_object()) shape_error("'itemAttributes' must be an object");
    for (const auto& [k, v] : attrs->items()) e.item_attributes[k] = scalar_from_json(v);
  }

  switch (e.type) {
    case EventType::Object:
      if (e.epc_list.empty()) shape_error("ObjectEvent requires a non-empty epcList");
      break;
    case EventType::Aggregation:
      if (!e.parent_id) shape_error("AggregationEvent requires parentID");
      if (e.child_epcs.empty()) shape_error("AggregationEvent requires childEPCs");
      break;
    case EventType::Transformation:
      if (e.input_epcs.empty() || e.output_epcs.empty()) {
        shape_error("TransformationEvent requires inputEPCs and outputEPCs");
      }
      break;
  }
  return env;
}

IngestEnvelope parse_envelope(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& ex) {
    throw Error(Errc::MalformedJson, ex.what());
  }
  return envelope_from_json(j);
}

json to_json(const IngestEnvelope& env) {
  const auto& e = env.event;
  json ev = {{"type", to_string(e.type)},
             {"eventTime", format_time(e.event_time)},
             {"bizStep", e.biz_step},
             {"bizLocation", e.biz_location},
             {"sourceParty", e.source_party}};
  if (e.type != EventType::Transformation) ev["action"] = to_string(e.action);
  if (!e.epc_list.empty()) ev["epcList"] = e.epc_list;
  if (e.parent_id) ev["parentID"] = *e.parent_id;
  if (!e.child_epcs.empty()) ev["childEPCs"] = e.child_epcs;
  if (!e.input_epcs.empty()) ev["inputEPCs"] = e.input_epcs;
  if (!e.output_epcs.empty()) ev["outputEPCs"] = e.output_epcs;
  if (!e.item_attributes.empty()) {
    json attrs = json::object();
    for (const auto& [k, v] : e.item_attributes) attrs[k] = scalar_to_json(v);
    ev["itemAttributes"] = std::move(attrs);
  }
  return {{"topic", env.topic}, {"event", std::move(ev)}};
}

std::string serialize_envelope(const IngestEnvelope& env) { return to_json(env).dump(); }

std::string event_identity(const IngestEnvelope& env) {
  // nlohmann::json objects are key-sorted, so dump() is canonical.
  return sha256_hex(serialize_envelope(env));
}

std::string_view bizstep_name(std::string_view biz_step) noexcept {
  constexpr std::string_view kPrefix = "urn:epcglobal:cbv:bizstep:";
  if (biz_step.starts_with(kPrefix)) biz_step.remove_prefix(kPrefix.size());
  return biz_step;
}

// ---------------------------------------------------------------------------

std::string_view to_string(ReadingKind k) noexcept {
  switch (k) {
    case ReadingKind::Temperature: return "temperature";
    case ReadingKind::Humidity: return "humidity";
    case ReadingKind::Gps: return "gps";
  }
  return "temperature";
}

ReadingKind parse_reading_kind(std::string_view text) {
  if (text == "temperature") return ReadingKind::Temperature;
  if (text == "humidity") return ReadingKind::Humidity;
  if (text == "gps") return ReadingKind::Gps;
  throw Error(Errc::InvalidArgument, "unknown reading kind '" + std::string(text) + "'");
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_row(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos
                                                                          : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::optional<double> parse_real(std::string_view s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace

CsvParseResult parse_sensor_csv(std::string_view csv, ReadingKind kind) {
  CsvParseResult result;
  std::vector<std::string_view> lines;
  for (std::size_t pos = 0; pos <= csv.size();) {
    auto nl = csv.find('\n', pos);
    if (nl == std::string_view::npos) nl = csv.size();
    lines.push_back(csv.substr(pos, nl - pos));
    pos = nl + 1;
  }
  std::size_t header_idx = 0;
  while (header_idx < lines.size() && trim(lines[header_idx]).empty()) ++header_idx;
  if (header_idx == lines.size()) throw Error(Errc::MissingColumn, "CSV has no header row");

  const auto header = split_row(lines[header_idx]);
  auto column = [&](std::string_view name) -> std::size_t {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw Error(Errc::MissingColumn, "CSV lacks required column '" + std::string(name) + "'");
  };
  const auto c_device = column("device_id");
  const auto c_time = column("timestamp");
  std::vector<std::size_t> value_cols;
  if (kind == ReadingKind::Gps) {
    value_cols = {column("lat"), column("lon")};
  } else {
    value_cols = {column("value")};
  }

  for (std::size_t i = header_idx + 1; i < lines.size(); ++i) {
    const auto line = trim(lines[i]);
    if (line.empty()) continue;
    const auto cells = split_row(line);
    auto reject = [&](std::string reason) {
      result.rejects.push_back(CsvReject{i + 1, std::string(line), std::move(reason)});
    };
    std::size_t needed = std::max(c_device, c_time);
    for (auto c : value_cols) needed = std::max(needed, c);
    if (cells.size() <= needed) {
      reject("too few columns");
      continue;
    }
    RawReading r;
    r.kind = kind;
    r.device_id = std::string(cells[c_device]);
    if (r.device_id.empty()) {
      reject("empty device_id");
      continue;
    }
    auto t = try_parse_time(cells[c_time]);
    if (!t) {
      reject("unparsable timestamp");
      continue;
    }
    r.timestamp = *t;
    bool ok = true;
    for (auto c : value_cols) {
      auto v = parse_real(cells[c]);
      if (!v) {
        ok = false;
        break;
      }
      r.value.push_back(*v);
    }
    if (!ok) {
      reject("unparsable value");
      continue;
    }
    if (kind == ReadingKind::Gps &&
        (std::abs(r.value[0]) > 90.0 || std::abs(r.value[1]) > 180.0)) {
      reject("coordinate out of range");
      continue;
    }
    result.readings.push_back(std::move(r));
  }
  return result;
}

std::string write_sensor_csv(const std::vector<RawReading>& readings, ReadingKind kind) {
  std::ostringstream out;
  out << (kind == ReadingKind::Gps ? "device_id,timestamp,lat,lon\n" : "device_id,timestamp,value\n");
  char buf[64];
  for (const auto& r : readings) {
    out << r.device_id << ',' << format_time(r.timestamp);
    for (double v : r.value) {
      std::snprintf(buf, sizeof buf, ",%.9g", v);
      out << buf;
    }
    out << '\n';
  }
  return out.str();
}

TriggerDecision classify_trigger(const EpcisEvent& event, const TriggerConfig& config) {
  TriggerDecision d;
  d.auto_verify = config.biz_steps.contains(bizstep_name(event.biz_step));
  return d;
}

}  // namespace tracecheck::epcis
