#include "tracecheck/model.hpp"

#include <algorithm>
#include <limits>

#include "json_util.hpp"
#include "tracecheck/ledger.hpp"
#include "tracecheck/preprocess.hpp"
#include "tracecheck/rules.hpp"

namespace tracecheck::model {

using nlohmann::json;

std::string_view to_string(Mode m) noexcept {
  switch (m) {
    case Mode::SSoD: return "SSoD";
    case Mode::MSoD: return "MSoD";
    case Mode::DSoD: return "DSoD";
  }
  return "SSoD";
}

std::string_view to_string(RuleName r) noexcept {
  switch (r) {
    case RuleName::Threshold: return "threshold";
    case RuleName::Geofence: return "geofence";
    case RuleName::Backtrack: return "backtrack";
    case RuleName::HandoverTime: return "handoverTime";
    case RuleName::ShipmentTimeout: return "shipmentTimeout";
    case RuleName::AttributeConsistency: return "attributeConsistency";
  }
  return "threshold";
}

std::optional<Mode> parse_mode(std::string_view text) noexcept {
  for (auto m : {Mode::SSoD, Mode::MSoD, Mode::DSoD}) {
    if (to_string(m) == text) return m;
  }
  return std::nullopt;
}

std::optional<RuleName> parse_rule_name(std::string_view text) noexcept {
  for (auto r : {RuleName::Threshold, RuleName::Geofence, RuleName::Backtrack,
                 RuleName::HandoverTime, RuleName::ShipmentTimeout,
                 RuleName::AttributeConsistency}) {
    if (to_string(r) == text) return r;
  }
  return std::nullopt;
}

bool Policy::applies_to_phase(std::string_view phase) const {
  if (phases.empty()) return true;
  return std::any_of(phases.begin(), phases.end(), [&](const std::string& p) {
    return epcis::bizstep_name(p) == epcis::bizstep_name(phase);
  });
}

void RuleResult::add(Violation v) {
  verdict = worst(verdict, v.level);
  violations.push_back(std::move(v));
}

// ---------------------------------------------------------------------------

namespace {

json strings(const std::vector<std::string>& v) { return json(v); }

std::vector<std::string> strings_from(const json& j, const char* key) {
  std::vector<std::string> out;
  if (auto it = j.find(key); it != j.end() && it->is_array()) {
    for (const auto& s : *it) out.push_back(s.get<std::string>());
  }
  return out;
}

std::string str(const json& j, const char* key) {
  auto it = j.find(key);
  return it == j.end() || it->is_null() ? std::string{} : it->get<std::string>();
}

json attributes_json(const AttributeMap& attrs) {
  json out = json::object();
  for (const auto& [k, v] : attrs) out[k] = epcis::scalar_to_json(v);
  return out;
}

AttributeMap attributes_from(const json& j) {
  AttributeMap out;
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) out[k] = epcis::scalar_from_json(v);
  }
  return out;
}

}  // namespace

json to_json(const EventRef& r) {
  return {{"eventId", r.event_id}, {"time", format_time(r.time)}, {"location", r.location},
          {"topic", r.topic}, {"bizStep", r.biz_step}};
}

EventRef event_ref_from_json(const json& j) {
  return EventRef{str(j, "eventId"), parse_time(str(j, "time")), str(j, "location"),
                  str(j, "topic"), str(j, "bizStep")};
}

json to_json(const Step& s) {
  json j{{"stepId", s.step_id},
         {"journeyId", s.journey_id},
         {"phase", s.phase},
         {"location", s.location},
         {"status", s.status == StepStatus::Open ? "open" : "closed"}};
  j["startEvent"] = s.start ? to_json(*s.start) : json(nullptr);
  j["endEvent"] = s.end ? to_json(*s.end) : json(nullptr);
  return j;
}

Step step_from_json(const json& j) {
  Step s;
  s.step_id = str(j, "stepId");
  s.journey_id = str(j, "journeyId");
  s.phase = str(j, "phase");
  s.location = str(j, "location");
  s.status = str(j, "status") == "closed" ? StepStatus::Closed : StepStatus::Open;
  if (auto it = j.find("startEvent"); it != j.end() && !it->is_null()) s.start = event_ref_from_json(*it);
  if (auto it = j.find("endEvent"); it != j.end() && !it->is_null()) s.end = event_ref_from_json(*it);
  return s;
}

json to_json(const Journey& j) {
  return {{"journeyId", j.journey_id}, {"productType", j.product_type},
          {"parents", strings(j.parents)}, {"children", strings(j.children)},
          {"steps", strings(j.steps)}};
}

Journey journey_from_json(const json& j) {
  return Journey{str(j, "journeyId"), str(j, "productType"), strings_from(j, "parents"),
                 strings_from(j, "children"), strings_from(j, "steps")};
}

json to_json(const ItemData& d) {
  return {{"topic", d.topic}, {"journeyId", d.journey_id}, {"attributes", attributes_json(d.attributes)}};
}

ItemData item_data_from_json(const json& j) {
  return ItemData{str(j, "topic"), str(j, "journeyId"),
                  attributes_from(j.value("attributes", json::object()))};
}

json to_json(const Violation& v) {
  json j{{"code", v.code}, {"detail", v.detail}, {"magnitude", v.magnitude},
         {"level", std::string(to_string(v.level))}};
  if (v.first_index) j["firstIndex"] = *v.first_index;
  if (v.last_index) j["lastIndex"] = *v.last_index;
  if (v.first_time) j["firstTime"] = format_time(*v.first_time);
  if (v.last_time) j["lastTime"] = format_time(*v.last_time);
  return j;
}

Violation violation_from_json(const json& j) {
  Violation v;
  v.code = str(j, "code");
  v.detail = str(j, "detail");
  v.magnitude = j.value("magnitude", 0.0);
  v.level = parse_verdict(j.value("level", "alert"));
  if (j.contains("firstIndex")) v.first_index = j["firstIndex"].get<std::size_t>();
  if (j.contains("lastIndex")) v.last_index = j["lastIndex"].get<std::size_t>();
  if (j.contains("firstTime")) v.first_time = parse_time(j["firstTime"].get<std::string>());
  if (j.contains("lastTime")) v.last_time = parse_time(j["lastTime"].get<std::string>());
  return v;
}

json to_json(const RuleResult& r) {
  json violations = json::array();
  for (const auto& v : r.violations) violations.push_back(to_json(v));
  json j{{"ruleName", r.rule_name}, {"verdict", std::string(to_string(r.verdict))},
         {"violations", std::move(violations)}, {"metrics", r.metrics}, {"notes", r.notes}};
  if (!r.topic.empty()) j["topic"] = r.topic;
  return j;
}

RuleResult rule_result_from_json(const json& j) {
  RuleResult r;
  r.rule_name = str(j, "ruleName");
  r.topic = str(j, "topic");
  r.verdict = parse_verdict(j.value("verdict", "okay"));
  for (const auto& v : j.value("violations", json::array())) r.violations.push_back(violation_from_json(v));
  if (auto it = j.find("metrics"); it != j.end()) {
    for (const auto& [k, v] : it->items()) {
      r.metrics[k] = v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN();
    }
  }
  r.notes = strings_from(j, "notes");
  return r;
}

json to_json(const DiscrepancyReport& d) {
  return {{"journeyId", d.journey_id}, {"attribute", d.attribute},
          {"perTopic", attributes_json(d.per_topic)},
          {"status", d.discrepant ? "discrepant" : "consistent"}, {"notes", d.notes}};
}

DiscrepancyReport discrepancy_from_json(const json& j) {
  return DiscrepancyReport{str(j, "journeyId"), str(j, "attribute"),
                           attributes_from(j.value("perTopic", json::object())),
                           str(j, "status") == "discrepant", strings_from(j, "notes")};
}

json to_json(const GuardsVerification& v) {
  json results = json::array();
  for (const auto& r : v.rule_results) results.push_back(to_json(r));
  json discrepancies = json::array();
  for (const auto& d : v.discrepancies) discrepancies.push_back(to_json(d));
  return {{"verificationId", v.verification_id},
          {"subject", v.subject},
          {"subjectKind", v.subject_kind},
          {"journeyId", v.journey_id},
          {"policyId", v.policy_id},
          {"trigger", v.trigger},
          {"requestedBy", v.requested_by},
          {"outcome", std::string(to_string(v.outcome))},
          {"ruleResults", std::move(results)},
          {"discrepancies", std::move(discrepancies)},
          {"txIds", v.tx_ids},
          {"notes", v.notes},
          {"verifiedAt", format_time(v.verified_at)}};
}

GuardsVerification verification_from_json(const json& j) {
  GuardsVerification v;
  v.verification_id = str(j, "verificationId");
  v.subject = str(j, "subject");
  v.subject_kind = str(j, "subjectKind");
  v.journey_id = str(j, "journeyId");
  v.policy_id = str(j, "policyId");
  v.trigger = str(j, "trigger");
  v.requested_by = str(j, "requestedBy");
  v.outcome = parse_verdict(j.value("outcome", "okay"));
  for (const auto& r : j.value("ruleResults", json::array())) v.rule_results.push_back(rule_result_from_json(r));
  for (const auto& d : j.value("discrepancies", json::array())) v.discrepancies.push_back(discrepancy_from_json(d));
  v.tx_ids = strings_from(j, "txIds");
  v.notes = strings_from(j, "notes");
  v.verified_at = parse_time(str(j, "verifiedAt"));
  return v;
}

std::string encode_point_value(const Point& p) {
  return json{{"kind", std::string(epcis::to_string(p.reading.kind))},
              {"value", p.reading.value},
              {"topic", p.topic}}
      .dump();
}

Point decode_point(std::string_view key, std::string_view value) {
  const auto k = ledger::decode_composite_key(key);
  if (k.object_type != "Point" || k.attributes.size() != 4) {
    throw Error(Errc::InvalidArgument, "not a Point key");
  }
  const auto j = json::parse(value);
  Point p;
  p.journey_id = k.attributes[0];
  p.step_id = k.attributes[1];
  p.reading.device_id = k.attributes[2];
  p.reading.timestamp = parse_time(k.attributes[3]);
  p.reading.kind = epcis::parse_reading_kind(j.at("kind").get<std::string>());
  p.reading.value = j.at("value").get<std::vector<double>>();
  p.topic = j.value("topic", "");
  return p;
}

// ---------------------------------------------------------------------------

namespace {

Verdict severity_value(const json& v, const std::string& path) {
  if (!v.is_string()) detail::schema_error(path, "expected \"warning\" or \"alert\"");
  const auto s = v.get<std::string>();
  if (s == "warning") return Verdict::Warning;
  if (s == "alert") return Verdict::Alert;
  detail::schema_error(path, "expected \"warning\" or \"alert\", got \"" + s + "\"");
}

}  // namespace

Policy parse_policy(const json& doc) {
  using detail::schema_error;
  detail::require_object(doc, "");
  Policy p;
  p.source = doc;
  p.policy_id = detail::req_string(doc, "policyId", "");
  p.product_type = detail::req_string(doc, "productType", "");
  for (const auto* field : {"policyId", "productType"}) {
    if (doc[field].get<std::string>().find('\0') != std::string::npos) {
      schema_error(std::string("/") + field, "must not contain NUL");
    }
  }

  const auto mode_text = detail::req_string(doc, "mode", "");
  const auto mode = parse_mode(mode_text);
  if (!mode) schema_error("/mode", "expected SSoD, MSoD or DSoD, got \"" + mode_text + "\"");
  p.mode = *mode;

  if (auto it = doc.find("phases"); it != doc.end() && !it->is_null()) {
    if (!it->is_array()) schema_error("/phases", "expected an array of strings");
    for (std::size_t i = 0; i < it->size(); ++i) {
      if (!(*it)[i].is_string()) schema_error("/phases/" + std::to_string(i), "expected a string");
      p.phases.push_back((*it)[i].get<std::string>());
    }
  }

  if (auto it = doc.find("severityMap"); it != doc.end() && !it->is_null()) {
    if (!it->is_object()) schema_error("/severityMap", "expected an object");
    for (const auto& [name, v] : it->items()) {
      if (!parse_rule_name(name)) schema_error("/severityMap/" + name, "unknown rule name");
      p.severity_map[name] = severity_value(v, "/severityMap/" + name);
    }
  }

  const auto rules = doc.find("rules");
  if (rules == doc.end() || !rules->is_array()) schema_error("/rules", "expected an array");
  if (rules->empty()) schema_error("/rules", "at least one rule is required");
  for (std::size_t i = 0; i < rules->size(); ++i) {
    const auto path = "/rules/" + std::to_string(i);
    const auto& r = (*rules)[i];
    detail::require_object(r, path);
    const auto name_text = detail::req_string(r, "ruleName", path);
    const auto name = parse_rule_name(name_text);
    if (!name) schema_error(path + "/ruleName", "unknown rule \"" + name_text + "\"");
    RuleSpec spec;
    spec.name = *name;
    if (auto pit = r.find("params"); pit != r.end() && !pit->is_null()) spec.params = *pit;
    rules::validate_rule_params(*name, spec.params, path + "/params");
    if (auto sit = r.find("severity"); sit != r.end() && !sit->is_null()) {
      spec.severity = severity_value(*sit, path + "/severity");
    } else if (auto m = p.severity_map.find(name_text); m != p.severity_map.end()) {
      spec.severity = m->second;
    }
    p.rules.push_back(std::move(spec));
  }

  if (auto it = doc.find("preprocessing"); it != doc.end() && !it->is_null()) {
    preprocess::parse_preprocess_options(*it, "/preprocessing");
    p.preprocessing = *it;
  }
  return p;
}

Policy parse_policy(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(Errc::MalformedJson, std::string("policy: ") + e.what());
  }
  return parse_policy(doc);
}

json to_json(const Policy& p) {
  if (!p.source.is_null()) return p.source;
  json rules = json::array();
  for (const auto& r : p.rules) {
    rules.push_back({{"ruleName", std::string(to_string(r.name))}, {"params", r.params},
                     {"severity", std::string(to_string(r.severity))}});
  }
  json j{{"policyId", p.policy_id}, {"productType", p.product_type},
         {"mode", std::string(to_string(p.mode))}, {"phases", p.phases}, {"rules", std::move(rules)}};
  if (!p.preprocessing.empty()) j["preprocessing"] = p.preprocessing;
  return j;
}

}  // namespace tracecheck::model
