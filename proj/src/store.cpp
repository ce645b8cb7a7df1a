#include "tracecheck/store.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>

namespace tracecheck::model {

using ledger::encode_composite_key;
using ledger::partial_key;
using nlohmann::json;

namespace {

template <typename T>
void add_unique(std::vector<T>& v, const T& x) {
  if (std::find(v.begin(), v.end(), x) == v.end()) v.push_back(x);
}

std::string join_sorted(std::set<std::string> values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ',';
    out += v;
  }
  return out;
}

std::set<std::string> split_list(const std::string& s) {
  std::set<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    auto next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    if (next > pos) out.insert(s.substr(pos, next - pos));
    pos = next + 1;
  }
  return out;
}

void track(Reads* reads, std::uint64_t version) {
  if (reads) reads->heights.insert(version);
}

bool is_journey_rule(RuleName r) {
  return r == RuleName::HandoverTime || r == RuleName::AttributeConsistency;
}

// Working set for one envelope: journeys, steps and claims read through the
// transaction, modified in memory and written back in flush().
class Applier {
 public:
  Applier(ledger::Transaction& tx, const StoreOptions& options, const epcis::IngestEnvelope& env,
          ApplyResult& result)
      : tx_(tx), options_(options), env_(env), result_(result) {}

  Journey* load(const std::string& id) {
    if (auto it = journeys_.find(id); it != journeys_.end()) return &it->second;
    auto raw = tx_.get(Store::journey_key(id));
    if (!raw) return nullptr;
    return &journeys_.emplace(id, journey_from_json(json::parse(*raw))).first->second;
  }

  Journey& journey(const std::string& id, bool referenced) {
    if (auto* j = load(id)) return *j;
    if (referenced && options_.strict_references) {
      throw Error(Errc::UnknownJourneyReference, "event references unknown journey '" + id + "'");
    }
    Journey j;
    j.journey_id = id;
    result_.journeys_created.push_back(id);
    dirty_.insert(id);
    return journeys_.emplace(id, std::move(j)).first->second;
  }

  void link(const std::string& parent, const std::string& child) {
    if (parent == child || reaches(child, parent)) {
      throw Error(Errc::LineageCycle, "linking " + parent + " -> " + child + " would create a cycle");
    }
    auto& p = journey(parent, true);
    auto& c = journey(child, true);
    add_unique(p.children, child);
    add_unique(c.parents, parent);
    if (c.product_type.empty() && !p.product_type.empty()) c.product_type = p.product_type;
    dirty_.insert(parent);
    dirty_.insert(child);
  }

  void set_product_type(const std::string& id) {
    auto it = env_.event.item_attributes.find("productType");
    if (it == env_.event.item_attributes.end()) return;
    auto& j = journey(id, false);
    j.product_type = epcis::scalar_to_string(it->second);
    dirty_.insert(id);
  }

  void claim(const std::string& journey_id, std::optional<std::set<std::string>> lineage) {
    AttributeMap attrs = env_.event.item_attributes;
    const auto key = encode_composite_key("ItemData", {journey_id, env_.topic});
    ItemData data;
    if (auto raw = tx_.get(key)) {
      data = item_data_from_json(json::parse(*raw));
    } else {
      data.topic = env_.topic;
      data.journey_id = journey_id;
    }
    if (lineage && !attrs.contains("parentId")) {
      if (auto it = data.attributes.find("parentId"); it != data.attributes.end()) {
        lineage->merge(split_list(epcis::scalar_to_string(it->second)));
      }
      attrs["parentId"] = join_sorted(*lineage);
    }
    if (attrs.empty()) return;
    for (auto& [k, v] : attrs) data.attributes[k] = std::move(v);
    tx_.put(key, to_json(data).dump());
  }

  void steps(const std::string& journey_id, const std::string& event_id) {
    const std::string phase(epcis::bizstep_name(env_.event.biz_step));
    if (phase.empty()) return;
    auto& j = journey(journey_id, false);
    const EventRef ref{event_id, env_.event.event_time, env_.event.biz_location, env_.topic, phase};

    std::vector<Step*> open;
    for (const auto& sid : j.steps) {
      if (auto* s = load_step(journey_id, sid); s && s->status == StepStatus::Open) open.push_back(s);
    }
    auto starts_before = [&](const Step* s) { return !s->start || s->start->time <= ref.time; };

    if (options_.closer_steps.contains(phase)) {
      for (auto it = open.rbegin(); it != open.rend(); ++it) {
        if (starts_before(*it)) {
          close(**it, ref, true);
          return;
        }
      }
      if (j.steps.empty()) {
        // A journey first seen at its destination: record the checkpoint.
        auto& s = create_step(j, phase, ref);
        close(s, ref, true);
      }
      return;
    }

    for (const auto* s : open) {
      if (s->phase == phase) return;  // further observation within an open phase
    }
    for (auto* s : open) {
      if (starts_before(s)) close(*s, ref, false);
    }
    create_step(j, phase, ref);
  }

  void flush() {
    for (const auto& id : dirty_) tx_.put(Store::journey_key(id), to_json(journeys_.at(id)).dump());
    for (const auto& sid : dirty_steps_) {
      const auto& s = steps_.at(sid);
      tx_.put(Store::step_key(s.journey_id, sid), to_json(s).dump());
    }
  }

 private:
  // True if `target` is `from` or one of its descendants.
  bool reaches(const std::string& from, const std::string& target) {
    std::set<std::string> seen;
    std::vector<std::string> stack{from};
    while (!stack.empty()) {
      auto id = std::move(stack.back());
      stack.pop_back();
      if (id == target) return true;
      if (!seen.insert(id).second) continue;
      if (const auto* j = load(id)) {
        for (const auto& c : j->children) stack.push_back(c);
      }
    }
    return false;
  }

  Step* load_step(const std::string& journey_id, const std::string& step_id) {
    if (auto it = steps_.find(step_id); it != steps_.end()) return &it->second;
    auto raw = tx_.get(Store::step_key(journey_id, step_id));
    if (!raw) return nullptr;
    return &steps_.emplace(step_id, step_from_json(json::parse(*raw))).first->second;
  }

  Step& create_step(Journey& j, const std::string& phase, const EventRef& ref) {
    const auto id = Store::make_step_id(j.journey_id, phase, ref.location, ref.time);
    if (auto* existing = load_step(j.journey_id, id)) return *existing;
    Step s;
    s.step_id = id;
    s.journey_id = j.journey_id;
    s.phase = phase;
    s.location = ref.location;
    s.start = ref;
    j.steps.push_back(id);
    dirty_.insert(j.journey_id);
    dirty_steps_.insert(id);
    tx_.put(encode_composite_key("StepIndex", {id}), j.journey_id);
    result_.steps_opened.push_back(id);
    return steps_.emplace(id, std::move(s)).first->second;
  }

  void close(Step& s, const EventRef& ref, bool announce) {
    s.end = ref;
    s.status = StepStatus::Closed;
    dirty_steps_.insert(s.step_id);
    result_.steps_closed.push_back(s.step_id);
    if (announce) {
      tx_.emit(std::string(kStepClosedEvent),
               json{{"stepId", s.step_id}, {"journeyId", s.journey_id}, {"phase", s.phase},
                    {"bizStep", ref.biz_step}, {"topic", ref.topic}, {"eventId", ref.event_id}}
                   .dump());
    }
  }

  ledger::Transaction& tx_;
  const StoreOptions& options_;
  const epcis::IngestEnvelope& env_;
  ApplyResult& result_;
  std::map<std::string, Journey> journeys_;
  std::map<std::string, Step> steps_;
  std::set<std::string> dirty_;
  std::set<std::string> dirty_steps_;
};

}  // namespace

json to_json(const LineageGraph& g) {
  json edges = json::array();
  for (const auto& [p, c] : g.edges) edges.push_back({{"parent", p}, {"child", c}});
  return {{"root", g.root}, {"nodes", g.nodes}, {"edges", std::move(edges)},
          {"integrityErrors", g.integrity_errors}};
}

Store::Store(ledger::WorldState& ledger, StoreOptions options)
    : ledger_(ledger), options_(std::move(options)) {}

std::string Store::journey_key(std::string_view journey_id) {
  return encode_composite_key("Journey", {std::string(journey_id)});
}

std::string Store::step_key(std::string_view journey_id, std::string_view step_id) {
  return encode_composite_key("Step", {std::string(journey_id), std::string(step_id)});
}

std::string Store::point_key(std::string_view journey_id, std::string_view step_id,
                             std::string_view device_id, Instant t) {
  return encode_composite_key("Point", {std::string(journey_id), std::string(step_id),
                                        std::string(device_id), format_time(t)});
}

std::string Store::reliability_key(std::string_view device_id) {
  return encode_composite_key("DeviceReliability", {std::string(device_id)});
}

std::string Store::reliability_value(std::string_view device_id, double score) {
  return json{{"deviceId", device_id}, {"score", score}}.dump();
}

std::string Store::verification_key(const std::string& subject, std::size_t seq,
                                    const std::string& verification_id) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%010zu", seq);
  return encode_composite_key("Verification", {subject, buf, verification_id});
}

std::string Store::make_step_id(std::string_view journey_id, std::string_view phase,
                                std::string_view location, Instant start) {
  std::string canonical;
  append_framed(canonical, journey_id);
  append_framed(canonical, phase);
  append_framed(canonical, location);
  append_framed(canonical, format_time(start));
  return sha256_hex(canonical).substr(0, 16);
}

ApplyResult Store::apply_event(const epcis::IngestEnvelope& env) {
  const auto event_id = epcis::event_identity(env);
  const auto event_key = encode_composite_key("Event", {event_id});
  const auto& e = env.event;

  for (int attempt = 0;; ++attempt) {
    ApplyResult result;
    result.event_id = event_id;
    auto tx = ledger_.begin();
    if (tx.contains(event_key)) {
      result.skipped = true;
      return result;
    }
    tx.put(event_key, epcis::serialize_envelope(env));
    Applier a(tx, options_, env, result);

    switch (e.type) {
      case epcis::EventType::Object:
        for (const auto& epc : e.epc_list) {
          a.journey(epc, false);
          a.set_product_type(epc);
          a.steps(epc, event_id);
          a.claim(epc, std::nullopt);
        }
        break;
      case epcis::EventType::Aggregation: {
        const auto& parent = *e.parent_id;
        a.journey(parent, false);
        a.set_product_type(parent);
        std::optional<std::set<std::string>> lineage;
        if (e.action != epcis::Action::Delete) {
          lineage.emplace(e.child_epcs.begin(), e.child_epcs.end());
          for (const auto& child : e.child_epcs) a.link(child, parent);
        }
        a.steps(parent, event_id);
        a.claim(parent, lineage);
        break;
      }
      case epcis::EventType::Transformation: {
        const std::set<std::string> inputs(e.input_epcs.begin(), e.input_epcs.end());
        for (const auto& out : e.output_epcs) {
          a.journey(out, false);
          a.set_product_type(out);
          for (const auto& in : e.input_epcs) a.link(in, out);
          a.steps(out, event_id);
          a.claim(out, inputs);
        }
        break;
      }
    }
    a.flush();
    try {
      result.tx_id = ledger_.submit(std::move(tx), event_id).tx_id;
      return result;
    } catch (const Error& err) {
      if (err.code() != Errc::WriteConflict || attempt + 1 >= options_.max_retries) throw;
    }
  }
}

namespace {

void check_reading(const epcis::RawReading& r) {
  const std::size_t dims = r.kind == epcis::ReadingKind::Gps ? 2 : 1;
  if (r.device_id.empty()) throw Error(Errc::InvalidArgument, "reading without deviceId");
  if (r.value.size() != dims) {
    throw Error(Errc::InvalidArgument, "reading from " + r.device_id + " has " +
                                           std::to_string(r.value.size()) + " components, expected " +
                                           std::to_string(dims));
  }
  for (double v : r.value) {
    if (!std::isfinite(v)) throw Error(Errc::InvalidArgument, "non-finite reading value");
  }
  if (r.kind == epcis::ReadingKind::Gps &&
      (std::abs(r.value[0]) > 90 || std::abs(r.value[1]) > 180)) {
    throw Error(Errc::InvalidArgument, "GPS reading out of range");
  }
}

}  // namespace

Point Store::append_point(const std::string& journey_id, const std::string& step_id,
                          const epcis::RawReading& reading, const std::string& topic) {
  Point p{journey_id, step_id, reading, topic};
  append_points({p});
  return p;
}

std::string Store::append_points(const std::vector<Point>& points) {
  auto tx = ledger_.begin();
  std::set<std::string> known_steps;
  std::map<std::string, epcis::ReadingKind> kinds;  // step/device prefix -> kind
  for (const auto& p : points) {
    check_reading(p.reading);
    const auto sk = step_key(p.journey_id, p.step_id);
    if (!known_steps.contains(sk)) {
      if (!ledger_.contains(sk)) {
        throw Error(Errc::UnknownStep, "unknown step '" + p.step_id + "' of journey '" +
                                           p.journey_id + "'");
      }
      known_steps.insert(sk);
    }
    const auto key = point_key(p.journey_id, p.step_id, p.reading.device_id, p.reading.timestamp);
    if (tx.contains(key)) {
      throw Error(Errc::DuplicatePoint, "point already recorded for device " + p.reading.device_id +
                                            " at " + format_time(p.reading.timestamp));
    }
    const auto prefix = partial_key("Point", {p.journey_id, p.step_id, p.reading.device_id});
    auto kind = kinds.find(prefix);
    if (kind == kinds.end()) {
      if (auto first = ledger_.first_in_range(prefix)) {
        kind = kinds.emplace(prefix, decode_point(first->first, first->second.value).reading.kind).first;
      } else {
        kind = kinds.emplace(prefix, p.reading.kind).first;
      }
    }
    if (kind->second != p.reading.kind) {
      throw Error(Errc::DeviceKindMismatch,
                  "device " + p.reading.device_id + " already reports " +
                      std::string(epcis::to_string(kind->second)));
    }
    tx.put(key, encode_point_value(p));
  }
  try {
    return ledger_.submit(std::move(tx), "points").tx_id;
  } catch (const Error& err) {
    if (err.code() == Errc::WriteConflict) {
      throw Error(Errc::DuplicatePoint, "point committed concurrently: " + std::string(err.what()));
    }
    throw;
  }
}

// ---------------------------------------------------------------------------

Policy Store::load_policy(std::string_view json_text) { return store_policy(parse_policy(json_text)); }

Policy Store::store_policy(const Policy& policy) {
  const auto key = encode_composite_key("Policy", {policy.product_type, policy.policy_id});
  ledger_.submit_transaction({{key, to_json(policy).dump()}}, {}, "policy:" + policy.policy_id);
  return policy;
}

std::vector<Policy> Store::policies() const {
  std::vector<Policy> out;
  for (const auto& [k, e] : ledger_.get_range(partial_key("Policy", {}))) {
    out.push_back(parse_policy(std::string_view(e.value)));
  }
  return out;
}

namespace {

struct Candidate {
  Policy policy;
  std::uint64_t version;
  int rank;
};

std::optional<Policy> pick(std::vector<Candidate> c, Reads* reads) {
  if (c.empty()) return std::nullopt;
  auto best = std::min_element(c.begin(), c.end(), [](const auto& a, const auto& b) {
    return a.rank != b.rank ? a.rank < b.rank : a.policy.policy_id < b.policy.policy_id;
  });
  track(reads, best->version);
  return std::move(best->policy);
}

}  // namespace

namespace {

std::vector<std::string> product_types(std::string_view product_type) {
  std::vector<std::string> types;
  if (!product_type.empty()) types.emplace_back(product_type);
  if (product_type != "*") types.emplace_back("*");
  return types;
}

}  // namespace

std::optional<Policy> Store::find_policy(std::string_view product_type, std::string_view phase,
                                         Reads* reads) const {
  std::vector<Candidate> c;
  for (const auto& type : product_types(product_type)) {
    for (const auto& [k, e] : ledger_.get_range(partial_key("Policy", {type}))) {
      auto p = parse_policy(std::string_view(e.value));
      if (!p.applies_to_phase(phase)) continue;
      const int rank = (type == "*" ? 2 : 0) + (p.phases.empty() ? 1 : 0);
      c.push_back({std::move(p), e.version, rank});
    }
  }
  return pick(std::move(c), reads);
}

std::optional<Policy> Store::find_journey_policy(std::string_view product_type, Reads* reads) const {
  std::vector<Candidate> c;
  for (const auto& type : product_types(product_type)) {
    for (const auto& [k, e] : ledger_.get_range(partial_key("Policy", {type}))) {
      auto p = parse_policy(std::string_view(e.value));
      const bool journey_level = p.mode == Mode::DSoD ||
                                 std::any_of(p.rules.begin(), p.rules.end(),
                                             [](const RuleSpec& r) { return is_journey_rule(r.name); });
      const int rank = (type == "*" ? 2 : 0) + (journey_level ? 0 : 1);
      c.push_back({std::move(p), e.version, rank});
    }
  }
  return pick(std::move(c), reads);
}

std::optional<Journey> Store::find_journey(std::string_view journey_id, Reads* reads) const {
  auto e = ledger_.find(journey_key(journey_id));
  if (!e) return std::nullopt;
  track(reads, e->version);
  return journey_from_json(json::parse(e->value));
}

Journey Store::journey(std::string_view journey_id, Reads* reads) const {
  if (auto j = find_journey(journey_id, reads)) return std::move(*j);
  throw Error(Errc::UnknownJourney, "unknown journey '" + std::string(journey_id) + "'");
}

std::vector<Journey> Store::journeys() const {
  std::vector<Journey> out;
  for (const auto& [k, e] : ledger_.get_range(partial_key("Journey", {}))) {
    out.push_back(journey_from_json(json::parse(e.value)));
  }
  return out;
}

std::optional<Step> Store::find_step(std::string_view step_id, Reads* reads) const {
  auto index = ledger_.find(encode_composite_key("StepIndex", {std::string(step_id)}));
  if (!index) return std::nullopt;
  auto e = ledger_.find(step_key(index->value, step_id));
  if (!e) return std::nullopt;
  track(reads, e->version);
  return step_from_json(json::parse(e->value));
}

Step Store::step(std::string_view step_id, Reads* reads) const {
  if (auto s = find_step(step_id, reads)) return std::move(*s);
  throw Error(Errc::UnknownStep, "unknown step '" + std::string(step_id) + "'");
}

std::vector<Step> Store::steps(std::string_view journey_id, Reads* reads) const {
  std::vector<Step> out;
  for (const auto& sid : journey(journey_id, reads).steps) {
    auto e = ledger_.find(step_key(journey_id, sid));
    if (!e) continue;
    track(reads, e->version);
    out.push_back(step_from_json(json::parse(e->value)));
  }
  return out;
}

std::optional<std::string> Store::resolve_step(std::string_view journey_id, Instant t) const {
  std::optional<Step> best;
  for (auto& s : steps(journey_id)) {
    if (!s.start || t < s.start->time) continue;
    if (s.end && t > s.end->time) continue;
    if (!best || best->start->time <= s.start->time) best = std::move(s);
  }
  if (!best) return std::nullopt;
  return best->step_id;
}

std::vector<Point> Store::points(std::string_view journey_id, std::string_view step_id,
                                 Reads* reads) const {
  std::vector<Point> out;
  for (const auto& [k, e] :
       ledger_.get_range(partial_key("Point", {std::string(journey_id), std::string(step_id)}))) {
    track(reads, e.version);
    out.push_back(decode_point(k, e.value));
  }
  return out;
}

std::vector<ItemData> Store::claims(std::string_view journey_id, Reads* reads) const {
  std::vector<ItemData> out;
  for (const auto& [k, e] : ledger_.get_range(partial_key("ItemData", {std::string(journey_id)}))) {
    track(reads, e.version);
    out.push_back(item_data_from_json(json::parse(e.value)));
  }
  return out;
}

LineageGraph Store::lineage(std::string_view journey_id, Direction direction) const {
  LineageGraph g;
  g.root = std::string(journey_id);
  journey(journey_id);  // UnknownJourney

  enum class Color { Gray, Black };
  std::map<std::string, Color> color;
  std::set<std::pair<std::string, std::string>> edge_set;

  std::function<void(const std::string&)> visit = [&](const std::string& id) {
    color[id] = Color::Gray;
    g.nodes.push_back(id);
    const auto j = find_journey(id);
    const auto& next = direction == Direction::Up ? j->parents : j->children;
    for (const auto& n : next) {
      auto edge = direction == Direction::Up ? std::pair{n, id} : std::pair{id, n};
      if (edge_set.insert(edge).second) g.edges.push_back(edge);
      auto it = color.find(n);
      if (it != color.end()) {
        if (it->second == Color::Gray) {
          g.integrity_errors.push_back("lineage cycle through " + id + " -> " + n);
        }
        continue;
      }
      if (!find_journey(n)) {
        g.integrity_errors.push_back(id + " links to unknown journey " + n);
        color[n] = Color::Black;
        continue;
      }
      visit(n);
    }
    color[id] = Color::Black;
  };
  visit(g.root);
  return g;
}

std::vector<std::string> Store::check_link_consistency() const {
  std::map<std::string, Journey> all;
  for (auto& j : journeys()) all.emplace(j.journey_id, std::move(j));
  auto lists = [](const std::vector<std::string>& v, const std::string& x) {
    return std::find(v.begin(), v.end(), x) != v.end();
  };
  std::vector<std::string> problems;
  for (const auto& [id, j] : all) {
    for (const auto& c : j.children) {
      auto it = all.find(c);
      if (it == all.end()) problems.push_back(id + " lists unknown child " + c);
      else if (!lists(it->second.parents, id)) problems.push_back(id + " lists child " + c + " which does not list it as parent");
    }
    for (const auto& p : j.parents) {
      auto it = all.find(p);
      if (it == all.end()) problems.push_back(id + " lists unknown parent " + p);
      else if (!lists(it->second.children, id)) problems.push_back(id + " lists parent " + p + " which does not list it as child");
    }
  }
  return problems;
}

std::map<std::string, double> Store::reliability(const std::vector<std::string>& devices) const {
  std::map<std::string, double> out;
  for (const auto& d : devices) {
    auto e = ledger_.find(reliability_key(d));
    out[d] = e ? json::parse(e->value).value("score", 1.0) : 1.0;
  }
  return out;
}

void Store::store_reliability(const std::map<std::string, double>& scores) {
  std::vector<ledger::Write> writes;
  for (const auto& [d, s] : scores) writes.push_back({reliability_key(d), reliability_value(d, s)});
  ledger_.submit_transaction(std::move(writes), {}, "reliability");
}

std::vector<GuardsVerification> Store::verifications(std::string_view subject) const {
  std::vector<GuardsVerification> out;
  for (const auto& [k, e] :
       ledger_.get_range(partial_key("Verification", {std::string(subject)}))) {
    out.push_back(verification_from_json(json::parse(e.value)));
  }
  return out;
}

std::size_t Store::verification_count(std::string_view subject) const {
  return ledger_.count_range(partial_key("Verification", {std::string(subject)}));
}

}  // namespace tracecheck::model
