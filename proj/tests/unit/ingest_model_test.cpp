#include <gtest/gtest.h>

#include "support.hpp"
#include "tracecheck/epcis.hpp"
#include "tracecheck/model.hpp"
#include "tracecheck/store.hpp"

namespace tracecheck {
namespace {

using nlohmann::json;
using testing::at_min;
using testing::t0;

template <class F>
Errc code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::InvalidArgument;
}

std::string envelope(const std::string& topic, json event) {
  return json{{"topic", topic}, {"event", std::move(event)}}.dump();
}

json object_event(const std::string& epc, const std::string& biz_step, const std::string& time,
                  const std::string& location = "loc") {
  return {{"type", "ObjectEvent"}, {"eventTime", time},   {"epcList", {epc}},
          {"bizStep", biz_step},   {"bizLocation", location}};
}

// ---------------------------------------------------------------------------

TEST(Time, ParsesOffsetsToUtc) {
  EXPECT_EQ(parse_time("2024-06-03T10:00:00+02:00"), t0());
  EXPECT_EQ(parse_time("2024-06-03T08:00:00.000Z"), t0());
  EXPECT_EQ(parse_time("2024-06-03T07:30:00-00:30"), t0());
  EXPECT_EQ(format_time(at_min(90.5)), "2024-06-03T09:30:30Z");
  EXPECT_EQ(code_of([] { parse_time("2024-06-03T08:00:00"); }), Errc::InvalidTimestamp);
  EXPECT_EQ(code_of([] { parse_time("yesterday"); }), Errc::InvalidTimestamp);
  // 1970-01-01 to 2024-06-03 is 19877 days.
  EXPECT_EQ(std::chrono::duration_cast<std::chrono::seconds>(t0().time_since_epoch()).count(),
            19877LL * 86400 + 8 * 3600);
}

TEST(Verdicts, OrderAndNames) {
  EXPECT_LT(Verdict::Okay, Verdict::Warning);
  EXPECT_LT(Verdict::Warning, Verdict::Alert);
  EXPECT_EQ(worst(Verdict::Alert, Verdict::Okay), Verdict::Alert);
  EXPECT_EQ(parse_verdict("warning"), Verdict::Warning);
  EXPECT_EQ(to_string(Verdict::Alert), "alert");
  EXPECT_EQ(code_of([] { parse_verdict("fine"); }), Errc::InvalidArgument);
}

TEST(Envelope, ParsesObjectEvent) {
  const auto env = epcis::parse_envelope(envelope(
      "producer", {{"type", "ObjectEvent"},
                   {"eventTime", "2024-06-03T08:00:00Z"},
                   {"epcList", {"urn:a"}},
                   {"action", "ADD"},
                   {"bizStep", "urn:epcglobal:cbv:bizstep:shipping"},
                   {"itemAttributes", {{"weightKg", 12.5}, {"variety", "X"}, {"organic", true}}},
                   {"unknownField", 1}}));
  EXPECT_EQ(env.topic, "producer");
  EXPECT_EQ(env.event.type, epcis::EventType::Object);
  EXPECT_EQ(env.event.action, epcis::Action::Add);
  EXPECT_EQ(env.event.event_time, t0());
  EXPECT_EQ(epcis::bizstep_name(env.event.biz_step), "shipping");
  EXPECT_EQ(std::get<double>(env.event.item_attributes.at("weightKg")), 12.5);
  EXPECT_EQ(std::get<std::string>(env.event.item_attributes.at("variety")), "X");
  EXPECT_EQ(std::get<std::string>(env.event.item_attributes.at("organic")), "true");
  EXPECT_EQ(epcis::parse_envelope(epcis::serialize_envelope(env)), env);
}

TEST(Envelope, ErrorsAreClassified) {
  EXPECT_EQ(code_of([] { epcis::parse_envelope("{"); }), Errc::MalformedJson);
  EXPECT_EQ(code_of([] { epcis::parse_envelope("[]"); }), Errc::MalformedJson);
  EXPECT_EQ(code_of([] { epcis::parse_envelope(R"({"event":{}})"); }), Errc::MissingTopic);
  EXPECT_EQ(code_of([] { epcis::parse_envelope(R"({"topic":"","event":{}})"); }), Errc::MissingTopic);
  EXPECT_EQ(code_of([] {
              epcis::parse_envelope(envelope("t", {{"type", "QuantityEvent"}, {"eventTime", "2024-06-03T08:00:00Z"}}));
            }),
            Errc::UnknownEventType);
  EXPECT_EQ(code_of([] {
              epcis::parse_envelope(envelope("t", {{"type", "ObjectEvent"}, {"eventTime", "2024-06-03T08:00:00Z"}}));
            }),
            Errc::EventShapeMismatch);
  EXPECT_EQ(code_of([] {
              epcis::parse_envelope(envelope(
                  "t", {{"type", "AggregationEvent"}, {"eventTime", "2024-06-03T08:00:00Z"}, {"childEPCs", {"a"}}}));
            }),
            Errc::EventShapeMismatch);
  EXPECT_EQ(code_of([] {
              epcis::parse_envelope(envelope(
                  "t", {{"type", "TransformationEvent"}, {"eventTime", "2024-06-03T08:00:00Z"}, {"inputEPCs", {"a"}}}));
            }),
            Errc::EventShapeMismatch);
  EXPECT_EQ(code_of([] { epcis::parse_envelope(envelope("t", object_event("a", "x", "03/06/2024"))); }),
            Errc::InvalidTimestamp);
}

TEST(Envelope, IdentityIncludesTopic) {
  const auto a = epcis::parse_envelope(envelope("producer", object_event("e", "shipping", "2024-06-03T08:00:00Z")));
  auto b = a;
  b.topic = "carrier";
  EXPECT_NE(epcis::event_identity(a), epcis::event_identity(b));
  EXPECT_EQ(epcis::event_identity(a), epcis::event_identity(epcis::parse_envelope(epcis::serialize_envelope(a))));
}

TEST(Trigger, ReceivingIsTheDefaultTrigger) {
  epcis::EpcisEvent e;
  e.biz_step = "urn:epcglobal:cbv:bizstep:receiving";
  EXPECT_TRUE(epcis::classify_trigger(e).auto_verify);
  e.biz_step = "shipping";
  EXPECT_FALSE(epcis::classify_trigger(e).auto_verify);
  EXPECT_TRUE(epcis::classify_trigger(e, {{"shipping"}}).auto_verify);
}

TEST(SensorCsv, ParsesColumnsInAnyOrderAndRejectsBadRows) {
  const auto r = epcis::parse_sensor_csv(
      "timestamp,value,device_id\n"
      "2024-06-03T08:00:00Z,3.5,t1\n"
      "\n"
      "2024-06-03T08:10:00Z,abc,t1\n"
      "not-a-time,1,t1\n"
      "2024-06-03T08:20:00Z,4\n"
      "2024-06-03T08:30:00Z,4.25,t1\r\n",
      epcis::ReadingKind::Temperature);
  ASSERT_EQ(r.readings.size(), 2u);
  EXPECT_EQ(r.readings[1].value, std::vector<double>{4.25});
  EXPECT_EQ(r.readings[1].timestamp, at_min(30));
  ASSERT_EQ(r.rejects.size(), 3u);
  EXPECT_EQ(r.rejects[0].line, 4u);
  EXPECT_EQ(r.rejects[0].reason, "unparsable value");
  EXPECT_EQ(r.rejects[1].reason, "unparsable timestamp");
  EXPECT_EQ(r.rejects[2].reason, "too few columns");
}

TEST(SensorCsv, GpsRangeAndMissingColumns) {
  const auto r = epcis::parse_sensor_csv(
      "device_id,timestamp,lat,lon\ng,2024-06-03T08:00:00Z,40.1,-7.5\ng,2024-06-03T08:01:00Z,91,0\n",
      epcis::ReadingKind::Gps);
  ASSERT_EQ(r.readings.size(), 1u);
  EXPECT_EQ(r.readings[0].value, (std::vector<double>{40.1, -7.5}));
  EXPECT_EQ(r.rejects.at(0).reason, "coordinate out of range");
  EXPECT_EQ(code_of([] { epcis::parse_sensor_csv("device_id,timestamp,value\n", epcis::ReadingKind::Gps); }),
            Errc::MissingColumn);
  EXPECT_EQ(code_of([] { epcis::parse_sensor_csv("", epcis::ReadingKind::Temperature); }), Errc::MissingColumn);
  const auto again = epcis::parse_sensor_csv(epcis::write_sensor_csv(r.readings, epcis::ReadingKind::Gps),
                                             epcis::ReadingKind::Gps);
  EXPECT_EQ(again.readings, r.readings);
}

// ---------------------------------------------------------------------------

class StoreTest : public ::testing::Test {
 protected:
  ledger::WorldState ws{[] { return t0(); }};
  model::Store store{ws};

  model::ApplyResult apply(const std::string& topic, json event) {
    return store.apply_event(epcis::parse_envelope(envelope(topic, std::move(event))));
  }
};

TEST_F(StoreTest, ShippingOpensAndReceivingClosesAStep) {
  auto shipping = object_event("J", "shipping", "2024-06-03T08:00:00Z", "farm");
  shipping["itemAttributes"] = {{"productType", "cherry"}};
  const auto r1 = apply("producer", shipping);
  EXPECT_EQ(r1.journeys_created, std::vector<std::string>{"J"});
  ASSERT_EQ(r1.steps_opened.size(), 1u);

  std::vector<std::string> closed_events;
  ws.subscribe([&](const ledger::LedgerEvent& e) {
    if (e.name == model::kStepClosedEvent) closed_events.push_back(e.payload);
  });
  const auto r2 = apply("receiver", object_event("J", "receiving", "2024-06-03T09:30:00Z", "dc"));
  EXPECT_EQ(r2.steps_closed, r1.steps_opened);
  EXPECT_TRUE(r2.steps_opened.empty());
  ASSERT_EQ(closed_events.size(), 1u);
  EXPECT_EQ(json::parse(closed_events[0])["bizStep"], "receiving");

  const auto step = store.step(r1.steps_opened[0]);
  EXPECT_EQ(step.status, model::StepStatus::Closed);
  EXPECT_EQ(step.phase, "shipping");
  EXPECT_EQ(step.start->time, t0());
  EXPECT_EQ(step.end->time, at_min(90));
  EXPECT_EQ(store.journey("J").product_type, "cherry");
  EXPECT_EQ(store.resolve_step("J", at_min(45)), step.step_id);
  EXPECT_FALSE(store.resolve_step("J", at_min(-5)).has_value());
}

TEST_F(StoreTest, ReapplyingAnEnvelopeIsANoOp) {
  const auto ev = object_event("J", "shipping", "2024-06-03T08:00:00Z");
  apply("p", ev);
  const auto height = ws.height();
  EXPECT_TRUE(apply("p", ev).skipped);
  EXPECT_EQ(ws.height(), height);
  EXPECT_FALSE(apply("q", ev).skipped);  // another stakeholder's report of the same event
}

TEST_F(StoreTest, ClaimsAccumulatePerTopic) {
  auto ev = object_event("J", "shipping", "2024-06-03T08:00:00Z");
  ev["itemAttributes"] = {{"weightKg", 1000}};
  apply("producer", ev);
  ev["eventTime"] = "2024-06-03T08:05:00Z";
  ev["itemAttributes"] = {{"variety", "A"}};
  apply("producer", ev);
  ev["itemAttributes"] = {{"weightKg", 990}};
  apply("carrier", ev);
  const auto claims = store.claims("J");
  ASSERT_EQ(claims.size(), 2u);
  EXPECT_EQ(claims[0].topic, "carrier");
  EXPECT_EQ(claims[1].attributes.size(), 2u);
  EXPECT_EQ(std::get<double>(claims[1].attributes.at("weightKg")), 1000.0);
}

TEST_F(StoreTest, AggregationBuildsLineageAndDerivedParentClaim) {
  apply("packer", {{"type", "AggregationEvent"},
                   {"eventTime", "2024-06-03T08:00:00Z"},
                   {"parentID", "PALLET"},
                   {"childEPCs", {"BOX1", "BOX2"}},
                   {"action", "ADD"},
                   {"bizStep", "packing"}});
  const auto pallet = store.journey("PALLET");
  EXPECT_EQ(pallet.parents, (std::vector<std::string>{"BOX1", "BOX2"}));
  EXPECT_EQ(store.journey("BOX1").children, std::vector<std::string>{"PALLET"});
  const auto up = store.lineage("PALLET", model::Direction::Up);
  EXPECT_EQ(up.nodes, (std::vector<std::string>{"PALLET", "BOX1", "BOX2"}));
  EXPECT_TRUE(up.integrity_errors.empty());
  const auto down = store.lineage("BOX2", model::Direction::Down);
  EXPECT_EQ(down.nodes, (std::vector<std::string>{"BOX2", "PALLET"}));
  EXPECT_TRUE(store.check_link_consistency().empty());
  EXPECT_EQ(std::get<std::string>(store.claims("PALLET").at(0).attributes.at("parentId")), "BOX1,BOX2");
}

TEST_F(StoreTest, LineageCyclesAreRejected) {
  apply("t", {{"type", "TransformationEvent"},
              {"eventTime", "2024-06-03T08:00:00Z"},
              {"inputEPCs", {"A"}},
              {"outputEPCs", {"B"}}});
  EXPECT_EQ(code_of([&] {
              apply("t", {{"type", "TransformationEvent"},
                          {"eventTime", "2024-06-03T09:00:00Z"},
                          {"inputEPCs", {"B"}},
                          {"outputEPCs", {"A"}}});
            }),
            Errc::LineageCycle);
  EXPECT_EQ(code_of([&] { store.lineage("nope", model::Direction::Up); }), Errc::UnknownJourney);
}

TEST_F(StoreTest, StrictReferencesRejectUnknownJourneys) {
  model::Store strict(ws, {.strict_references = true});
  EXPECT_EQ(code_of([&] {
              strict.apply_event(epcis::parse_envelope(envelope(
                  "t", {{"type", "AggregationEvent"},
                        {"eventTime", "2024-06-03T08:00:00Z"},
                        {"parentID", "P"},
                        {"childEPCs", {"ghost"}}})));
            }),
            Errc::UnknownJourneyReference);
}

TEST_F(StoreTest, PointsAreUniqueAndKindStable) {
  const auto r = apply("p", object_event("J", "shipping", "2024-06-03T08:00:00Z"));
  const auto step = r.steps_opened.at(0);
  const epcis::RawReading temp{"d1", at_min(1), epcis::ReadingKind::Temperature, {3.0}};
  store.append_point("J", step, temp, "p");
  EXPECT_EQ(code_of([&] { store.append_point("J", step, temp, "p"); }), Errc::DuplicatePoint);
  EXPECT_EQ(code_of([&] {
              store.append_point("J", step, {"d1", at_min(2), epcis::ReadingKind::Humidity, {60}}, "p");
            }),
            Errc::DeviceKindMismatch);
  EXPECT_EQ(code_of([&] { store.append_point("J", "missing", temp, "p"); }), Errc::UnknownStep);
  EXPECT_EQ(code_of([&] {
              store.append_point("J", step, {"g", at_min(2), epcis::ReadingKind::Gps, {95, 0}}, "p");
            }),
            Errc::InvalidArgument);

  // A batch is all-or-nothing.
  std::vector<model::Point> batch{{"J", step, {"d2", at_min(1), epcis::ReadingKind::Temperature, {1}}, "p"},
                                  {"J", step, temp, "p"}};
  EXPECT_EQ(code_of([&] { store.append_points(batch); }), Errc::DuplicatePoint);
  EXPECT_EQ(store.points("J", step).size(), 1u);
  batch.pop_back();
  store.append_points(batch);
  EXPECT_EQ(store.points("J", step).size(), 2u);
}

TEST_F(StoreTest, PolicyRankingPrefersSpecificMatches) {
  auto policy = [](const std::string& id, const std::string& product, json phases) {
    return json{{"policyId", id},
                {"productType", product},
                {"mode", "SSoD"},
                {"phases", std::move(phases)},
                {"rules", json::array({{{"ruleName", "shipmentTimeout"}, {"params", {{"maxDurationMin", 10}}}}})}}
        .dump();
  };
  store.load_policy(policy("z-any", "*", json::array()));
  store.load_policy(policy("b-cherry", "cherry", json::array()));
  store.load_policy(policy("c-cherry-ship", "cherry", {"shipping"}));
  store.load_policy(policy("a-cherry-ship", "cherry", {"shipping"}));
  EXPECT_EQ(store.find_policy("cherry", "shipping")->policy_id, "a-cherry-ship");
  EXPECT_EQ(store.find_policy("cherry", "storage")->policy_id, "b-cherry");
  EXPECT_EQ(store.find_policy("apple", "shipping")->policy_id, "z-any");
  EXPECT_EQ(store.policies().size(), 4u);
}

TEST(Policy, SchemaViolationsNameTheField) {
  auto violation = [](const std::string& text) {
    try {
      model::parse_policy(std::string_view(text));
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::SchemaViolation) << e.what();
      return std::string(e.what());
    }
    return std::string("accepted");
  };
  EXPECT_NE(violation(R"({"productType":"x","mode":"SSoD","rules":[]})").find("policyId"), std::string::npos);
  EXPECT_NE(violation(R"({"policyId":"p","productType":"x","mode":"TSoD","rules":[]})").find("mode"),
            std::string::npos);
  EXPECT_NE(violation(R"({"policyId":"p","productType":"x","mode":"SSoD",
                          "rules":[{"ruleName":"threshold","params":{"tMax":"hot"}}]})")
                .find("tMax"),
            std::string::npos);
  EXPECT_NE(violation(R"({"policyId":"p","productType":"x","mode":"SSoD",
                          "rules":[{"ruleName":"geofence","params":{"polygon":[[0,0],[1,1]]}}]})"),
            "accepted");
  const auto ok = model::parse_policy(std::string_view(testing::read_fixture("cherry_policy.json")));
  EXPECT_EQ(ok.policy_id, "cherry-cold-chain");
  EXPECT_EQ(model::parse_policy(model::to_json(ok)).rules.size(), ok.rules.size());
}

}  // namespace
}  // namespace tracecheck
