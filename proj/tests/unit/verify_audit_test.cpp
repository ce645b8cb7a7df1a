#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "support.hpp"
#include "tracecheck/audit.hpp"
#include "tracecheck/cli.hpp"
#include "tracecheck/verify.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's headers.
#include <httplib.h>

namespace tracecheck {
namespace {

using nlohmann::json;
using testing::at_min;
using testing::fixture_path;
using testing::t0;

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "tracecheck-verify-test";
  std::filesystem::create_directories(dir);
  auto p = dir / name;
  std::filesystem::remove(p);
  return p;
}

std::vector<std::string> lines_of(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

class ColdChain : public ::testing::Test {
 protected:
  void SetUp() override {
    store.load_policy(testing::read_fixture("cherry_policy.json"));
    cli::ingest_files(store, {fixture_path("cold_chain_events.jsonl"), fixture_path("cold_chain_temperature.csv")});
    step_id = store.steps(kJourney).at(0).step_id;
  }

  static constexpr const char* kJourney = "urn:epc:id:sgtin:560.cherry.lot123";
  ledger::WorldState ws{[] { return t0(); }};
  model::Store store{ws};
  std::string step_id;
};

TEST_F(ColdChain, StepVerificationRaisesCumulativeAlert) {
  verify::VerificationManager mgr(store, {.clock = [] { return at_min(120); }});
  const auto v = mgr.verify_step({step_id, "manual", "qa"});
  EXPECT_EQ(v.outcome, Verdict::Alert);
  EXPECT_EQ(v.policy_id, "cherry-cold-chain");
  const auto& threshold = v.rule_results.at(0);
  EXPECT_EQ(threshold.rule_name, "threshold");
  EXPECT_NEAR(threshold.metrics.at("cumulativeSeverity"), 35.0, 1e-9);
  EXPECT_EQ(threshold.metrics.at("cumulativeAlertIndex"), 7);
  const auto& timeout = v.rule_results.at(1);
  EXPECT_EQ(timeout.rule_name, "shipmentTimeout");
  EXPECT_EQ(timeout.verdict, Verdict::Okay);
  EXPECT_NEAR(timeout.metrics.at("durationMin"), 90, 1e-9);

  // The record is on the ledger with the txIds it was derived from.
  const auto history = store.verifications(step_id);
  ASSERT_EQ(history.size(), 1u);
  EXPECT_EQ(history[0].verification_id, v.verification_id);
  EXPECT_FALSE(history[0].tx_ids.empty());
  for (const auto& id : history[0].tx_ids) EXPECT_EQ(id.size(), 64u);
}

TEST_F(ColdChain, ReverifyAppendsAndUnknownSubjectsFail) {
  verify::VerificationManager mgr(store);
  mgr.verify_step({step_id, "manual", ""});
  const auto again = mgr.reverify(step_id, "auditor");
  EXPECT_EQ(again.outcome, Verdict::Alert);
  EXPECT_EQ(store.verification_count(step_id), 2u);
  try {
    mgr.reverify("never-verified");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownSubject);
  }
}

TEST_F(ColdChain, JourneyVerificationPicksUpStepOutcomes) {
  verify::VerificationManager mgr(store);
  mgr.verify_step({step_id, "manual", ""});
  const auto v = mgr.verify_journey({kJourney, "manual", ""});
  EXPECT_EQ(v.subject_kind, "journey");
  EXPECT_EQ(v.outcome, Verdict::Alert);
  EXPECT_EQ(v.rule_results.back().rule_name, "stepOutcomes");
}

TEST_F(ColdChain, AutoTriggerVerifiesClosedSteps) {
  ledger::WorldState ws2([] { return t0(); });
  model::Store s2(ws2);
  s2.load_policy(testing::read_fixture("cherry_policy.json"));
  verify::VerificationManager mgr(s2);
  mgr.enable_auto_trigger();
  cli::ingest_files(s2, {fixture_path("cold_chain_events.jsonl")});
  const auto sid = s2.steps(kJourney).at(0).step_id;
  const auto history = s2.verifications(sid);
  ASSERT_EQ(history.size(), 1u);
  EXPECT_EQ(history[0].trigger, "auto");
  EXPECT_TRUE(mgr.auto_trigger_errors().empty());
}

TEST(Verify, StepWithoutPolicyIsUnverifiable) {
  ledger::WorldState ws;
  model::Store store(ws);
  cli::ingest_files(store, {fixture_path("cold_chain_events.jsonl")});
  verify::VerificationManager mgr(store);
  const auto v = mgr.verify_step({store.steps("urn:epc:id:sgtin:560.cherry.lot123").at(0).step_id, "manual", ""});
  EXPECT_EQ(v.outcome, Verdict::Warning);
  EXPECT_NE(std::find(v.notes.begin(), v.notes.end(), "unverifiable"), v.notes.end());
}

TEST(Verify, ClaimComparisonFlagsDiscrepantAttributes) {
  ledger::WorldState ws;
  model::Store store(ws);
  store.load_policy(testing::read_fixture("claims_policy.json"));
  cli::ingest_files(store, {fixture_path("claims_events.jsonl")});
  verify::VerificationManager mgr(store);
  const auto v = mgr.verify_journey({"urn:epc:id:sgtin:560.cherry.box7", "manual", ""});
  EXPECT_EQ(v.outcome, Verdict::Alert);
  std::map<std::string, const model::DiscrepancyReport*> by_attr;
  for (const auto& d : v.discrepancies) by_attr[d.attribute] = &d;
  EXPECT_TRUE(by_attr.at("parentId")->discrepant);
  EXPECT_TRUE(by_attr.at("weightKg")->discrepant);
  EXPECT_FALSE(by_attr.at("variety")->discrepant);
  EXPECT_FALSE(by_attr.at("colorGrade")->discrepant);
  EXPECT_FALSE(by_attr.at("productType")->discrepant);
  EXPECT_EQ(by_attr.at("productType")->notes.at(0).rfind("partial coverage", 0), 0u);
  EXPECT_EQ(by_attr.at("weightKg")->per_topic.size(), 3u);
}

TEST(Verify, CompareClaimsTolerance) {
  std::vector<model::ItemData> claims{{"a", "J", {{"w", 1000.0}}}, {"b", "J", {{"w", 990.0}}}};
  rules::ConsistencyParams p;
  p.tolerance = 0.02;
  EXPECT_FALSE(verify::compare_claims(claims, p).at(0).discrepant);  // spread 1%
  p.tolerance = 0.005;
  EXPECT_TRUE(verify::compare_claims(claims, p).at(0).discrepant);
  p.attribute_tolerance["w"] = 0.05;
  EXPECT_FALSE(verify::compare_claims(claims, p).at(0).discrepant);
  EXPECT_EQ(verify::compare_claims(std::vector<model::ItemData>{claims[0]}).at(0).notes.at(0), "insufficient sources");
}

// ---------------------------------------------------------------------------

json flagged_payload(const std::string& subject, const std::string& outcome) {
  return {{"subject", subject},
          {"outcome", outcome},
          {"ruleResults",
           json::array({{{"ruleName", "threshold"},
                         {"verdict", outcome},
                         {"violations", json::array({{{"detail", "hot"}}, {{"detail", "hotter"}}})}},
                        {{"ruleName", "geofence"}, {"verdict", "okay"}}})}};
}

TEST(Notification, BuiltFromFlaggedEvents) {
  const ledger::LedgerEvent e{"verification.flagged", flagged_payload("S1", "alert").dump(), "tx1"};
  const auto n = audit::to_notification(e, t0());
  ASSERT_TRUE(n.has_value());
  EXPECT_EQ(n->severity, Verdict::Alert);
  EXPECT_EQ(n->subject, "S1");
  ASSERT_EQ(n->rules.size(), 1u);
  EXPECT_EQ(n->rules[0].detail, "hot (+1 more)");
  EXPECT_EQ(audit::to_json(*n)["txId"], "tx1");
  EXPECT_FALSE(audit::to_notification({"verification.completed", "{}", ""}, t0()).has_value());
  EXPECT_THROW(audit::to_notification({"verification.flagged", "[1,", ""}, t0()), Error);
  EXPECT_THROW(audit::to_notification({"verification.flagged", flagged_payload("S", "okay").dump(), ""}, t0()),
               Error);
}

TEST(Notifier, FileSinkReceivesFlaggedVerifications) {
  const auto path = scratch("notes.jsonl");
  std::vector<std::unique_ptr<audit::Sink>> sinks;
  sinks.push_back(std::make_unique<audit::FileSink>(path));
  audit::Notifier notifier(std::move(sinks), [] { return t0(); }, [](const std::string&) {});
  ledger::WorldState ws([] { return t0(); });
  notifier.attach(ws);
  model::Store store(ws);
  store.load_policy(testing::read_fixture("cherry_policy.json"));
  cli::ingest_files(store, {fixture_path("cold_chain_events.jsonl"), fixture_path("cold_chain_temperature.csv")});
  verify::VerificationManager mgr(store);
  const auto v = mgr.verify_step({store.steps("urn:epc:id:sgtin:560.cherry.lot123").at(0).step_id, "manual", ""});
  const auto lines = lines_of(path);
  ASSERT_EQ(lines.size(), 1u);
  const auto doc = json::parse(lines[0]);
  EXPECT_EQ(doc["severity"], "alert");
  EXPECT_EQ(doc["subject"], v.subject);
  EXPECT_EQ(doc["txId"].get<std::string>().size(), 64u);
  EXPECT_EQ(notifier.stats().delivered, 1u);
}

// Minimal local HTTP endpoint answering with a fixed status.
class HookServer {
 public:
  explicit HookServer(int status) {
    server_.Post("/hook", [this, status](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      last_body = req.body;
      res.status = status;
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~HookServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/hook"; }

  std::atomic<int> hits{0};
  std::string last_body;

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

audit::Notification sample_notification() {
  return *audit::to_notification({"verification.flagged", flagged_payload("S9", "warning").dump(), "tx9"}, t0());
}

TEST(Webhook, DeliversOnSuccess) {
  HookServer server(200);
  audit::WebhookSink sink(server.url(), 2, std::chrono::milliseconds(1), scratch("dl-ok.jsonl"));
  const auto r = sink.deliver(sample_notification());
  EXPECT_TRUE(r.ok);
  EXPECT_EQ(r.attempts, 1);
  EXPECT_EQ(server.hits.load(), 1);
  EXPECT_EQ(json::parse(server.last_body)["subject"], "S9");
}

TEST(Webhook, RetriesWithBackoffThenDeadLetters) {
  HookServer server(500);
  const auto dl = scratch("dl.jsonl");
  std::vector<std::chrono::milliseconds> waits;
  audit::WebhookSink sink(server.url(), 3, std::chrono::milliseconds(100), dl,
                          [&](std::chrono::milliseconds d) { waits.push_back(d); });
  try {
    sink.deliver(sample_notification());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SinkUnavailable);
  }
  EXPECT_EQ(server.hits.load(), 4);
  EXPECT_EQ(waits, (std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(100), std::chrono::milliseconds(200),
                                                           std::chrono::milliseconds(400)}));
  const auto lines = lines_of(dl);
  ASSERT_EQ(lines.size(), 1u);
  const auto doc = json::parse(lines[0]);
  EXPECT_EQ(doc["attempts"], 4);
  EXPECT_EQ(doc["error"], "HTTP 500");
  EXPECT_EQ(doc["notification"]["subject"], "S9");
}

TEST(Webhook, UnreachableEndpointIsDeadLetteredByTheNotifier) {
  // Bind and release a port so nothing listens on it.
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  const auto dl = scratch("dl-down.jsonl");
  std::vector<std::unique_ptr<audit::Sink>> sinks;
  sinks.push_back(std::make_unique<audit::WebhookSink>("http://127.0.0.1:" + std::to_string(port) + "/x", 1,
                                                       std::chrono::milliseconds(0), dl));
  audit::Notifier notifier(std::move(sinks), [] { return t0(); }, [](const std::string&) {});
  notifier.handle({"verification.flagged", flagged_payload("S", "alert").dump(), "t"});
  EXPECT_EQ(notifier.stats().dead_lettered, 1u);
  EXPECT_EQ(notifier.stats().delivered, 0u);
  EXPECT_TRUE(notifier.receipts().at(0).dead_lettered);
  EXPECT_EQ(lines_of(dl).size(), 1u);
}

TEST(SinkConfig, ParsesAndRejects) {
  const auto c = audit::parse_sink_config({{"type", "webhook"}, {"url", "http://x/y"}, {"retries", 4}, {"backoffMs", 20}});
  EXPECT_EQ(c.type, audit::SinkConfig::Type::Webhook);
  EXPECT_EQ(c.retries, 4);
  EXPECT_EQ(c.backoff, std::chrono::milliseconds(20));
  EXPECT_THROW(audit::parse_sink_config({{"type", "pager"}}), Error);
  EXPECT_THROW(audit::parse_sink_config({{"type", "file"}}), Error);
  EXPECT_THROW(audit::parse_sink_config({{"type", "stdout"}, {"retries", 1.5}}), Error);
  EXPECT_THROW(audit::WebhookSink("https://x/y", 1, std::chrono::milliseconds(1), "dl"), Error);
}

}  // namespace
}  // namespace tracecheck
