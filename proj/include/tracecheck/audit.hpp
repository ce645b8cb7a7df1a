#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tracecheck/common.hpp"
#include "tracecheck/ledger.hpp"

// Auditor notifications: flagged verification events from the ledger bus are
// turned into notifications and delivered to pluggable sinks.
namespace tracecheck::audit {

struct RuleSummary {
  std::string rule_name;
  std::string detail;
};

struct Notification {
  Verdict severity = Verdict::Warning;
  std::string subject;
  std::vector<RuleSummary> rules;
  std::string tx_id;
  Instant emitted_at{};
};

/// {severity, subject, rules: [{ruleName, detail}], txId, emittedAt}
nlohmann::json to_json(const Notification& n);

/// Maps "verification.flagged" events to notifications; other events yield
/// nullopt. Throws MalformedPayload for a flagged event that cannot be read.
std::optional<Notification> to_notification(const ledger::LedgerEvent& event, Instant now);

struct Receipt {
  std::string sink;
  bool ok = false;
  int attempts = 0;
  bool dead_lettered = false;
  std::string error;
};

class Sink {
 public:
  virtual ~Sink() = default;
  /// Throws SinkUnavailable when delivery finally fails.
  virtual Receipt deliver(const Notification& n) = 0;
  virtual std::string name() const = 0;
};

/// One JSON line per notification.
class FileSink final : public Sink {
 public:
  explicit FileSink(std::filesystem::path path);
  Receipt deliver(const Notification& n) override;
  std::string name() const override { return "file:" + path_.string(); }

 private:
  std::filesystem::path path_;
  std::mutex mutex_;
};

class StreamSink final : public Sink {
 public:
  explicit StreamSink(std::ostream& out) : out_(out) {}
  Receipt deliver(const Notification& n) override;
  std::string name() const override { return "stdout"; }

 private:
  std::ostream& out_;
  std::mutex mutex_;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// HTTP POST of the notification JSON; 2xx is success. Failed attempts are
/// retried `retries` times, waiting backoff * 2^k before retry k. After the
/// last failure the notification goes to the dead-letter file.
class WebhookSink final : public Sink {
 public:
  WebhookSink(std::string url, int retries, std::chrono::milliseconds backoff,
              std::filesystem::path dead_letter, Sleeper sleeper = {});
  Receipt deliver(const Notification& n) override;
  std::string name() const override { return "webhook:" + url_; }

 private:
  std::string url_;
  std::string origin_;
  std::string path_;
  int retries_;
  std::chrono::milliseconds backoff_;
  std::filesystem::path dead_letter_;
  Sleeper sleep_;
  std::mutex mutex_;
};

struct SinkConfig {
  enum class Type { File, Stdout, Webhook };
  Type type = Type::Stdout;
  std::string path;
  std::string url;
  int retries = 2;
  std::chrono::milliseconds backoff{500};
  std::string dead_letter_path = "deadletter.jsonl";
};

/// {"type": "file"|"stdout"|"webhook", "path"?, "url"?, "retries"?,
///  "backoffMs"?, "deadLetterPath"?}. Throws SchemaViolation.
SinkConfig parse_sink_config(const nlohmann::json& j);
std::unique_ptr<Sink> make_sink(const SinkConfig& config, Sleeper sleeper = {});

/// Single consumer of the ledger event bus. Delivery happens synchronously in
/// commit order, so per-subject ordering follows commit order.
class Notifier {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit Notifier(std::vector<std::unique_ptr<Sink>> sinks,
                    std::function<Instant()> clock = system_now, Logger log = {});

  void attach(ledger::WorldState& ledger);
  void handle(const ledger::LedgerEvent& event);

  struct Stats {
    std::size_t flagged = 0;
    std::size_t delivered = 0;      // per sink delivery
    std::size_t dead_lettered = 0;  // per sink delivery
    std::size_t malformed = 0;
  };
  Stats stats() const;
  std::vector<Notification> sent() const;
  std::vector<Receipt> receipts() const;

 private:
  std::vector<std::unique_ptr<Sink>> sinks_;
  std::function<Instant()> clock_;
  Logger log_;
  mutable std::mutex mutex_;
  Stats stats_;
  std::vector<Notification> sent_;
  std::vector<Receipt> receipts_;
};

}  // namespace tracecheck::audit
