#include "tracecheck/audit.hpp"

#include <fstream>
#include <iostream>
#include <thread>

#include <httplib.h>

#include "json_util.hpp"

namespace tracecheck::audit {

using nlohmann::json;

json to_json(const Notification& n) {
  json rules = json::array();
  for (const auto& r : n.rules) rules.push_back({{"ruleName", r.rule_name}, {"detail", r.detail}});
  return {{"severity", std::string(to_string(n.severity))},
          {"subject", n.subject},
          {"rules", std::move(rules)},
          {"txId", n.tx_id},
          {"emittedAt", format_time(n.emitted_at)}};
}

std::optional<Notification> to_notification(const ledger::LedgerEvent& event, Instant now) {
  if (event.name != "verification.flagged") return std::nullopt;
  try {
    const auto j = json::parse(event.payload);
    Notification n;
    n.severity = parse_verdict(j.at("outcome").get<std::string>());
    if (n.severity == Verdict::Okay) {
      throw Error(Errc::MalformedPayload, "flagged event with outcome okay");
    }
    n.subject = j.at("subject").get<std::string>();
    for (const auto& r : j.value("ruleResults", json::array())) {
      if (r.value("verdict", "okay") == "okay") continue;
      std::string detail;
      if (const auto& v = r.value("violations", json::array()); !v.empty()) {
        detail = v.front().value("detail", "");
        if (v.size() > 1) detail += " (+" + std::to_string(v.size() - 1) + " more)";
      } else if (const auto& notes = r.value("notes", json::array()); !notes.empty()) {
        detail = notes.front().get<std::string>();
      }
      n.rules.push_back({r.at("ruleName").get<std::string>(), std::move(detail)});
    }
    n.tx_id = event.tx_id;
    n.emitted_at = now;
    return n;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(Errc::MalformedPayload, std::string("flagged event payload: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

namespace {

void append_line(const std::filesystem::path& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  out << line << '\n';
  out.flush();
  if (!out) throw Error(Errc::SinkUnavailable, "cannot write " + path.string());
}

}  // namespace

FileSink::FileSink(std::filesystem::path path) : path_(std::move(path)) {}

Receipt FileSink::deliver(const Notification& n) {
  std::lock_guard guard(mutex_);
  append_line(path_, to_json(n).dump());
  return {name(), true, 1, false, {}};
}

Receipt StreamSink::deliver(const Notification& n) {
  std::lock_guard guard(mutex_);
  out_ << to_json(n).dump() << '\n';
  out_.flush();
  return {name(), true, 1, false, {}};
}

WebhookSink::WebhookSink(std::string url, int retries, std::chrono::milliseconds backoff,
                         std::filesystem::path dead_letter, Sleeper sleeper)
    : url_(std::move(url)),
      retries_(retries),
      backoff_(backoff),
      dead_letter_(std::move(dead_letter)),
      sleep_(sleeper ? std::move(sleeper)
                     : Sleeper([](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); })) {
  const auto scheme = url_.find("://");
  if (scheme == std::string::npos || url_.substr(0, scheme) != "http") {
    throw Error(Errc::InvalidArgument, "webhook url must be http://host[:port]/path: " + url_);
  }
  const auto slash = url_.find('/', scheme + 3);
  origin_ = url_.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : url_.substr(slash);
  if (retries_ < 0) throw Error(Errc::InvalidArgument, "webhook retries must be >= 0");
}

Receipt WebhookSink::deliver(const Notification& n) {
  std::lock_guard guard(mutex_);
  const auto body = to_json(n).dump();
  Receipt receipt{name(), false, 0, false, {}};
  httplib::Client client(origin_);
  client.set_connection_timeout(std::chrono::seconds(5));
  client.set_read_timeout(std::chrono::seconds(10));
  for (int attempt = 0; attempt <= retries_; ++attempt) {
    if (attempt > 0) sleep_(backoff_ * (1 << (attempt - 1)));
    ++receipt.attempts;
    auto res = client.Post(path_, body, "application/json");
    if (res && res->status >= 200 && res->status < 300) {
      receipt.ok = true;
      receipt.error.clear();
      return receipt;
    }
    receipt.error = res ? "HTTP " + std::to_string(res->status) : httplib::to_string(res.error());
  }
  append_line(dead_letter_, json{{"notification", to_json(n)},
                                 {"sink", name()},
                                 {"attempts", receipt.attempts},
                                 {"error", receipt.error},
                                 {"failedAt", format_time(system_now())}}
                                .dump());
  receipt.dead_lettered = true;
  throw Error(Errc::SinkUnavailable, name() + " failed after " + std::to_string(receipt.attempts) +
                                         " attempts: " + receipt.error);
}

SinkConfig parse_sink_config(const json& j) {
  detail::require_object(j, "");
  SinkConfig c;
  const auto type = detail::req_string(j, "type", "");
  if (type == "file") {
    c.type = SinkConfig::Type::File;
    c.path = detail::req_string(j, "path", "");
  } else if (type == "stdout") {
    c.type = SinkConfig::Type::Stdout;
  } else if (type == "webhook") {
    c.type = SinkConfig::Type::Webhook;
    c.url = detail::req_string(j, "url", "");
  } else {
    detail::schema_error("/type", "expected file, stdout or webhook");
  }
  if (auto r = detail::opt_number(j, "retries", "")) {
    if (*r < 0 || *r != std::floor(*r)) detail::schema_error("/retries", "expected an integer >= 0");
    c.retries = static_cast<int>(*r);
  }
  if (auto b = detail::opt_number(j, "backoffMs", "")) {
    if (*b < 0) detail::schema_error("/backoffMs", "must be >= 0");
    c.backoff = std::chrono::milliseconds(static_cast<std::int64_t>(*b));
  }
  if (auto d = detail::opt_string(j, "deadLetterPath", "")) c.dead_letter_path = *d;
  return c;
}

std::unique_ptr<Sink> make_sink(const SinkConfig& c, Sleeper sleeper) {
  switch (c.type) {
    case SinkConfig::Type::File: return std::make_unique<FileSink>(c.path);
    case SinkConfig::Type::Stdout: return std::make_unique<StreamSink>(std::cout);
    case SinkConfig::Type::Webhook:
      return std::make_unique<WebhookSink>(c.url, c.retries, c.backoff, c.dead_letter_path,
                                           std::move(sleeper));
  }
  return nullptr;
}

// ---------------------------------------------------------------------------

Notifier::Notifier(std::vector<std::unique_ptr<Sink>> sinks, std::function<Instant()> clock, Logger log)
    : sinks_(std::move(sinks)),
      clock_(std::move(clock)),
      log_(log ? std::move(log) : Logger([](const std::string& m) { std::cerr << m << '\n'; })) {}

void Notifier::attach(ledger::WorldState& ledger) {
  ledger.subscribe([this](const ledger::LedgerEvent& e) { handle(e); });
}

void Notifier::handle(const ledger::LedgerEvent& event) {
  std::optional<Notification> n;
  try {
    n = to_notification(event, clock_());
  } catch (const Error& e) {
    std::lock_guard guard(mutex_);
    ++stats_.flagged;
    ++stats_.malformed;
    log_("audit: ignoring malformed " + event.name + " (tx " + event.tx_id + "): " + e.what());
    return;
  }
  if (!n) return;
  std::vector<Receipt> receipts;
  std::size_t delivered = 0, dead = 0;
  for (auto& sink : sinks_) {
    try {
      receipts.push_back(sink->deliver(*n));
      ++delivered;
    } catch (const std::exception& e) {
      ++dead;
      receipts.push_back({sink->name(), false, 0, true, e.what()});
      log_(std::string("audit: ") + e.what());
    }
  }
  std::lock_guard guard(mutex_);
  ++stats_.flagged;
  stats_.delivered += delivered;
  stats_.dead_lettered += dead;
  sent_.push_back(std::move(*n));
  receipts_.insert(receipts_.end(), receipts.begin(), receipts.end());
}

Notifier::Stats Notifier::stats() const {
  std::lock_guard guard(mutex_);
  return stats_;
}

std::vector<Notification> Notifier::sent() const {
  std::lock_guard guard(mutex_);
  return sent_;
}

std::vector<Receipt> Notifier::receipts() const {
  std::lock_guard guard(mutex_);
  return receipts_;
}

}  // namespace tracecheck::audit
