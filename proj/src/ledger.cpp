#include "tracecheck/ledger.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <sstream>

namespace tracecheck::ledger {

namespace {

void check_part(std::string_view part) {
  if (part.find(kKeySeparator) != std::string_view::npos) {
    throw Error(Errc::SeparatorInAttribute, "composite key part contains the 0x00 separator");
  }
}

template <typename Range>
std::string encode_parts(std::string_view object_type, const Range& attributes) {
  check_part(object_type);
  std::string key(object_type);
  for (const auto& a : attributes) {
    check_part(a);
    key.push_back(kKeySeparator);
    key += a;
  }
  return key;
}

}  // namespace

std::string encode_composite_key(std::string_view object_type,
                                 std::span<const std::string> attributes) {
  return encode_parts(object_type, attributes);
}

std::string encode_composite_key(std::string_view object_type,
                                 std::initializer_list<std::string> attributes) {
  return encode_parts(object_type, attributes);
}

std::string partial_key(std::string_view object_type,
                        std::initializer_list<std::string> attributes) {
  auto key = encode_parts(object_type, attributes);
  key.push_back(kKeySeparator);
  return key;
}

DecodedKey decode_composite_key(std::string_view key) {
  DecodedKey out;
  auto pos = key.find(kKeySeparator);
  out.object_type = std::string(key.substr(0, pos));
  while (pos != std::string_view::npos) {
    auto next = key.find(kKeySeparator, pos + 1);
    out.attributes.emplace_back(key.substr(pos + 1, next == std::string_view::npos
                                                         ? std::string_view::npos
                                                         : next - pos - 1));
    pos = next;
  }
  return out;
}

std::string compute_tx_id(std::string_view nonce, std::vector<Write> writes) {
  std::sort(writes.begin(), writes.end(),
            [](const Write& a, const Write& b) { return a.key < b.key; });
  std::string canonical;
  append_framed(canonical, nonce);
  for (const auto& w : writes) {
    append_framed(canonical, w.key);
    append_framed(canonical, w.value);
  }
  return sha256_hex(canonical);
}

// ---------------------------------------------------------------------------

void Transaction::put(std::string key, std::string value) {
  if (key.empty()) throw Error(Errc::InvalidArgument, "empty ledger key");
  writes_[std::move(key)] = std::move(value);
}

void Transaction::emit(std::string name, std::string payload) {
  if (name.empty()) throw Error(Errc::InvalidArgument, "ledger event name must be non-empty");
  events_.push_back(LedgerEvent{std::move(name), std::move(payload), {}});
}

std::optional<std::string> Transaction::get(const std::string& key) const {
  if (auto it = writes_.find(key); it != writes_.end()) return it->second;
  if (auto e = state_->find(key)) return std::move(e->value);
  return std::nullopt;
}

std::vector<Write> Transaction::writes() const {
  std::vector<Write> out;
  out.reserve(writes_.size());
  for (const auto& [k, v] : writes_) out.push_back(Write{k, v});
  return out;
}

// ---------------------------------------------------------------------------

WorldState::WorldState(Clock clock) : clock_(std::move(clock)) {}

WorldState::~WorldState() {
  if (journal_fd_ >= 0) ::close(journal_fd_);
}

Transaction WorldState::begin() const { return Transaction(this, height()); }

TransactionRecord WorldState::submit(Transaction tx, std::string_view nonce) {
  TransactionRecord record;
  record.writes = tx.writes();
  record.tx_id = compute_tx_id(nonce, record.writes);
  {
    std::unique_lock lock(mutex_);
    for (const auto& w : record.writes) {
      auto it = entries_.find(w.key);
      if (it != entries_.end() && it->second.version > tx.base_height()) {
        throw Error(Errc::WriteConflict, "key written by a concurrent transaction (" +
                                             log_[it->second.version - 1].tx_id + ")");
      }
    }
    record.height = log_.size() + 1;
    record.timestamp = clock_();
    for (auto& e : tx.events_) {
      e.tx_id = record.tx_id;
      record.events.push_back(std::move(e));
    }
    for (const auto& w : record.writes) {
      entries_.insert_or_assign(w.key, Entry{w.value, record.height});
    }
    log_.push_back(record);

    if (journal_fd_ >= 0) {
      std::string line = to_json(record).dump() + "\n";
      if (::write(journal_fd_, line.data(), line.size()) != static_cast<ssize_t>(line.size()) ||
          ::fsync(journal_fd_) != 0) {
        throw Error(Errc::Io, "journal append failed");
      }
    }

    std::lock_guard bus(bus_mutex_);
    for (const auto& e : record.events) pending_.push_back(e);
  }
  dispatch();
  return record;
}

TransactionRecord WorldState::submit_transaction(std::vector<Write> writes,
                                                 std::vector<LedgerEvent> events,
                                                 std::string_view nonce) {
  auto tx = begin();
  for (auto& w : writes) tx.put(std::move(w.key), std::move(w.value));
  for (auto& e : events) tx.emit(std::move(e.name), std::move(e.payload));
  return submit(std::move(tx), nonce);
}

void WorldState::dispatch() {
  std::unique_lock lock(bus_mutex_);
  if (dispatching_) return;  // the active dispatcher drains what we queued
  dispatching_ = true;
  while (!pending_.empty()) {
    LedgerEvent event = std::move(pending_.front());
    pending_.pop_front();
    auto subscribers = subscribers_;
    lock.unlock();
    for (const auto& s : subscribers) s(event);
    lock.lock();
  }
  dispatching_ = false;
}

std::string WorldState::get(std::string_view key) const {
  if (auto e = find(key)) return std::move(e->value);
  throw Error(Errc::NotFound, "no ledger entry for key '" + to_hex(key) + "' (hex)");
}

std::optional<Entry> WorldState::find(std::string_view key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::pair<std::string, Entry>> WorldState::first_in_range(
    std::string_view prefix) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.lower_bound(prefix);
  if (it == entries_.end() || !std::string_view(it->first).starts_with(prefix)) return std::nullopt;
  return *it;
}

std::vector<std::pair<std::string, Entry>> WorldState::get_range(std::string_view prefix) const {
  std::shared_lock lock(mutex_);
  std::vector<std::pair<std::string, Entry>> out;
  for (auto it = entries_.lower_bound(prefix);
       it != entries_.end() && std::string_view(it->first).starts_with(prefix); ++it) {
    out.emplace_back(it->first, it->second);
  }
  return out;
}

std::size_t WorldState::count_range(std::string_view prefix) const {
  std::shared_lock lock(mutex_);
  std::size_t n = 0;
  for (auto it = entries_.lower_bound(prefix);
       it != entries_.end() && std::string_view(it->first).starts_with(prefix); ++it) {
    ++n;
  }
  return n;
}

std::uint64_t WorldState::height() const {
  std::shared_lock lock(mutex_);
  return log_.size();
}

std::vector<TransactionRecord> WorldState::tx_log() const {
  std::shared_lock lock(mutex_);
  return log_;
}

std::string WorldState::tx_id_at(std::uint64_t height) const {
  std::shared_lock lock(mutex_);
  if (height == 0 || height > log_.size()) return {};
  return log_[height - 1].tx_id;
}

void WorldState::subscribe(Subscriber subscriber) {
  std::lock_guard lock(bus_mutex_);
  subscribers_.push_back(std::move(subscriber));
}

void WorldState::attach_journal(const std::filesystem::path& path) {
  std::unique_lock lock(mutex_);
  if (journal_fd_ >= 0) ::close(journal_fd_);
  journal_fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
  if (journal_fd_ < 0) throw Error(Errc::Io, "cannot open journal " + path.string());
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const TransactionRecord& r) {
  nlohmann::json writes = nlohmann::json::array();
  for (const auto& w : r.writes) {
    writes.push_back({{"key", to_hex(w.key)}, {"value", base64_encode(w.value)}});
  }
  nlohmann::json events = nlohmann::json::array();
  for (const auto& e : r.events) {
    events.push_back({{"name", e.name}, {"payload", base64_encode(e.payload)}, {"txId", e.tx_id}});
  }
  return {{"txId", r.tx_id},
          {"height", r.height},
          {"timestamp", format_time(r.timestamp)},
          {"writes", std::move(writes)},
          {"events", std::move(events)}};
}

TransactionRecord record_from_json(const nlohmann::json& j) {
  TransactionRecord r;
  r.tx_id = j.at("txId").get<std::string>();
  r.height = j.at("height").get<std::uint64_t>();
  r.timestamp = parse_time(j.at("timestamp").get<std::string>());
  for (const auto& w : j.at("writes")) {
    r.writes.push_back(Write{from_hex(w.at("key").get<std::string>()),
                             base64_decode(w.at("value").get<std::string>())});
  }
  for (const auto& e : j.at("events")) {
    r.events.push_back(LedgerEvent{e.at("name").get<std::string>(),
                                   base64_decode(e.at("payload").get<std::string>()),
                                   e.at("txId").get<std::string>()});
  }
  return r;
}

nlohmann::json WorldState::snapshot() const {
  std::shared_lock lock(mutex_);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [k, e] : entries_) {
    entries.push_back({{"key", to_hex(k)}, {"value", base64_encode(e.value)}, {"version", e.version}});
  }
  nlohmann::json log = nlohmann::json::array();
  for (const auto& r : log_) log.push_back(to_json(r));
  return {{"entries", std::move(entries)}, {"txLog", std::move(log)}};
}

void WorldState::restore(const nlohmann::json& snapshot) {
  std::map<std::string, Entry, std::less<>> entries;
  std::vector<TransactionRecord> log;
  try {
    for (const auto& e : snapshot.at("entries")) {
      entries.insert_or_assign(from_hex(e.at("key").get<std::string>()),
                               Entry{base64_decode(e.at("value").get<std::string>()),
                                     e.at("version").get<std::uint64_t>()});
    }
    for (const auto& r : snapshot.at("txLog")) log.push_back(record_from_json(r));
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::MalformedJson, std::string("invalid state snapshot: ") + ex.what());
  }
  std::unique_lock lock(mutex_);
  entries_ = std::move(entries);
  log_ = std::move(log);
}

void WorldState::save(const std::filesystem::path& path) const {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(Errc::Io, "cannot write " + tmp.string());
    out << snapshot().dump();
    if (!out) throw Error(Errc::Io, "cannot write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void WorldState::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(buf.str());
  } catch (const nlohmann::json::parse_error& ex) {
    throw Error(Errc::MalformedJson, path.string() + ": " + ex.what());
  }
  restore(doc);
}

}  // namespace tracecheck::ledger
