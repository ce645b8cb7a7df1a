#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <initializer_list>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tracecheck/common.hpp"

// Simulated permissioned ledger: a versioned key-value world state addressed
// by composite keys, an append-only transaction log and an in-process event
// bus. Commits are serialized; preparation of transactions is not.
namespace tracecheck::ledger {

inline constexpr char kKeySeparator = '\0';

/// objectType 0x00 attr1 0x00 attr2 ... (no trailing separator).
/// Throws SeparatorInAttribute if any part contains 0x00.
std::string encode_composite_key(std::string_view object_type,
                                 std::span<const std::string> attributes);
std::string encode_composite_key(std::string_view object_type,
                                 std::initializer_list<std::string> attributes);

/// Like encode_composite_key but with a trailing separator, so a range query
/// matches whole attribute values only ("S2" never matches "S20").
std::string partial_key(std::string_view object_type, std::initializer_list<std::string> attributes);

struct DecodedKey {
  std::string object_type;
  std::vector<std::string> attributes;
};
DecodedKey decode_composite_key(std::string_view key);

struct Write {
  std::string key;
  std::string value;

  friend bool operator==(const Write&, const Write&) = default;
};

struct LedgerEvent {
  std::string name;
  std::string payload;
  std::string tx_id;

  friend bool operator==(const LedgerEvent&, const LedgerEvent&) = default;
};

struct TransactionRecord {
  std::string tx_id;
  std::uint64_t height = 0;
  std::vector<Write> writes;
  std::vector<LedgerEvent> events;
  Instant timestamp{};

  friend bool operator==(const TransactionRecord&, const TransactionRecord&) = default;
};

struct Entry {
  std::string value;
  std::uint64_t version = 0;  // height of the transaction that last wrote the key

  friend bool operator==(const Entry&, const Entry&) = default;
};

/// Lowercase hex SHA-256 over the nonce and the key-sorted writes.
std::string compute_tx_id(std::string_view nonce, std::vector<Write> writes);

class WorldState;

/// A prepared, not yet committed, set of writes and events. Reads see the
/// latest committed state overlaid with this transaction's own writes.
class Transaction {
 public:
  void put(std::string key, std::string value);
  void emit(std::string name, std::string payload);

  std::optional<std::string> get(const std::string& key) const;
  bool contains(const std::string& key) const { return get(key).has_value(); }

  std::uint64_t base_height() const noexcept { return base_height_; }
  bool empty() const noexcept { return writes_.empty() && events_.empty(); }
  std::vector<Write> writes() const;
  const std::vector<LedgerEvent>& events() const noexcept { return events_; }

 private:
  friend class WorldState;
  Transaction(const WorldState* state, std::uint64_t base_height)
      : state_(state), base_height_(base_height) {}

  const WorldState* state_;
  std::uint64_t base_height_;
  std::map<std::string, std::string> writes_;
  std::vector<LedgerEvent> events_;
};

class WorldState {
 public:
  using Subscriber = std::function<void(const LedgerEvent&)>;
  using Clock = std::function<Instant()>;

  explicit WorldState(Clock clock = system_now);
  ~WorldState();
  WorldState(const WorldState&) = delete;
  WorldState& operator=(const WorldState&) = delete;

  Transaction begin() const;

  /// Commits atomically. Throws WriteConflict when a key written by `tx` was
  /// committed by another transaction after `tx` began (first committer wins).
  TransactionRecord submit(Transaction tx, std::string_view nonce);

  /// Single-shot form: prepare and commit in one call.
  TransactionRecord submit_transaction(std::vector<Write> writes,
                                       std::vector<LedgerEvent> events,
                                       std::string_view nonce);

  /// Throws NotFound.
  std::string get(std::string_view key) const;
  std::optional<Entry> find(std::string_view key) const;
  bool contains(std::string_view key) const { return find(key).has_value(); }

  /// All entries whose key starts with `prefix`, in lexicographic key order.
  std::vector<std::pair<std::string, Entry>> get_range(std::string_view prefix) const;
  std::size_t count_range(std::string_view prefix) const;
  std::optional<std::pair<std::string, Entry>> first_in_range(std::string_view prefix) const;

  std::uint64_t height() const;
  std::vector<TransactionRecord> tx_log() const;
  /// txId of the transaction committed at `height` (1-based); empty if none.
  std::string tx_id_at(std::uint64_t height) const;

  /// Subscribers receive every committed event exactly once, in commit order.
  /// Delivery is reentrant-safe: a subscriber may submit transactions.
  void subscribe(Subscriber subscriber);

  /// Appends every subsequent commit as one JSON line to `path` and fsyncs it
  /// before `submit` returns.
  void attach_journal(const std::filesystem::path& path);

  nlohmann::json snapshot() const;
  /// Replaces the whole state (entries and log) from a snapshot document.
  void restore(const nlohmann::json& snapshot);
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  void dispatch();

  Clock clock_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, Entry, std::less<>> entries_;
  std::vector<TransactionRecord> log_;

  std::mutex bus_mutex_;
  std::vector<Subscriber> subscribers_;
  std::deque<LedgerEvent> pending_;
  bool dispatching_ = false;

  int journal_fd_ = -1;
};

nlohmann::json to_json(const TransactionRecord& record);
TransactionRecord record_from_json(const nlohmann::json& j);

}  // namespace tracecheck::ledger
