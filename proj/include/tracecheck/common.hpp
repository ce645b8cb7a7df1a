#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tracecheck {

enum class Errc {
  InvalidArgument,
  Io,
  SeparatorInAttribute,
  NotFound,
  WriteConflict,
  MalformedJson,
  MissingTopic,
  UnknownEventType,
  EventShapeMismatch,
  InvalidTimestamp,
  MissingColumn,
  UnknownJourneyReference,
  UnknownJourney,
  UnknownStep,
  DuplicatePoint,
  DeviceKindMismatch,
  SchemaViolation,
  LineageCycle,
  SingularInnovation,
  NoDevices,
  InvalidPolygon,
  InvalidScenario,
  UnknownSubject,
  SinkUnavailable,
  MalformedPayload,
  NoGpsData,
};

std::string_view to_string(Errc code) noexcept;

/// Library-wide exception. Every failure path named in the public API throws
/// this with a stable code so callers can branch without string matching.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message);

  Errc code() const noexcept { return code_; }
  /// what() without the leading code name.
  const std::string& message() const noexcept { return message_; }

 private:
  Errc code_;
  std::string message_;
};

/// Verification outcome, ordered okay < warning < alert.
enum class Verdict : std::uint8_t { Okay = 0, Warning = 1, Alert = 2 };

std::string_view to_string(Verdict v) noexcept;
Verdict parse_verdict(std::string_view text);

inline Verdict worst(Verdict a, Verdict b) noexcept { return a < b ? b : a; }

using Instant = std::chrono::sys_time<std::chrono::milliseconds>;

/// Parses RFC 3339 with a mandatory offset ("Z" or "+hh:mm") and normalizes to UTC.
Instant parse_time(std::string_view text);
std::optional<Instant> try_parse_time(std::string_view text) noexcept;

/// "YYYY-MM-DDThh:mm:ssZ", with ".mmm" only when the instant has a sub-second part.
std::string format_time(Instant t);

inline double seconds_between(Instant from, Instant to) noexcept {
  return std::chrono::duration<double>(to - from).count();
}

inline double minutes_between(Instant from, Instant to) noexcept {
  return seconds_between(from, to) / 60.0;
}

Instant system_now();

std::string sha256_hex(std::string_view data);
std::string to_hex(std::string_view bytes);
std::string from_hex(std::string_view hex);
std::string base64_encode(std::string_view bytes);
std::string base64_decode(std::string_view text);

/// Netstring-style framing: "<len>:<bytes>". Used wherever a hash must be
/// computed over a sequence of fields without ambiguity.
void append_framed(std::string& out, std::string_view field);

}  // namespace tracecheck
