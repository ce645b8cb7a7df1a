#include "tracecheck/common.hpp"

#include <openssl/evp.h>
#include <openssl/sha.h>

#include <array>
#include <charconv>
#include <cstdio>

namespace tracecheck {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::Io: return "Io";
    case Errc::SeparatorInAttribute: return "SeparatorInAttribute";
    case Errc::NotFound: return "NotFound";
    case Errc::WriteConflict: return "WriteConflict";
    case Errc::MalformedJson: return "MalformedJson";
    case Errc::MissingTopic: return "MissingTopic";
    case Errc::UnknownEventType: return "UnknownEventType";
    case Errc::EventShapeMismatch: return "EventShapeMismatch";
    case Errc::InvalidTimestamp: return "InvalidTimestamp";
    case Errc::MissingColumn: return "MissingColumn";
    case Errc::UnknownJourneyReference: return "UnknownJourneyReference";
    case Errc::UnknownJourney: return "UnknownJourney";
    case Errc::UnknownStep: return "UnknownStep";
    case Errc::DuplicatePoint: return "DuplicatePoint";
    case Errc::DeviceKindMismatch: return "DeviceKindMismatch";
    case Errc::SchemaViolation: return "SchemaViolation";
    case Errc::LineageCycle: return "LineageCycle";
    case Errc::SingularInnovation: return "SingularInnovation";
    case Errc::NoDevices: return "NoDevices";
    case Errc::InvalidPolygon: return "InvalidPolygon";
    case Errc::InvalidScenario: return "InvalidScenario";
    case Errc::UnknownSubject: return "UnknownSubject";
    case Errc::SinkUnavailable: return "SinkUnavailable";
    case Errc::MalformedPayload: return "MalformedPayload";
    case Errc::NoGpsData: return "NoGpsData";
  }
  return "Unknown";
}

Error::Error(Errc code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), message_(message) {}

std::string_view to_string(Verdict v) noexcept {
  switch (v) {
    case Verdict::Okay: return "okay";
    case Verdict::Warning: return "warning";
    case Verdict::Alert: return "alert";
  }
  return "okay";
}

Verdict parse_verdict(std::string_view text) {
  if (text == "okay") return Verdict::Okay;
  if (text == "warning") return Verdict::Warning;
  if (text == "alert") return Verdict::Alert;
  throw Error(Errc::InvalidArgument, "unknown verdict '" + std::string(text) + "'");
}

namespace {

bool read_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
  if (pos + len > s.size()) return false;
  for (std::size_t i = pos; i < pos + len; ++i) {
    if (s[i] < '0' || s[i] > '9') return false;
  }
  auto [ptr, ec] = std::from_chars(s.data() + pos, s.data() + pos + len, out);
  return ec == std::errc{};
}

}  // namespace

std::optional<Instant> try_parse_time(std::string_view s) noexcept {
  using namespace std::chrono;
  int y, mo, d, h, mi, sec;
  if (!read_int(s, 0, 4, y) || s.size() < 20 || s[4] != '-' || !read_int(s, 5, 2, mo) ||
      s[7] != '-' || !read_int(s, 8, 2, d) || (s[10] != 'T' && s[10] != 't' && s[10] != ' ') ||
      !read_int(s, 11, 2, h) || s[13] != ':' || !read_int(s, 14, 2, mi) || s[16] != ':' ||
      !read_int(s, 17, 2, sec)) {
    return std::nullopt;
  }
  std::size_t pos = 19;
  int millis = 0;
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    int digits = 0;
    while (pos < s.size() && s[pos] >= '0' && s[pos] <= '9') {
      if (digits < 3) millis = millis * 10 + (s[pos] - '0');
      ++digits;
      ++pos;
    }
    if (digits == 0) return std::nullopt;
    for (int i = digits; i < 3; ++i) millis *= 10;
  }
  if (pos >= s.size()) return std::nullopt;  // offset is mandatory
  int offset_min = 0;
  if (s[pos] == 'Z' || s[pos] == 'z') {
    ++pos;
  } else if (s[pos] == '+' || s[pos] == '-') {
    int oh, om;
    if (!read_int(s, pos + 1, 2, oh) || pos + 3 >= s.size() || s[pos + 3] != ':' ||
        !read_int(s, pos + 4, 2, om) || oh > 23 || om > 59) {
      return std::nullopt;
    }
    offset_min = (oh * 60 + om) * (s[pos] == '-' ? -1 : 1);
    pos += 6;
  } else {
    return std::nullopt;
  }
  if (pos != s.size()) return std::nullopt;
  if (h > 23 || mi > 59 || sec > 60) return std::nullopt;
  year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  auto tp = sys_days{ymd} + hours{h} + minutes{mi} + seconds{sec} + milliseconds{millis} -
            minutes{offset_min};
  return time_point_cast<milliseconds>(tp);
}

Instant parse_time(std::string_view text) {
  if (auto t = try_parse_time(text)) return *t;
  throw Error(Errc::InvalidTimestamp, "not an RFC 3339 timestamp with offset: '" +
                                          std::string(text) + "'");
}

std::string format_time(Instant t) {
  using namespace std::chrono;
  auto day_point = floor<days>(t);
  year_month_day ymd{day_point};
  auto rest = t - day_point;
  auto h = duration_cast<hours>(rest);
  rest -= h;
  auto mi = duration_cast<minutes>(rest);
  rest -= mi;
  auto sec = duration_cast<seconds>(rest);
  rest -= sec;
  char buf[40];
  if (rest.count() == 0) {
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02lldZ", int(ymd.year()),
                  unsigned(ymd.month()), unsigned(ymd.day()), int(h.count()), int(mi.count()),
                  static_cast<long long>(sec.count()));
  } else {
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02d:%02d:%02lld.%03lldZ", int(ymd.year()),
                  unsigned(ymd.month()), unsigned(ymd.day()), int(h.count()), int(mi.count()),
                  static_cast<long long>(sec.count()), static_cast<long long>(rest.count()));
  }
  return buf;
}

Instant system_now() {
  return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now());
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, SHA256_DIGEST_LENGTH> digest{};
  SHA256(reinterpret_cast<const unsigned char*>(data.data()), data.size(), digest.data());
  return to_hex(std::string_view(reinterpret_cast<const char*>(digest.data()), digest.size()));
}

std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 0x0f]);
  }
  return out;
}

std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw Error(Errc::InvalidArgument, "odd-length hex string");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw Error(Errc::InvalidArgument, "invalid hex digit");
  };
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    out.push_back(static_cast<char>((nibble(hex[i]) << 4) | nibble(hex[i + 1])));
  }
  return out;
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(bytes.data()),
                          static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.empty()) return {};
  if (text.size() % 4 != 0) throw Error(Errc::InvalidArgument, "invalid base64 length");
  std::string out(3 * (text.size() / 4), '\0');
  int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                          reinterpret_cast<const unsigned char*>(text.data()),
                          static_cast<int>(text.size()));
  if (n < 0) throw Error(Errc::InvalidArgument, "invalid base64 data");
  // EVP_DecodeBlock keeps the zero bytes produced by padding.
  std::size_t pad = 0;
  if (text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

void append_framed(std::string& out, std::string_view field) {
  out += std::to_string(field.size());
  out += ':';
  out += field;
}

}  // namespace tracecheck
