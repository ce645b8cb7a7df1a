#pragma once

#include <cmath>
#include <optional>
#include <string>

#include <json.hpp>

#include "tracecheck/common.hpp"
#include "tracecheck/geo.hpp"

// Schema-checking accessors shared by the policy, rule and scenario parsers.
namespace tracecheck::detail {

[[noreturn]] inline void schema_error(const std::string& path, const std::string& what) {
  throw Error(Errc::SchemaViolation, (path.empty() ? "/" : path) + ": " + what);
}

inline void require_object(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) schema_error(path, "expected an object");
}

inline std::optional<double> opt_number(const nlohmann::json& j, const char* key,
                                        const std::string& path) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_number() || !std::isfinite(it->get<double>())) {
    schema_error(path + "/" + key, "expected a finite number");
  }
  return it->get<double>();
}

inline double req_number(const nlohmann::json& j, const char* key, const std::string& path) {
  auto v = opt_number(j, key, path);
  if (!v) schema_error(path + "/" + key, "required number is missing");
  return *v;
}

inline std::optional<std::string> opt_string(const nlohmann::json& j, const char* key,
                                             const std::string& path) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) schema_error(path + "/" + key, "expected a string");
  return it->get<std::string>();
}

inline std::string req_string(const nlohmann::json& j, const char* key, const std::string& path) {
  auto v = opt_string(j, key, path);
  if (!v || v->empty()) schema_error(path + "/" + key, "required non-empty string is missing");
  return *v;
}

/// Accepts [lat, lon] or {"lat": .., "lon": ..}.
inline geo::LatLon latlon_value(const nlohmann::json& v, const std::string& path) {
  geo::LatLon p;
  if (v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number()) {
    p = {v[0].get<double>(), v[1].get<double>()};
  } else if (v.is_object() && v.contains("lat") && v.contains("lon") && v["lat"].is_number() &&
             v["lon"].is_number()) {
    p = {v["lat"].get<double>(), v["lon"].get<double>()};
  } else {
    schema_error(path, "expected [lat, lon]");
  }
  if (!std::isfinite(p.lat) || !std::isfinite(p.lon) || std::abs(p.lat) > 90 ||
      std::abs(p.lon) > 180) {
    schema_error(path, "coordinate out of range");
  }
  return p;
}

inline std::optional<geo::LatLon> opt_latlon(const nlohmann::json& j, const char* key,
                                             const std::string& path) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return latlon_value(*it, path + "/" + key);
}

}  // namespace tracecheck::detail
