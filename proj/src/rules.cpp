#include "tracecheck/rules.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "json_util.hpp"

namespace tracecheck::rules {

using detail::opt_latlon;
using detail::opt_number;
using detail::opt_string;
using detail::req_number;
using detail::require_object;
using detail::schema_error;
using model::RuleResult;
using model::Violation;
using nlohmann::json;

namespace {

std::string fmt(const char* pattern, double a, double b = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, pattern, a, b);
  return buf;
}

}  // namespace

double ConsistencyParams::tolerance_for(const std::string& attribute) const {
  auto it = attribute_tolerance.find(attribute);
  return it == attribute_tolerance.end() ? tolerance : it->second;
}

ThresholdParams parse_threshold_params(const json& j, const std::string& path) {
  require_object(j, path);
  ThresholdParams p;
  p.t_max = opt_number(j, "tMax", path);
  p.t_min = opt_number(j, "tMin", path);
  if (!p.t_max && !p.t_min) schema_error(path, "threshold needs tMax and/or tMin");
  if (p.t_max && p.t_min && *p.t_min > *p.t_max) schema_error(path + "/tMin", "tMin > tMax");
  p.cumulative_limit = opt_number(j, "cumulativeLimit", path);
  if (p.cumulative_limit && *p.cumulative_limit <= 0) {
    schema_error(path + "/cumulativeLimit", "must be > 0");
  }
  if (auto mode = opt_string(j, "samplingMode", path)) {
    if (*mode == "trapezoid") {
      p.mode = SamplingMode::Trapezoid;
    } else if (*mode == "rectangle") {
      p.mode = SamplingMode::Rectangle;
    } else {
      schema_error(path + "/samplingMode", "expected \"trapezoid\" or \"rectangle\"");
    }
  }
  if (auto unit = opt_string(j, "unit", path)) p.unit = *unit;
  if (auto kind = opt_string(j, "kind", path)) {
    if (*kind == "temperature") {
      p.kind = epcis::ReadingKind::Temperature;
    } else if (*kind == "humidity") {
      p.kind = epcis::ReadingKind::Humidity;
    } else {
      schema_error(path + "/kind", "expected \"temperature\" or \"humidity\"");
    }
  }
  p.nominal_interval_min = opt_number(j, "nominalIntervalMin", path);
  if (p.nominal_interval_min && *p.nominal_interval_min < 0) {
    schema_error(path + "/nominalIntervalMin", "must be >= 0");
  }
  return p;
}

GeofenceParams parse_geofence_params(const json& j, const std::string& path) {
  require_object(j, path);
  GeofenceParams p;
  auto poly = j.find("polygon");
  if (poly == j.end() || !poly->is_array()) schema_error(path + "/polygon", "expected an array");
  for (std::size_t i = 0; i < poly->size(); ++i) {
    p.polygon.push_back(detail::latlon_value((*poly)[i], path + "/polygon/" + std::to_string(i)));
  }
  try {
    p.polygon = geo::validate_ring(p.polygon);
  } catch (const Error& e) {
    schema_error(path + "/polygon", e.what());
  }
  p.start_center = opt_latlon(j, "startCenter", path);
  p.end_center = opt_latlon(j, "endCenter", path);
  if (p.start_center) {
    p.start_radius_m = req_number(j, "startRadiusM", path);
    if (p.start_radius_m <= 0) schema_error(path + "/startRadiusM", "must be > 0");
  }
  if (p.end_center) {
    p.end_radius_m = req_number(j, "endRadiusM", path);
    if (p.end_radius_m <= 0) schema_error(path + "/endRadiusM", "must be > 0");
  }
  return p;
}

BacktrackParams parse_backtrack_params(const json& j, const std::string& path) {
  require_object(j, path);
  BacktrackParams p;
  auto dest = opt_latlon(j, "destination", path);
  if (!dest) schema_error(path + "/destination", "required [lat, lon] is missing");
  p.destination = *dest;
  if (auto e = opt_number(j, "epsilonM", path)) p.epsilon_m = *e;
  if (p.epsilon_m <= 0) schema_error(path + "/epsilonM", "must be > 0");
  if (auto n = opt_number(j, "minConsecutive", path)) {
    if (*n < 1 || std::floor(*n) != *n) schema_error(path + "/minConsecutive", "integer >= 1");
    p.min_consecutive = static_cast<std::size_t>(*n);
  }
  return p;
}

HandoverParams parse_handover_params(const json& j, const std::string& path) {
  require_object(j, path);
  HandoverParams p;
  if (auto v = opt_number(j, "minGapMin", path)) p.min_gap_min = *v;
  if (p.min_gap_min < 0) schema_error(path + "/minGapMin", "must be >= 0");
  p.max_gap_min = opt_number(j, "maxGapMin", path);
  if (p.max_gap_min && *p.max_gap_min < p.min_gap_min) {
    schema_error(path + "/maxGapMin", "must be >= minGapMin");
  }
  return p;
}

TimeoutParams parse_timeout_params(const json& j, const std::string& path) {
  require_object(j, path);
  TimeoutParams p;
  p.min_duration_min = opt_number(j, "minDurationMin", path);
  p.max_duration_min = opt_number(j, "maxDurationMin", path);
  if (!p.min_duration_min && !p.max_duration_min) {
    schema_error(path, "shipmentTimeout needs minDurationMin and/or maxDurationMin");
  }
  if (p.min_duration_min && *p.min_duration_min < 0) {
    schema_error(path + "/minDurationMin", "must be >= 0");
  }
  if (p.min_duration_min && p.max_duration_min && *p.min_duration_min > *p.max_duration_min) {
    schema_error(path + "/maxDurationMin", "must be >= minDurationMin");
  }
  return p;
}

ConsistencyParams parse_consistency_params(const json& j, const std::string& path) {
  require_object(j, path);
  ConsistencyParams p;
  if (auto t = opt_number(j, "tolerance", path)) p.tolerance = *t;
  if (p.tolerance < 0) schema_error(path + "/tolerance", "must be >= 0");
  if (auto it = j.find("attributeTolerance"); it != j.end()) {
    if (!it->is_object()) schema_error(path + "/attributeTolerance", "expected an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_number() || v.get<double>() < 0) {
        schema_error(path + "/attributeTolerance/" + k, "expected a number >= 0");
      }
      p.attribute_tolerance[k] = v.get<double>();
    }
  }
  return p;
}

void validate_rule_params(model::RuleName name, const json& j, const std::string& path) {
  switch (name) {
    case model::RuleName::Threshold: parse_threshold_params(j, path); break;
    case model::RuleName::Geofence: parse_geofence_params(j, path); break;
    case model::RuleName::Backtrack: parse_backtrack_params(j, path); break;
    case model::RuleName::HandoverTime: parse_handover_params(j, path); break;
    case model::RuleName::ShipmentTimeout: parse_timeout_params(j, path); break;
    case model::RuleName::AttributeConsistency: parse_consistency_params(j, path); break;
  }
}

// ---------------------------------------------------------------------------

CumulativeTrace cumulative_severity(std::span<const ScalarSample> s, const ThresholdParams& p) {
  CumulativeTrace t;
  const std::size_t n = s.size();
  t.excess.reserve(n);
  for (const auto& x : s) {
    double e = 0;
    if (p.t_max) e = std::max(e, x.value - *p.t_max);
    if (p.t_min) e = std::max(e, *p.t_min - x.value);
    t.excess.push_back(e);
  }
  t.running.assign(n, 0.0);
  if (n == 0) return t;

  if (p.mode == SamplingMode::Trapezoid) {
    for (std::size_t i = 0; i + 1 < n; ++i) {
      const double dt = minutes_between(s[i].time, s[i + 1].time);
      const double c = (t.excess[i] + t.excess[i + 1]) / 2.0 * dt;
      t.contributions.push_back(c);
      t.total += c;
      t.running[i + 1] = t.total;
    }
  } else {
    double first_gap = 0;
    if (p.nominal_interval_min) {
      first_gap = *p.nominal_interval_min;
    } else if (n >= 2) {
      first_gap = minutes_between(s[0].time, s[1].time);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double dt = i == 0 ? first_gap : minutes_between(s[i - 1].time, s[i].time);
      const double c = t.excess[i] * dt;
      t.contributions.push_back(c);
      t.total += c;
      t.running[i] = t.total;
    }
  }
  if (p.cumulative_limit) {
    for (std::size_t i = 0; i < n; ++i) {
      if (t.running[i] > *p.cumulative_limit) {
        t.alert_index = i;
        break;
      }
    }
  }
  return t;
}

RuleResult rule_threshold(std::span<const ScalarSample> series, const ThresholdParams& p,
                          Verdict severity) {
  RuleResult r;
  r.rule_name = "threshold";
  if (series.empty()) {
    r.notes.push_back("EmptySeries: no samples to evaluate");
    r.metrics["cumulativeSeverity"] = 0;
    return r;
  }
  double max_excess = 0;
  std::size_t exceedances = 0;
  for (std::size_t i = 0; i < series.size(); ++i) {
    const double v = series[i].value;
    Violation viol;
    if (p.t_max && v > *p.t_max) {
      viol.code = "aboveMax";
      viol.magnitude = v - *p.t_max;
      viol.detail = fmt("reading %.3g above maximum %.3g", v, *p.t_max);
    } else if (p.t_min && v < *p.t_min) {
      viol.code = "belowMin";
      viol.magnitude = *p.t_min - v;
      viol.detail = fmt("reading %.3g below minimum %.3g", v, *p.t_min);
    } else {
      continue;
    }
    ++exceedances;
    max_excess = std::max(max_excess, viol.magnitude);
    viol.level = severity;
    viol.first_index = viol.last_index = i;
    viol.first_time = viol.last_time = series[i].time;
    r.add(std::move(viol));
  }
  r.metrics["exceedances"] = static_cast<double>(exceedances);
  r.metrics["maxExcess"] = max_excess;

  const auto trace = cumulative_severity(series, p);
  r.metrics["cumulativeSeverity"] = trace.total;
  if (p.cumulative_limit && trace.alert_index) {
    const auto i = *trace.alert_index;
    Violation viol;
    viol.code = "cumulativeSeverity";
    viol.level = Verdict::Alert;
    viol.magnitude = trace.running[i];
    viol.first_index = viol.last_index = i;
    viol.first_time = viol.last_time = series[i].time;
    viol.detail = fmt("cumulative severity %.6g exceeds limit %.6g", trace.running[i],
                      *p.cumulative_limit);
    r.metrics["cumulativeAlertIndex"] = static_cast<double>(i);
    r.add(std::move(viol));
  }
  return r;
}

RuleResult rule_geofence(std::span<const GeoSample> track, const GeofenceParams& p,
                         Verdict severity) {
  RuleResult r;
  r.rule_name = "geofence";
  const auto ring = geo::validate_ring(p.polygon);
  if (track.empty()) {
    r.notes.push_back("no GPS samples");
    return r;
  }
  auto closed = ring;
  closed.push_back(ring.front());
  std::size_t outside = 0;
  for (std::size_t i = 0; i < track.size(); ++i) {
    if (geo::point_in_polygon(track[i].pos, ring)) continue;
    ++outside;
    Violation v;
    v.code = "outsideGeofence";
    v.level = severity;
    v.first_index = v.last_index = i;
    v.first_time = v.last_time = track[i].time;
    v.magnitude = geo::distance_to_polyline(track[i].pos, closed);
    v.detail = fmt("sample outside geofence at (%.6f, %.6f)", track[i].pos.lat, track[i].pos.lon);
    r.add(std::move(v));
  }
  r.metrics["samplesOutside"] = static_cast<double>(outside);

  if (p.start_center) {
    const double d = geo::haversine(track.front().pos, *p.start_center);
    r.metrics["startDistanceM"] = d;
    if (d > p.start_radius_m) {
      Violation v;
      v.code = "startOutOfRange";
      v.level = severity;
      v.magnitude = d - p.start_radius_m;
      v.first_index = v.last_index = 0;
      v.first_time = v.last_time = track.front().time;
      v.detail = fmt("first fix %.0f m from start center (radius %.0f m)", d, p.start_radius_m);
      r.add(std::move(v));
    }
  }
  if (p.end_center) {
    const double d = geo::haversine(track.back().pos, *p.end_center);
    r.metrics["endDistanceM"] = d;
    if (d > p.end_radius_m) {
      Violation v;
      v.code = "endOutOfRange";
      v.level = severity;
      v.magnitude = d - p.end_radius_m;
      v.first_index = v.last_index = track.size() - 1;
      v.first_time = v.last_time = track.back().time;
      v.detail = fmt("last fix %.0f m from end center (radius %.0f m)", d, p.end_radius_m);
      r.add(std::move(v));
    }
  }
  return r;
}

RuleResult rule_backtrack(std::span<const GeoSample> track, const BacktrackParams& p,
                          Verdict severity) {
  RuleResult r;
  r.rule_name = "backtrack";
  if (track.size() < 2) {
    r.notes.push_back("fewer than 2 samples");
    return r;
  }
  std::vector<double> excess(track.size(), 0.0);
  std::vector<bool> flagged(track.size(), false);
  double running_min = geo::haversine(track[0].pos, p.destination);
  for (std::size_t i = 1; i < track.size(); ++i) {
    const double d = geo::haversine(track[i].pos, p.destination);
    excess[i] = d - running_min;
    flagged[i] = excess[i] > p.epsilon_m;
    running_min = std::min(running_min, d);
  }
  std::size_t runs = 0, flagged_samples = 0;
  double max_excess = 0;
  for (std::size_t i = 1; i < track.size();) {
    if (!flagged[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    double run_max = 0;
    while (j < track.size() && flagged[j]) run_max = std::max(run_max, excess[j++]);
    const std::size_t len = j - i;
    if (len >= p.min_consecutive) {
      ++runs;
      flagged_samples += len;
      max_excess = std::max(max_excess, run_max);
      Violation v;
      v.code = "movingAway";
      v.level = severity;
      v.magnitude = run_max;
      v.first_index = i;
      v.last_index = j - 1;
      v.first_time = track[i].time;
      v.last_time = track[j - 1].time;
      v.detail = fmt("%.0f samples moving away from destination, up to %.0f m", double(len),
                     run_max);
      r.add(std::move(v));
    }
    i = j;
  }
  r.metrics["runs"] = static_cast<double>(runs);
  r.metrics["flaggedSamples"] = static_cast<double>(flagged_samples);
  r.metrics["maxExcessM"] = max_excess;
  return r;
}

RuleResult rule_handover(const std::optional<CustodyEvent>& depart,
                         const std::optional<CustodyEvent>& arrive, const HandoverParams& p,
                         Verdict severity) {
  RuleResult r;
  r.rule_name = "handoverTime";
  if (!depart || !arrive) {
    Violation v;
    v.code = "MissingCounterpart";
    v.level = Verdict::Warning;
    v.detail = std::string("incomplete handover: ") + (depart ? "arrival" : "departure") +
               " event missing for " + (depart ? depart->ref : arrive ? arrive->ref : "?");
    r.add(std::move(v));
    return r;
  }
  const double gap = minutes_between(depart->time, arrive->time);
  r.metrics["gapMin"] = gap;
  Violation v;
  v.first_time = depart->time;
  v.last_time = arrive->time;
  if (gap < 0) {
    v.code = "NegativeGap";
    v.level = Verdict::Alert;
    v.magnitude = -gap;
    v.detail = fmt("arrival %.1f min before departure", -gap);
  } else if (gap < p.min_gap_min) {
    v.code = "GapTooShort";
    v.level = severity;
    v.magnitude = p.min_gap_min - gap;
    v.detail = fmt("handover gap %.1f min below minimum %.1f min", gap, p.min_gap_min);
  } else if (p.max_gap_min && gap > *p.max_gap_min) {
    v.code = "GapTooLong";
    v.level = severity;
    v.magnitude = gap - *p.max_gap_min;
    v.detail = fmt("handover gap %.1f min above maximum %.1f min", gap, *p.max_gap_min);
  } else {
    return r;
  }
  r.add(std::move(v));
  return r;
}

RuleResult rule_shipment_timeout(const model::Step& step, const TimeoutParams& p,
                                 Verdict severity) {
  RuleResult r;
  r.rule_name = "shipmentTimeout";
  if (!step.start || !step.end) {
    Violation v;
    v.code = "OpenStep";
    v.level = Verdict::Warning;
    v.detail = step.start ? "step has no end event" : "step has no start event";
    r.add(std::move(v));
    return r;
  }
  const double duration = minutes_between(step.start->time, step.end->time);
  r.metrics["durationMin"] = duration;
  Violation v;
  v.first_time = step.start->time;
  v.last_time = step.end->time;
  if (p.min_duration_min && duration < *p.min_duration_min) {
    v.code = "implausiblyShort";
    v.level = severity;
    v.magnitude = *p.min_duration_min - duration;
    v.detail = fmt("implausibly short: %.1f min, expected at least %.1f min", duration,
                   *p.min_duration_min);
  } else if (p.max_duration_min && duration > *p.max_duration_min) {
    v.code = "delayed";
    v.level = severity;
    v.magnitude = duration - *p.max_duration_min;
    v.detail = fmt("delayed: %.1f min, expected at most %.1f min", duration, *p.max_duration_min);
  } else {
    return r;
  }
  r.add(std::move(v));
  return r;
}

}  // namespace tracecheck::rules
