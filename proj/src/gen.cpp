#include "tracecheck/gen.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "json_util.hpp"

namespace tracecheck::gen {

using nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(Errc::InvalidScenario, what); }

using Ms = std::chrono::milliseconds;

Ms seconds_to_ms(double s) { return Ms(static_cast<std::int64_t>(std::llround(s * 1000.0))); }

// Normal deviates from mt19937_64 via Box-Muller, so sequences do not depend
// on the standard library's distribution implementation.
class Rng {
 public:
  Rng(std::uint64_t seed, std::string_view stream) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : stream) h = (h ^ c) * 1099511628211ull;
    engine_.seed(seed ^ h);
  }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double normal() {
    if (spare_) {
      double v = *spare_;
      spare_.reset();
      return v;
    }
    double u1 = uniform();
    while (u1 <= 0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2 * geo::kPi * u2);
    return r * std::cos(2 * geo::kPi * u2);
  }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

LatLon offset_m(LatLon p, double east, double north) {
  const double lat = p.lat + north / geo::kEarthRadiusM * 180.0 / geo::kPi;
  const double lon =
      p.lon + east / (geo::kEarthRadiusM * std::cos(p.lat * geo::kPi / 180.0)) * 180.0 / geo::kPi;
  return {lat, lon};
}

FaultSpec::Kind parse_kind(const std::string& s, const std::string& path) {
  if (s == "gaussianNoise") return FaultSpec::Kind::GaussianNoise;
  if (s == "outlierSpikes") return FaultSpec::Kind::OutlierSpikes;
  if (s == "detour") return FaultSpec::Kind::Detour;
  if (s == "thresholdBreach") return FaultSpec::Kind::ThresholdBreach;
  if (s == "dropout") return FaultSpec::Kind::Dropout;
  detail::schema_error(path, "unknown fault kind " + s);
}

bool targets(const FaultSpec& f, const std::string& device) {
  return f.target_device.empty() || f.target_device == device;
}

std::pair<Instant, Instant> window_of(const FaultSpec& f, Instant first, Instant last) {
  Instant start = first;
  Instant end = last;
  if (f.start_min) start = first + seconds_to_ms(*f.start_min * 60.0);
  if (f.duration_min) end = start + seconds_to_ms(*f.duration_min * 60.0);
  return {start, end};
}

// Position at arc length s along the waypoints, with exact waypoints at the
// segment boundaries.
LatLon position_at(const std::vector<LatLon>& wps, const std::vector<double>& seg, double s) {
  for (std::size_t i = 0; i < seg.size(); ++i) {
    if (s <= seg[i]) {
      if (s <= 0) return wps[i];
      if (s == seg[i]) return wps[i + 1];
      return geo::interpolate(wps[i], wps[i + 1], s / seg[i]);
    }
    s -= seg[i];
  }
  return wps.back();
}

std::vector<double> segment_lengths(const std::vector<LatLon>& wps) {
  std::vector<double> seg;
  for (std::size_t i = 1; i < wps.size(); ++i) seg.push_back(geo::haversine(wps[i - 1], wps[i]));
  return seg;
}

// Samples a polyline at constant speed every dt seconds from t0. With
// include_last the final vertex is always the last sample; without it the
// final vertex is never emitted.
std::vector<GeoSample> sample_path(const std::vector<LatLon>& wps, double speed, double dt, Instant t0,
                                   bool include_last) {
  const auto seg = segment_lengths(wps);
  double total = 0;
  for (double l : seg) total += l;
  const double duration = total / speed;
  std::vector<GeoSample> out;
  const auto n = static_cast<std::size_t>(std::floor(duration / dt + 1e-9));
  for (std::size_t k = 0; k <= n; ++k) {
    const double t = static_cast<double>(k) * dt;
    const double s = std::min(total, t * speed);
    out.push_back({t0 + seconds_to_ms(t), position_at(wps, seg, s)});
  }
  const double tail = duration - static_cast<double>(n) * dt;
  const bool on_grid = tail <= 1e-9;
  if (include_last) {
    if (on_grid) {
      out.back().pos = wps.back();
    } else {
      out.push_back({t0 + seconds_to_ms(duration), wps.back()});
    }
  } else if (on_grid && n > 0) {
    out.pop_back();
  }
  return out;
}

void apply_detour(std::vector<GeoSample>& samples, const FaultSpec& f, double speed, double dt,
                  std::vector<FaultWindow>& windows) {
  if (samples.size() < 2) return;
  double travelled = 0;
  std::size_t at = samples.size() - 1;
  for (std::size_t i = 1; i < samples.size(); ++i) {
    travelled += geo::haversine(samples[i - 1].pos, samples[i].pos);
    if (travelled >= f.insert_after_km * 1000.0) {
      at = i;
      break;
    }
  }
  const auto origin = samples[at];
  std::vector<LatLon> path{origin.pos};
  path.insert(path.end(), f.detour_waypoints.begin(), f.detour_waypoints.end());
  path.push_back(origin.pos);
  const double length = route_length_m(path);
  const double duration = length / speed;
  auto loop = sample_path(path, speed, dt, origin.time, false);
  // loop[0] is the origin sample itself
  std::vector<GeoSample> out(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(at) + 1);
  out.insert(out.end(), loop.begin() + 1, loop.end());
  const auto shift = seconds_to_ms(duration);
  for (std::size_t i = at + 1; i < samples.size(); ++i) {
    out.push_back({samples[i].time + shift, samples[i].pos});
  }
  windows.push_back({FaultSpec::Kind::Detour, origin.time, origin.time + shift});
  samples = std::move(out);
}

std::uint64_t stream_index(std::size_t fault_index) {
  return static_cast<std::uint64_t>(fault_index) * 0x9E3779B97F4A7C15ull;
}

}  // namespace

// ---------------------------------------------------------------------------

double route_length_m(const std::vector<LatLon>& waypoints) {
  double total = 0;
  for (double l : segment_lengths(waypoints)) total += l;
  return total;
}

double route_duration_sec(const Scenario& s) { return route_length_m(s.waypoints) / s.speed_mps; }

void validate_scenario(const Scenario& s) {
  if (s.waypoints.size() < 2) invalid("a scenario needs at least two waypoints");
  for (std::size_t i = 1; i < s.waypoints.size(); ++i) {
    if (geo::haversine(s.waypoints[i - 1], s.waypoints[i]) <= 0) {
      invalid("zero-length route segment between waypoints " + std::to_string(i - 1) + " and " +
              std::to_string(i));
    }
  }
  if (!(s.speed_mps > 0) || !std::isfinite(s.speed_mps)) invalid("speedMps must be > 0");
  if (!(s.sample_interval_sec > 0) || !std::isfinite(s.sample_interval_sec)) {
    invalid("sampleIntervalSec must be > 0");
  }
  for (const auto& f : s.faults) {
    if (f.sigma < 0) invalid("gaussianNoise sigma must be >= 0");
    if (f.rate < 0 || f.rate > 1) invalid("outlierSpikes rate must be in [0, 1]");
    if (f.duration_min && *f.duration_min < 0) invalid("fault durationMin must be >= 0");
    if (f.kind == FaultSpec::Kind::Detour && f.detour_waypoints.empty()) {
      invalid("detour needs at least one waypoint");
    }
  }
  for (const auto& sensor : s.sensors) {
    if (sensor.device_id.empty()) invalid("sensor without deviceId");
    if (sensor.interval_sec && !(*sensor.interval_sec > 0)) invalid("sensor intervalSec must be > 0");
  }
}

Scenario parse_scenario(const json& j) {
  detail::require_object(j, "");
  Scenario s;
  s.name = j.value("name", "");
  if (auto t = detail::opt_string(j, "start", "")) {
    auto parsed = try_parse_time(*t);
    if (!parsed) detail::schema_error("/start", "expected an RFC 3339 timestamp");
    s.start = *parsed;
  } else {
    s.start = parse_time("2024-01-01T00:00:00Z");
  }
  const auto wps = j.find("waypoints");
  if (wps == j.end() || !wps->is_array()) detail::schema_error("/waypoints", "expected an array");
  for (std::size_t i = 0; i < wps->size(); ++i) {
    s.waypoints.push_back(detail::latlon_value((*wps)[i], "/waypoints/" + std::to_string(i)));
  }
  if (auto v = detail::opt_number(j, "speedMps", "")) s.speed_mps = *v;
  if (auto v = detail::opt_number(j, "sampleIntervalSec", "")) s.sample_interval_sec = *v;

  for (std::size_t i = 0; i < j.value("faults", json::array()).size(); ++i) {
    const auto& fj = j["faults"][i];
    const auto path = "/faults/" + std::to_string(i);
    detail::require_object(fj, path);
    FaultSpec f;
    f.kind = parse_kind(detail::req_string(fj, "kind", path), path + "/kind");
    f.target_device = detail::opt_string(fj, "targetDevice", path).value_or("");
    f.sigma = detail::opt_number(fj, "sigma", path).value_or(0);
    f.rate = detail::opt_number(fj, "rate", path).value_or(0);
    f.magnitude = detail::opt_number(fj, "magnitude", path).value_or(0);
    f.insert_after_km = detail::opt_number(fj, "insertAfterKm", path).value_or(0);
    f.start_min = detail::opt_number(fj, "startMin", path);
    f.duration_min = detail::opt_number(fj, "durationMin", path);
    f.level = detail::opt_number(fj, "level", path).value_or(0);
    if (auto it = fj.find("waypoints"); it != fj.end()) {
      if (!it->is_array()) detail::schema_error(path + "/waypoints", "expected an array");
      for (std::size_t k = 0; k < it->size(); ++k) {
        f.detour_waypoints.push_back(
            detail::latlon_value((*it)[k], path + "/waypoints/" + std::to_string(k)));
      }
    }
    s.faults.push_back(std::move(f));
  }

  for (std::size_t i = 0; i < j.value("sensors", json::array()).size(); ++i) {
    const auto& sj = j["sensors"][i];
    const auto path = "/sensors/" + std::to_string(i);
    detail::require_object(sj, path);
    SensorSpec sensor;
    sensor.device_id = detail::req_string(sj, "deviceId", path);
    try {
      sensor.kind = epcis::parse_reading_kind(detail::req_string(sj, "kind", path));
    } catch (const Error&) {
      detail::schema_error(path + "/kind", "expected gps, temperature or humidity");
    }
    sensor.topic = detail::opt_string(sj, "topic", path).value_or("");
    sensor.baseline = detail::opt_number(sj, "baseline", path).value_or(0);
    sensor.interval_sec = detail::opt_number(sj, "intervalSec", path);
    if (auto it = sj.find("values"); it != sj.end()) {
      if (!it->is_array()) detail::schema_error(path + "/values", "expected an array of numbers");
      for (const auto& v : *it) {
        if (!v.is_number()) detail::schema_error(path + "/values", "expected an array of numbers");
        sensor.values.push_back(v.get<double>());
      }
    }
    s.sensors.push_back(std::move(sensor));
  }

  for (std::size_t i = 0; i < j.value("eventsPlan", json::array()).size(); ++i) {
    const auto& ej = j["eventsPlan"][i];
    const auto path = "/eventsPlan/" + std::to_string(i);
    detail::require_object(ej, path);
    PlannedEvent e;
    e.offset_min = detail::opt_number(ej, "offsetMin", path);
    e.topic = detail::req_string(ej, "topic", path);
    e.event = ej;
    e.event.erase("offsetMin");
    e.event.erase("topic");
    s.events_plan.push_back(std::move(e));
  }
  validate_scenario(s);
  return s;
}

std::vector<GeoSample> gen_route(const Scenario& s, std::uint64_t /*seed*/) {
  validate_scenario(s);
  return sample_path(s.waypoints, s.speed_mps, s.sample_interval_sec, s.start, true);
}

CorruptedTrack inject_faults(const std::vector<GeoSample>& track, const std::vector<FaultSpec>& faults,
                             std::uint64_t seed, const std::string& device) {
  CorruptedTrack out{track, track, {}};
  if (track.empty()) return out;

  // Detours change the timeline, so they go first and later windows are
  // measured on the shifted track.
  for (const auto& f : faults) {
    if (f.kind != FaultSpec::Kind::Detour || !targets(f, device)) continue;
    double speed = 10, dt = 10;
    if (track.size() >= 2) {
      dt = seconds_between(track[0].time, track[1].time);
      speed = geo::haversine(track[0].pos, track[1].pos) / dt;
    }
    if (!(speed > 0)) speed = 10;
    apply_detour(out.samples, f, speed, dt, out.windows);
  }

  for (std::size_t fi = 0; fi < faults.size(); ++fi) {
    const auto& f = faults[fi];
    if (!targets(f, device) || f.kind == FaultSpec::Kind::Detour ||
        f.kind == FaultSpec::Kind::ThresholdBreach) {
      continue;
    }
    if (out.samples.empty()) break;
    const auto [start, end] = window_of(f, out.samples.front().time, out.samples.back().time);
    Rng rng(seed + stream_index(fi), device);
    std::vector<GeoSample> next;
    for (auto sample : out.samples) {
      const bool inside = sample.time >= start && sample.time <= end;
      if (inside) {
        switch (f.kind) {
          case FaultSpec::Kind::GaussianNoise:
            if (f.sigma > 0) {
              const double e = rng.normal() * f.sigma;
              const double n = rng.normal() * f.sigma;
              sample.pos = offset_m(sample.pos, e, n);
            }
            break;
          case FaultSpec::Kind::OutlierSpikes:
            if (rng.uniform() < f.rate) {
              const double bearing = rng.uniform() * 2 * geo::kPi;
              sample.pos = offset_m(sample.pos, f.magnitude * std::sin(bearing),
                                    f.magnitude * std::cos(bearing));
            }
            break;
          case FaultSpec::Kind::Dropout: continue;
          default: break;
        }
      }
      next.push_back(sample);
    }
    out.samples = std::move(next);
    out.windows.push_back({f.kind, start, end});
  }
  return out;
}

CorruptedSeries inject_faults(const std::vector<std::pair<Instant, double>>& series,
                              const std::vector<FaultSpec>& faults, std::uint64_t seed,
                              const std::string& device) {
  CorruptedSeries out{series, series, {}};
  for (std::size_t fi = 0; fi < faults.size(); ++fi) {
    const auto& f = faults[fi];
    if (!targets(f, device) || f.kind == FaultSpec::Kind::Detour) continue;
    if (out.samples.empty()) break;
    const auto [start, end] = window_of(f, out.samples.front().first, out.samples.back().first);
    Rng rng(seed + stream_index(fi), device);
    std::vector<std::pair<Instant, double>> next;
    for (auto sample : out.samples) {
      const bool inside = sample.first >= start && sample.first <= end;
      if (inside) {
        switch (f.kind) {
          case FaultSpec::Kind::GaussianNoise:
            if (f.sigma > 0) sample.second += rng.normal() * f.sigma;
            break;
          case FaultSpec::Kind::OutlierSpikes:
            if (rng.uniform() < f.rate) sample.second += f.magnitude;
            break;
          case FaultSpec::Kind::ThresholdBreach: sample.second = f.level; break;
          case FaultSpec::Kind::Dropout: continue;
          default: break;
        }
      }
      next.push_back(sample);
    }
    out.samples = std::move(next);
    out.windows.push_back({f.kind, start, end});
  }
  return out;
}

std::vector<epcis::IngestEnvelope> gen_events(const Scenario& s, const std::string& journey_id,
                                              std::uint64_t /*seed*/) {
  if (s.events_plan.empty()) invalid("the events plan is empty");
  const double end_min = route_duration_sec(s) / 60.0;
  std::vector<epcis::IngestEnvelope> out;
  for (std::size_t i = 0; i < s.events_plan.size(); ++i) {
    const auto& p = s.events_plan[i];
    json ev = p.event;
    if (!ev.contains("type")) ev["type"] = "ObjectEvent";
    const auto type = ev["type"].is_string() ? ev["type"].get<std::string>() : std::string();
    if (type == "ObjectEvent" && !ev.contains("epcList")) ev["epcList"] = json::array({journey_id});
    if (!ev.contains("sourceParty")) ev["sourceParty"] = p.topic;
    if (!ev.contains("bizLocation")) {
      const auto& at = (p.offset_min && *p.offset_min <= 0) ? s.waypoints.front() : s.waypoints.back();
      char buf[64];
      std::snprintf(buf, sizeof buf, "geo:%.6f,%.6f", at.lat, at.lon);
      ev["bizLocation"] = buf;
    }
    const double offset = p.offset_min.value_or(end_min);
    ev["eventTime"] = format_time(s.start + seconds_to_ms(offset * 60.0));
    try {
      out.push_back(epcis::envelope_from_json(json{{"topic", p.topic}, {"event", std::move(ev)}}));
    } catch (const Error& e) {
      invalid("eventsPlan/" + std::to_string(i) + ": " + e.message());
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.event.event_time < b.event.event_time;
  });
  return out;
}

std::vector<SensorReading> gen_readings(const Scenario& s, std::uint64_t seed) {
  validate_scenario(s);
  std::vector<SensorReading> out;
  const double duration = route_duration_sec(s);
  for (const auto& sensor : s.sensors) {
    const double dt = sensor.interval_sec.value_or(s.sample_interval_sec);
    if (sensor.kind == epcis::ReadingKind::Gps) {
      const auto truth = sample_path(s.waypoints, s.speed_mps, dt, s.start, true);
      const auto corrupted = inject_faults(truth, s.faults, seed, sensor.device_id);
      for (const auto& g : corrupted.samples) {
        out.push_back({{sensor.device_id, g.time, sensor.kind, {g.pos.lat, g.pos.lon}}, sensor.topic});
      }
      continue;
    }
    std::vector<std::pair<Instant, double>> series;
    if (!sensor.values.empty()) {
      for (std::size_t k = 0; k < sensor.values.size(); ++k) {
        series.emplace_back(s.start + seconds_to_ms(static_cast<double>(k) * dt), sensor.values[k]);
      }
    } else {
      const auto n = static_cast<std::size_t>(std::floor(duration / dt + 1e-9));
      for (std::size_t k = 0; k <= n; ++k) {
        series.emplace_back(s.start + seconds_to_ms(static_cast<double>(k) * dt), sensor.baseline);
      }
    }
    const auto corrupted = inject_faults(series, s.faults, seed, sensor.device_id);
    for (const auto& [t, v] : corrupted.samples) {
      out.push_back({{sensor.device_id, t, sensor.kind, {v}}, sensor.topic});
    }
  }
  return out;
}

std::vector<LatLon> corridor_polygon(const std::vector<LatLon>& route, double half_width_m) {
  if (route.size() < 2) throw Error(Errc::InvalidPolygon, "corridor needs at least two route points");
  if (!(half_width_m > 0)) throw Error(Errc::InvalidPolygon, "corridor half-width must be > 0");
  geo::LocalFrame frame(route.front());
  std::vector<geo::LocalFrame::Xy> pts;
  for (const auto& p : route) pts.push_back(frame.to_local(p));

  struct V {
    double x, y;
  };
  std::vector<V> dirs;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    const double dx = pts[i].east - pts[i - 1].east;
    const double dy = pts[i].north - pts[i - 1].north;
    const double len = std::hypot(dx, dy);
    if (len <= 0) throw Error(Errc::InvalidPolygon, "corridor route has a zero-length segment");
    dirs.push_back({dx / len, dy / len});
  }
  const auto normal = [](V d) { return V{-d.y, d.x}; };

  std::vector<geo::LocalFrame::Xy> left, right;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    V n{};
    double scale = half_width_m;
    auto base = pts[i];
    if (i == 0) {
      n = normal(dirs.front());
      base.east -= dirs.front().x * half_width_m;
      base.north -= dirs.front().y * half_width_m;
    } else if (i + 1 == pts.size()) {
      n = normal(dirs.back());
      base.east += dirs.back().x * half_width_m;
      base.north += dirs.back().y * half_width_m;
    } else {
      const V n1 = normal(dirs[i - 1]);
      const V n2 = normal(dirs[i]);
      V m{n1.x + n2.x, n1.y + n2.y};
      const double len = std::hypot(m.x, m.y);
      if (len < 1e-9) {
        m = n1;
      } else {
        m = {m.x / len, m.y / len};
      }
      const double c = std::max(0.25, m.x * n1.x + m.y * n1.y);
      n = m;
      scale = half_width_m / c;
    }
    left.push_back({base.east + n.x * scale, base.north + n.y * scale});
    right.push_back({base.east - n.x * scale, base.north - n.y * scale});
  }
  std::vector<LatLon> ring;
  for (const auto& p : left) ring.push_back(frame.to_geo(p));
  for (auto it = right.rbegin(); it != right.rend(); ++it) ring.push_back(frame.to_geo(*it));
  return ring;
}

double max_cross_track(const std::vector<GeoSample>& track, const std::vector<LatLon>& route) {
  double worst = 0;
  for (const auto& s : track) worst = std::max(worst, geo::distance_to_polyline(s.pos, route));
  return worst;
}

}  // namespace tracecheck::gen
