#include "tracecheck/geo.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace tracecheck::geo {

namespace {

constexpr double kDeg = kPi / 180.0;

double cross(LatLon o, LatLon a, LatLon b) noexcept {
  return (a.lon - o.lon) * (b.lat - o.lat) - (a.lat - o.lat) * (b.lon - o.lon);
}

bool on_segment(LatLon p, LatLon a, LatLon b) noexcept {
  constexpr double kEps = 1e-12;
  if (std::abs(cross(a, b, p)) > kEps) return false;
  return p.lon >= std::min(a.lon, b.lon) - kEps && p.lon <= std::max(a.lon, b.lon) + kEps &&
         p.lat >= std::min(a.lat, b.lat) - kEps && p.lat <= std::max(a.lat, b.lat) + kEps;
}

bool segments_intersect(LatLon p1, LatLon p2, LatLon q1, LatLon q2) noexcept {
  const double d1 = cross(q1, q2, p1);
  const double d2 = cross(q1, q2, p2);
  const double d3 = cross(p1, p2, q1);
  const double d4 = cross(p1, p2, q2);
  if (((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0))) {
    return true;
  }
  return on_segment(p1, q1, q2) || on_segment(p2, q1, q2) || on_segment(q1, p1, p2) ||
         on_segment(q2, p1, p2);
}

}  // namespace

double haversine(LatLon a, LatLon b) noexcept {
  const double dlat = (b.lat - a.lat) * kDeg;
  const double dlon = (b.lon - a.lon) * kDeg;
  const double s = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(a.lat * kDeg) * std::cos(b.lat * kDeg) * std::sin(dlon / 2) *
                       std::sin(dlon / 2);
  return 2 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(s)));
}

LatLon interpolate(LatLon a, LatLon b, double f) noexcept {
  const double delta = haversine(a, b) / kEarthRadiusM;
  if (delta < 1e-12) return a;
  const double sa = std::sin((1 - f) * delta) / std::sin(delta);
  const double sb = std::sin(f * delta) / std::sin(delta);
  const double la = a.lat * kDeg, lb = b.lat * kDeg, oa = a.lon * kDeg, ob = b.lon * kDeg;
  const double x = sa * std::cos(la) * std::cos(oa) + sb * std::cos(lb) * std::cos(ob);
  const double y = sa * std::cos(la) * std::sin(oa) + sb * std::cos(lb) * std::sin(ob);
  const double z = sa * std::sin(la) + sb * std::sin(lb);
  return {std::atan2(z, std::sqrt(x * x + y * y)) / kDeg, std::atan2(y, x) / kDeg};
}

bool point_in_polygon(LatLon p, std::span<const LatLon> ring) noexcept {
  const std::size_t n = ring.size();
  if (n < 3) return false;
  bool inside = false;
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const LatLon a = ring[i];
    const LatLon b = ring[j];
    if (on_segment(p, a, b)) return true;
    if ((a.lat > p.lat) != (b.lat > p.lat)) {
      const double lon_at = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
      if (p.lon < lon_at) inside = !inside;
    }
  }
  return inside;
}

std::vector<LatLon> validate_ring(std::span<const LatLon> ring) {
  std::vector<LatLon> r(ring.begin(), ring.end());
  if (r.size() >= 2 && r.front() == r.back()) r.pop_back();
  if (r.size() < 3) throw Error(Errc::InvalidPolygon, "polygon needs at least 3 vertices");
  for (const auto& v : r) {
    if (!std::isfinite(v.lat) || !std::isfinite(v.lon) || std::abs(v.lat) > 90 ||
        std::abs(v.lon) > 180) {
      throw Error(Errc::InvalidPolygon, "polygon vertex out of range");
    }
  }
  const std::size_t n = r.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (r[i] == r[(i + 1) % n]) throw Error(Errc::InvalidPolygon, "repeated polygon vertex");
    for (std::size_t j = i + 1; j < n; ++j) {
      const bool adjacent = j == i + 1 || (i == 0 && j == n - 1);
      if (adjacent) continue;
      if (segments_intersect(r[i], r[(i + 1) % n], r[j], r[(j + 1) % n])) {
        throw Error(Errc::InvalidPolygon, "polygon edges " + std::to_string(i) + " and " +
                                              std::to_string(j) + " intersect");
      }
    }
  }
  return r;
}

LocalFrame::LocalFrame(LatLon origin) noexcept
    : origin_(origin), cos_lat_(std::cos(origin.lat * kDeg)) {}

LocalFrame::Xy LocalFrame::to_local(LatLon p) const noexcept {
  return {(p.lon - origin_.lon) * kDeg * kEarthRadiusM * cos_lat_,
          (p.lat - origin_.lat) * kDeg * kEarthRadiusM};
}

LatLon LocalFrame::to_geo(Xy xy) const noexcept {
  return {origin_.lat + xy.north / kEarthRadiusM / kDeg,
          origin_.lon + xy.east / (kEarthRadiusM * cos_lat_) / kDeg};
}

double distance_to_polyline(LatLon p, std::span<const LatLon> polyline) noexcept {
  if (polyline.empty()) return std::numeric_limits<double>::infinity();
  if (polyline.size() == 1) return haversine(p, polyline.front());
  const LocalFrame frame(p);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < polyline.size(); ++i) {
    const auto a = frame.to_local(polyline[i]);
    const auto b = frame.to_local(polyline[i + 1]);
    const double dx = b.east - a.east, dy = b.north - a.north;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? -(a.east * dx + a.north * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double ex = a.east + t * dx, ey = a.north + t * dy;
    best = std::min(best, std::hypot(ex, ey));
  }
  return best;
}

}  // namespace tracecheck::geo
