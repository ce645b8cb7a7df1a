#pragma once

#include <span>
#include <vector>

#include "tracecheck/common.hpp"

namespace tracecheck::geo {

inline constexpr double kEarthRadiusM = 6371008.8;
inline constexpr double kPi = 3.14159265358979323846;

struct LatLon {
  double lat = 0;
  double lon = 0;

  friend bool operator==(const LatLon&, const LatLon&) = default;
};

struct GeoSample {
  Instant time{};
  LatLon pos;

  friend bool operator==(const GeoSample&, const GeoSample&) = default;
};

/// Great-circle distance in meters.
double haversine(LatLon a, LatLon b) noexcept;

/// Point at fraction f of the great-circle arc from a to b.
LatLon interpolate(LatLon a, LatLon b, double f) noexcept;

/// Even-odd ray casting in the planar (lon, lat) plane. Points on an edge or
/// vertex count as inside. The ring may or may not repeat its first vertex.
bool point_in_polygon(LatLon p, std::span<const LatLon> ring) noexcept;

/// Drops a repeated closing vertex; throws InvalidPolygon unless the ring has
/// at least 3 distinct vertices and no two non-adjacent edges intersect.
std::vector<LatLon> validate_ring(std::span<const LatLon> ring);

/// Local east/north tangent plane (equirectangular) around an origin, in meters.
class LocalFrame {
 public:
  explicit LocalFrame(LatLon origin) noexcept;

  struct Xy {
    double east = 0;
    double north = 0;
  };

  Xy to_local(LatLon p) const noexcept;
  LatLon to_geo(Xy xy) const noexcept;

 private:
  LatLon origin_;
  double cos_lat_;
};

/// Shortest distance in meters from p to the polyline (planar, local frame).
double distance_to_polyline(LatLon p, std::span<const LatLon> polyline) noexcept;

}  // namespace tracecheck::geo
