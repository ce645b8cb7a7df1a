#include "tracecheck/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json_util.hpp"

namespace tracecheck::preprocess {

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error(Errc::InvalidArgument, "quantile of an empty sample");
  const double h = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

FilterSplit iqr_filter(std::span<const double> values, double k) {
  FilterSplit out;
  if (values.size() < 4) {
    out.kept.resize(values.size());
    std::iota(out.kept.begin(), out.kept.end(), std::size_t{0});
    return out;
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double q1 = quantile_sorted(sorted, 0.25);
  const double q3 = quantile_sorted(sorted, 0.75);
  const double iqr = q3 - q1;
  const double lo = q1 - k * iqr;
  const double hi = q3 + k * iqr;
  for (std::size_t i = 0; i < values.size(); ++i) {
    (values[i] < lo || values[i] > hi ? out.removed : out.kept).push_back(i);
  }
  return out;
}

std::string_view to_string(RejectReason r) noexcept {
  switch (r) {
    case RejectReason::Outlier: return "Outlier";
    case RejectReason::Speed: return "Speed";
    case RejectReason::ZeroDt: return "ZeroDt";
    case RejectReason::DuplicateTimestamp: return "DuplicateTimestamp";
  }
  return "Outlier";
}

SpeedSplit speed_filter(std::span<const geo::GeoSample> track, double v_max_mps) {
  SpeedSplit out;
  if (track.empty()) return out;
  out.kept.push_back(0);
  for (std::size_t i = 1; i < track.size(); ++i) {
    const auto& last = track[out.kept.back()];
    const double dt = seconds_between(last.time, track[i].time);
    if (dt <= 0) {
      out.removed.emplace_back(i, RejectReason::ZeroDt);
      continue;
    }
    if (geo::haversine(last.pos, track[i].pos) / dt > v_max_mps) {
      out.removed.emplace_back(i, RejectReason::Speed);
      continue;
    }
    out.kept.push_back(i);
  }
  return out;
}

ReadingSeries normalize(std::string device_id, epcis::ReadingKind kind,
                        std::vector<epcis::RawReading> readings) {
  ReadingSeries s;
  s.device_id = std::move(device_id);
  s.kind = kind;
  std::stable_sort(readings.begin(), readings.end(),
                   [](const auto& a, const auto& b) { return a.timestamp < b.timestamp; });
  for (auto& r : readings) {
    Sample sample{r.timestamp, std::move(r.value)};
    if (!s.samples.empty() && s.samples.back().time == sample.time) {
      s.rejected.push_back({std::move(sample), RejectReason::DuplicateTimestamp});
    } else {
      s.samples.push_back(std::move(sample));
    }
  }
  return s;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd KalmanState::transition(double dt) const {
  const auto n = x.size();
  Eigen::MatrixXd F = Eigen::MatrixXd::Identity(n, n);
  if (motion == Motion::ConstantVelocity) {
    const auto half = n / 2;
    F.topRightCorner(half, half) = dt * Eigen::MatrixXd::Identity(half, half);
  }
  return F;
}

void KalmanState::predict(double dt) {
  const Eigen::MatrixXd F = transition(dt);
  x = F * x;
  P = F * P * F.transpose() + Q * dt;
  P = (P + P.transpose()) / 2.0;
}

void KalmanState::update(const Eigen::VectorXd& z, const Eigen::MatrixXd& r) {
  const Eigen::MatrixXd S = H * P * H.transpose() + r;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(S);
  if (!lu.isInvertible()) {
    throw Error(Errc::SingularInnovation, "innovation covariance H P H^T + R is singular");
  }
  const Eigen::MatrixXd K = lu.solve(H * P).transpose();  // P H^T S^-1, S symmetric
  x += K * (z - H * x);
  const auto n = x.size();
  const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(n, n) - K * H;
  P = A * P * A.transpose() + K * r * K.transpose();
  P = (P + P.transpose()) / 2.0;
}

KalmanState KalmanState::random_walk(double x0, double p0, double q, double r) {
  KalmanState s;
  s.motion = Motion::RandomWalk;
  s.x = Eigen::VectorXd::Constant(1, x0);
  s.P = Eigen::MatrixXd::Constant(1, 1, p0);
  s.Q = Eigen::MatrixXd::Constant(1, 1, q);
  s.H = Eigen::MatrixXd::Identity(1, 1);
  s.R = Eigen::MatrixXd::Constant(1, 1, r);
  return s;
}

KalmanState KalmanState::constant_velocity(double e0, double n0, double pos_var, double vel_var,
                                           double q_pos, double q_vel, double r) {
  KalmanState s;
  s.motion = Motion::ConstantVelocity;
  s.x = Eigen::Vector4d(e0, n0, 0, 0);
  s.P = Eigen::Vector4d(pos_var, pos_var, vel_var, vel_var).asDiagonal();
  s.Q = Eigen::Vector4d(q_pos, q_pos, q_vel, q_vel).asDiagonal();
  s.H = Eigen::MatrixXd::Zero(2, 4);
  s.H(0, 0) = 1;
  s.H(1, 1) = 1;
  s.R = Eigen::Matrix2d::Identity() * r;
  return s;
}

namespace {

Eigen::VectorXd to_vector(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

}  // namespace

std::vector<Sample> kalman_smooth(const ReadingSeries& series, KalmanState state) {
  std::vector<Sample> out;
  out.reserve(series.samples.size());
  for (std::size_t i = 0; i < series.samples.size(); ++i) {
    const auto& s = series.samples[i];
    if (i > 0) {
      const double dt = seconds_between(series.samples[i - 1].time, s.time);
      if (dt < 0) throw Error(Errc::InvalidArgument, "series is not time-ordered");
      if (dt > 0) state.predict(dt);
    }
    state.update(to_vector(s.value));
    out.push_back(Sample{s.time, to_std(state.observed())});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<FusionFrame> frame_grouping(std::span<const DeviceSample> samples,
                                        std::chrono::milliseconds window) {
  if (window.count() <= 0) throw Error(Errc::InvalidArgument, "frame window must be > 0");
  std::vector<FusionFrame> frames;
  if (samples.empty()) return frames;
  std::vector<const DeviceSample*> order;
  order.reserve(samples.size());
  for (const auto& s : samples) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const auto* a, const auto* b) { return a->time < b->time; });
  const Instant anchor = order.front()->time;
  std::map<std::int64_t, std::pair<FusionFrame, std::map<std::string, Instant>>> buckets;
  for (const auto* s : order) {
    const auto idx = (s->time - anchor) / window;
    auto& [frame, seen] = buckets[idx];
    auto it = seen.find(s->device_id);
    if (it != seen.end() && it->second > s->time) continue;
    seen[s->device_id] = s->time;
    frame.per_device[s->device_id] = FusionEntry{s->value, 0, 0};
    frame.frame_time = std::max(frame.frame_time, s->time);
  }
  frames.reserve(buckets.size());
  for (auto& [idx, bucket] : buckets) frames.push_back(std::move(bucket.first));
  return frames;
}

double update_reliability(double score, double distance, double alpha, double tau) {
  double next = score + (distance <= tau ? alpha : -alpha);
  next = std::clamp(next, 0.0, 1.0);
  // Absorb floating-point residue so repeated steps land exactly on the bounds.
  if (next < 1e-12) next = 0.0;
  if (next > 1.0 - 1e-12) next = 1.0;
  return next;
}

double fusion_weight(double reliability, double distance) noexcept {
  return reliability / (1.0 + distance * distance);
}

namespace {

double mahalanobis(const Eigen::VectorXd& innovation, const Eigen::MatrixXd& S) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(S);
  if (!lu.isInvertible()) {
    throw Error(Errc::SingularInnovation, "innovation covariance is singular");
  }
  return std::sqrt(std::max(0.0, innovation.dot(lu.solve(innovation))));
}

}  // namespace

FusionResult fuse_msod(std::span<const FusionFrame> frames, KalmanState state,
                       const std::map<std::string, Eigen::MatrixXd>& device_noise,
                       std::map<std::string, double> reliability, ReliabilityParams params,
                       Weighting weighting) {
  if (frames.empty()) throw Error(Errc::NoDevices, "no frames to fuse");
  FusionResult out;
  out.frames.assign(frames.begin(), frames.end());
  auto noise_for = [&](const std::string& d) -> const Eigen::MatrixXd& {
    auto it = device_noise.find(d);
    return it == device_noise.end() ? state.R : it->second;
  };
  auto score_of = [&](const std::string& d) -> double& {
    return reliability.try_emplace(d, 1.0).first->second;
  };

  for (std::size_t f = 0; f < out.frames.size(); ++f) {
    auto& frame = out.frames[f];
    if (frame.per_device.empty()) throw Error(Errc::NoDevices, "frame without devices");
    if (f > 0) {
      const double dt = seconds_between(out.frames[f - 1].frame_time, frame.frame_time);
      if (dt < 0) throw Error(Errc::InvalidArgument, "frames are not time-ordered");
      if (dt > 0) state.predict(dt);
    }
    const Eigen::VectorXd predicted = state.observed();
    const Eigen::MatrixXd hph = state.H * state.P * state.H.transpose();

    double weight_sum = 0;
    for (auto& [device, entry] : frame.per_device) {
      const Eigen::MatrixXd S = hph + noise_for(device);
      entry.distance = mahalanobis(to_vector(entry.z) - predicted, S);
      entry.weight = weighting == Weighting::Equal ? 1.0 : fusion_weight(score_of(device), entry.distance);
      weight_sum += entry.weight;
    }

    if (frame.per_device.size() == 1) {
      const auto& [device, entry] = *frame.per_device.begin();
      state.update(to_vector(entry.z), noise_for(device));
      frame.pseudo_z = entry.z;
    } else {
      if (weight_sum <= 0) {
        // Every device has reliability 0: fall back to distance-only weights.
        weight_sum = 0;
        for (auto& [device, entry] : frame.per_device) {
          entry.weight = fusion_weight(1.0, entry.distance);
          weight_sum += entry.weight;
        }
      }
      const auto dim = predicted.size();
      Eigen::VectorXd z = Eigen::VectorXd::Zero(dim);
      Eigen::MatrixXd information = Eigen::MatrixXd::Zero(dim, dim);
      for (const auto& [device, entry] : frame.per_device) {
        z += entry.weight * to_vector(entry.z);
        if (entry.weight > 0) information += entry.weight * noise_for(device).inverse();
      }
      z /= weight_sum;
      state.update(z, information.inverse());
      frame.pseudo_z = to_std(z);
    }

    for (const auto& [device, entry] : frame.per_device) {
      auto& score = score_of(device);
      score = update_reliability(score, entry.distance, params.alpha, params.tau);
    }
    out.fused.push_back(Sample{frame.frame_time, to_std(state.observed())});
  }
  out.reliability = std::move(reliability);
  return out;
}

// ---------------------------------------------------------------------------

double PreprocessOptions::sigma_for(const std::string& device, epcis::ReadingKind kind) const {
  if (auto it = device_sigma.find(device); it != device_sigma.end()) return it->second;
  return kind == epcis::ReadingKind::Gps ? gps_sigma_m : scalar_sigma;
}

PreprocessOptions parse_preprocess_options(const nlohmann::json& j, const std::string& path) {
  using detail::opt_number;
  using detail::schema_error;
  PreprocessOptions o;
  if (j.is_null()) return o;
  detail::require_object(j, path);
  auto positive = [&](const char* key, double& field) {
    if (auto v = opt_number(j, key, path)) {
      if (*v <= 0) schema_error(path + "/" + key, "must be > 0");
      field = *v;
    }
  };
  positive("iqrK", o.iqr_k);
  positive("vMaxMps", o.v_max_mps);
  positive("gpsSigmaM", o.gps_sigma_m);
  positive("scalarSigma", o.scalar_sigma);
  if (auto v = opt_number(j, "gpsQPos", path)) o.gps_q_pos = *v;
  if (auto v = opt_number(j, "gpsQVel", path)) o.gps_q_vel = *v;
  if (auto v = opt_number(j, "scalarQ", path)) o.scalar_q = *v;
  if (o.gps_q_pos < 0 || o.gps_q_vel < 0 || o.scalar_q < 0) {
    schema_error(path, "process noise must be >= 0");
  }
  if (auto v = opt_number(j, "frameWindowSec", path)) {
    if (*v <= 0) schema_error(path + "/frameWindowSec", "must be > 0");
    o.frame_window = std::chrono::milliseconds(static_cast<std::int64_t>(std::llround(*v * 1000)));
  }
  if (auto it = j.find("smooth"); it != j.end()) {
    if (!it->is_boolean()) schema_error(path + "/smooth", "expected a boolean");
    o.smooth = it->get<bool>();
  }
  if (auto it = j.find("deviceSigma"); it != j.end()) {
    if (!it->is_object()) schema_error(path + "/deviceSigma", "expected an object");
    for (const auto& [k, v] : it->items()) {
      if (!v.is_number() || v.get<double>() <= 0) {
        schema_error(path + "/deviceSigma/" + k, "expected a number > 0");
      }
      o.device_sigma[k] = v.get<double>();
    }
  }
  if (auto it = j.find("reliability"); it != j.end()) {
    const auto rpath = path + "/reliability";
    detail::require_object(*it, rpath);
    if (auto a = opt_number(*it, "alpha", rpath)) {
      if (*a <= 0 || *a >= 1) schema_error(rpath + "/alpha", "must be in (0, 1)");
      o.reliability.alpha = *a;
    }
    if (auto t = opt_number(*it, "tau", rpath)) {
      if (*t <= 0) schema_error(rpath + "/tau", "must be > 0");
      o.reliability.tau = *t;
    }
    if (auto r = it->find("reset"); r != it->end()) {
      if (!r->is_boolean()) schema_error(rpath + "/reset", "expected a boolean");
      o.reset_reliability = r->get<bool>();
    }
  }
  return o;
}

namespace {

KalmanState gps_state(double e0, double n0, const PreprocessOptions& o) {
  const double r = o.gps_sigma_m * o.gps_sigma_m;
  return KalmanState::constant_velocity(e0, n0, r, 400.0, o.gps_q_pos, o.gps_q_vel, r);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return quantile_sorted(v, 0.5);
}

}  // namespace

GpsTrack smooth_gps(const std::string& device_id, std::span<const geo::GeoSample> track,
                    const PreprocessOptions& opts, SpeedSplit* split) {
  GpsTrack out{device_id, {}};
  auto kept = speed_filter(track, opts.v_max_mps);
  if (!opts.smooth || kept.kept.empty()) {
    for (auto i : kept.kept) out.samples.push_back(track[i]);
  } else {
    const geo::LocalFrame frame(track[kept.kept.front()].pos);
    ReadingSeries series;
    series.device_id = device_id;
    series.kind = epcis::ReadingKind::Gps;
    for (auto i : kept.kept) {
      const auto xy = frame.to_local(track[i].pos);
      series.samples.push_back(Sample{track[i].time, {xy.east, xy.north}});
    }
    auto state = gps_state(series.samples.front().value[0], series.samples.front().value[1], opts);
    const double sigma = opts.sigma_for(device_id, epcis::ReadingKind::Gps);
    state.R = Eigen::Matrix2d::Identity() * sigma * sigma;
    for (const auto& s : kalman_smooth(series, std::move(state))) {
      out.samples.push_back({s.time, frame.to_geo({s.value[0], s.value[1]})});
    }
  }
  if (split) *split = std::move(kept);
  return out;
}

GpsFusion fuse_gps(const std::map<std::string, std::vector<geo::GeoSample>>& tracks,
                   const PreprocessOptions& opts, std::map<std::string, double> reliability,
                   Weighting weighting) {
  std::vector<std::pair<std::string, geo::GeoSample>> kept;
  for (const auto& [device, track] : tracks) {
    auto split = speed_filter(track, opts.v_max_mps);
    for (auto i : split.kept) kept.emplace_back(device, track[i]);
  }
  if (kept.empty()) throw Error(Errc::NoDevices, "no GPS samples to fuse");
  const auto earliest = std::min_element(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second.time < b.second.time;
  });
  const geo::LocalFrame local(earliest->second.pos);
  std::vector<DeviceSample> samples;
  samples.reserve(kept.size());
  for (const auto& [device, s] : kept) {
    const auto xy = local.to_local(s.pos);
    samples.push_back(DeviceSample{device, s.time, {xy.east, xy.north}});
  }
  const auto frames = frame_grouping(samples, opts.frame_window);

  std::vector<double> es, ns;
  for (const auto& [device, entry] : frames.front().per_device) {
    es.push_back(entry.z[0]);
    ns.push_back(entry.z[1]);
  }
  auto state = gps_state(median(es), median(ns), opts);
  std::map<std::string, Eigen::MatrixXd> noise;
  for (const auto& [device, track] : tracks) {
    const double sigma = opts.sigma_for(device, epcis::ReadingKind::Gps);
    noise[device] = Eigen::Matrix2d::Identity() * sigma * sigma;
  }
  GpsFusion out;
  out.track.device_id = "fused";
  out.fusion = fuse_msod(frames, std::move(state), noise, std::move(reliability), opts.reliability,
                         weighting);
  for (const auto& s : out.fusion.fused) {
    out.track.samples.push_back({s.time, local.to_geo({s.value[0], s.value[1]})});
  }
  return out;
}

ScalarSeries smooth_scalar(const std::string& device_id, epcis::ReadingKind kind,
                           std::span<const std::pair<Instant, double>> series,
                           const PreprocessOptions& opts, FilterSplit* split) {
  std::vector<double> values;
  values.reserve(series.size());
  for (const auto& s : series) values.push_back(s.second);
  auto filtered = iqr_filter(values, opts.iqr_k);
  ScalarSeries out{device_id, {}};
  if (!opts.smooth || filtered.kept.empty()) {
    for (auto i : filtered.kept) out.samples.push_back(series[i]);
  } else {
    ReadingSeries rs;
    rs.device_id = device_id;
    rs.kind = kind;
    for (auto i : filtered.kept) rs.samples.push_back(Sample{series[i].first, {series[i].second}});
    const double sigma = opts.sigma_for(device_id, kind);
    auto state = KalmanState::random_walk(rs.samples.front().value[0], sigma * sigma, opts.scalar_q,
                                          sigma * sigma);
    for (const auto& s : kalman_smooth(rs, std::move(state))) {
      out.samples.emplace_back(s.time, s.value[0]);
    }
  }
  if (split) *split = std::move(filtered);
  return out;
}

ScalarFusion fuse_scalar(epcis::ReadingKind kind,
                         const std::map<std::string, std::vector<std::pair<Instant, double>>>& series,
                         const PreprocessOptions& opts, std::map<std::string, double> reliability,
                         Weighting weighting) {
  std::vector<DeviceSample> samples;
  std::map<std::string, Eigen::MatrixXd> noise;
  for (const auto& [device, s] : series) {
    std::vector<double> values;
    for (const auto& p : s) values.push_back(p.second);
    for (auto i : iqr_filter(values, opts.iqr_k).kept) {
      samples.push_back(DeviceSample{device, s[i].first, {s[i].second}});
    }
    const double sigma = opts.sigma_for(device, kind);
    noise[device] = Eigen::MatrixXd::Constant(1, 1, sigma * sigma);
  }
  if (samples.empty()) throw Error(Errc::NoDevices, "no scalar samples to fuse");
  const auto frames = frame_grouping(samples, opts.frame_window);
  std::vector<double> first;
  for (const auto& [device, entry] : frames.front().per_device) first.push_back(entry.z[0]);
  const double sigma = opts.scalar_sigma;
  auto state = KalmanState::random_walk(median(first), sigma * sigma, opts.scalar_q, sigma * sigma);
  ScalarFusion out;
  out.series.device_id = "fused";
  out.fusion = fuse_msod(frames, std::move(state), noise, std::move(reliability), opts.reliability,
                         weighting);
  for (const auto& s : out.fusion.fused) out.series.samples.emplace_back(s.time, s.value[0]);
  return out;
}

}  // namespace tracecheck::preprocess
