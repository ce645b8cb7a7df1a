#pragma once

#include <chrono>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tracecheck/epcis.hpp"
#include "tracecheck/geo.hpp"

// Sensor stream cleaning and fusion: outlier removal, Kalman smoothing and
// Mahalanobis-weighted multi-device fusion with device reliability scores.
namespace tracecheck::preprocess {

struct FilterSplit {
  std::vector<std::size_t> kept;     // input indices, in input order
  std::vector<std::size_t> removed;  // input indices, in input order
};

/// Quantile of sorted data by linear interpolation between order statistics
/// (position p * (n - 1)).
double quantile_sorted(std::span<const double> sorted, double p);

/// Tukey fences: removes values outside [Q1 - k*IQR, Q3 + k*IQR]. With fewer
/// than 4 values everything is kept.
FilterSplit iqr_filter(std::span<const double> values, double k = 1.5);

enum class RejectReason { Outlier, Speed, ZeroDt, DuplicateTimestamp };
std::string_view to_string(RejectReason r) noexcept;

struct SpeedSplit {
  std::vector<std::size_t> kept;
  std::vector<std::pair<std::size_t, RejectReason>> removed;
};

/// Greedy forward scan over a time-ordered track: a sample is dropped when the
/// great-circle speed from the last kept sample exceeds `v_max_mps`, or when it
/// does not advance in time. The first sample is always kept.
SpeedSplit speed_filter(std::span<const geo::GeoSample> track, double v_max_mps = 42.0);

struct Sample {
  Instant time{};
  std::vector<double> value;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct RejectedSample {
  Sample sample;
  RejectReason reason;
};

struct ReadingSeries {
  std::string device_id;
  epcis::ReadingKind kind = epcis::ReadingKind::Temperature;
  std::vector<Sample> samples;  // strictly increasing in time
  std::vector<RejectedSample> rejected;
};

/// Sorts by time; repeated timestamps keep the first reading and reject the rest.
ReadingSeries normalize(std::string device_id, epcis::ReadingKind kind,
                        std::vector<epcis::RawReading> readings);

/// Linear-Gaussian state with the process model applied in `predict`.
///   predict: x <- F x,  P <- F P F^T + Q * dt
///   update:  K = P H^T (H P H^T + R)^-1,  x <- x + K (z - H x),  P <- (I - K H) P
/// The covariance update uses the Joseph form, which is algebraically equal
/// for the optimal gain and keeps P symmetric positive semi-definite.
struct KalmanState {
  enum class Motion { RandomWalk, ConstantVelocity };

  Motion motion = Motion::RandomWalk;
  Eigen::VectorXd x;
  Eigen::MatrixXd P;
  Eigen::MatrixXd Q;
  Eigen::MatrixXd H;
  Eigen::MatrixXd R;  // default measurement noise

  Eigen::MatrixXd transition(double dt_sec) const;
  void predict(double dt_sec);
  /// Throws SingularInnovation when H P H^T + R is not invertible.
  void update(const Eigen::VectorXd& z, const Eigen::MatrixXd& r);
  void update(const Eigen::VectorXd& z) { update(z, R); }
  Eigen::VectorXd observed() const { return H * x; }

  /// Scalar random walk: x = [value].
  static KalmanState random_walk(double x0, double p0, double q, double r);
  /// Planar constant velocity: x = [e, n, ve, vn], observing [e, n].
  static KalmanState constant_velocity(double e0, double n0, double pos_var, double vel_var,
                                       double q_pos, double q_vel, double r);
};

/// One update per sample (no predict before the first). Returns H x after each update.
std::vector<Sample> kalman_smooth(const ReadingSeries& series, KalmanState state);

// ---------------------------------------------------------------------------

struct DeviceSample {
  std::string device_id;
  Instant time{};
  std::vector<double> value;
};

struct FusionEntry {
  std::vector<double> z;
  double distance = 0;  // Mahalanobis distance to the predicted measurement
  double weight = 0;
};

struct FusionFrame {
  Instant frame_time{};  // latest reading time in the frame
  std::map<std::string, FusionEntry> per_device;
  std::vector<double> pseudo_z;  // measurement fed to the filter, set by fuse_msod
};

/// Buckets samples into consecutive windows anchored at the earliest timestamp.
/// Per device and frame the latest reading wins. Empty windows are skipped.
std::vector<FusionFrame> frame_grouping(std::span<const DeviceSample> samples,
                                        std::chrono::milliseconds window);

struct ReliabilityParams {
  double alpha = 0.05;
  double tau = 3.0;
};

/// score + alpha when distance <= tau, score - alpha otherwise, clamped to [0, 1].
double update_reliability(double score, double distance, double alpha, double tau);

/// w = reliability / (1 + D^2).
double fusion_weight(double reliability, double distance) noexcept;

enum class Weighting { Mahalanobis, Equal };

struct FusionResult {
  std::vector<Sample> fused;         // H x after each frame
  std::vector<FusionFrame> frames;   // with distances and weights filled in
  std::map<std::string, double> reliability;
};

/// Per frame: distances D_d against S_d = H P H^T + R_d, weights from
/// reliability and D_d, one Kalman update with the weighted mean of the
/// frame's measurements and noise (sum_d w_d R_d^-1)^-1. Frames holding a
/// single device get a plain update with that device's noise. Throws NoDevices.
FusionResult fuse_msod(std::span<const FusionFrame> frames, KalmanState state,
                       const std::map<std::string, Eigen::MatrixXd>& device_noise,
                       std::map<std::string, double> reliability, ReliabilityParams params = {},
                       Weighting weighting = Weighting::Mahalanobis);

// ---------------------------------------------------------------------------

/// Preprocessing configuration, read from a policy's "preprocessing" object.
struct PreprocessOptions {
  double iqr_k = 1.5;
  double v_max_mps = 42.0;
  std::chrono::milliseconds frame_window{std::chrono::minutes(10)};
  bool smooth = true;
  double gps_sigma_m = 10.0;
  double gps_q_pos = 1.0;  // m^2/s
  double gps_q_vel = 0.5;  // m^2/s^3
  double scalar_sigma = 0.5;
  double scalar_q = 1e-4;  // unit^2/s
  std::map<std::string, double> device_sigma;
  ReliabilityParams reliability;
  bool reset_reliability = false;

  double sigma_for(const std::string& device, epcis::ReadingKind kind) const;
};

/// Throws SchemaViolation naming the offending field.
PreprocessOptions parse_preprocess_options(const nlohmann::json& j, const std::string& path = "");

struct GpsTrack {
  std::string device_id;
  std::vector<geo::GeoSample> samples;
};

/// Speed filter then constant-velocity Kalman smoothing in a local metric frame.
GpsTrack smooth_gps(const std::string& device_id, std::span<const geo::GeoSample> track,
                    const PreprocessOptions& opts, SpeedSplit* split = nullptr);

/// Per-device speed filtering followed by fusion of all devices in a local
/// metric frame. Returns the fused track and the fusion diagnostics.
struct GpsFusion {
  GpsTrack track;
  FusionResult fusion;
};
GpsFusion fuse_gps(const std::map<std::string, std::vector<geo::GeoSample>>& tracks,
                   const PreprocessOptions& opts, std::map<std::string, double> reliability,
                   Weighting weighting);

struct ScalarSeries {
  std::string device_id;
  std::vector<std::pair<Instant, double>> samples;
};

ScalarSeries smooth_scalar(const std::string& device_id, epcis::ReadingKind kind,
                           std::span<const std::pair<Instant, double>> series,
                           const PreprocessOptions& opts, FilterSplit* split = nullptr);

struct ScalarFusion {
  ScalarSeries series;
  FusionResult fusion;
};
ScalarFusion fuse_scalar(epcis::ReadingKind kind,
                         const std::map<std::string, std::vector<std::pair<Instant, double>>>& series,
                         const PreprocessOptions& opts, std::map<std::string, double> reliability,
                         Weighting weighting);

}  // namespace tracecheck::preprocess
