#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tracecheck/epcis.hpp"
#include "tracecheck/geo.hpp"
#include "tracecheck/model.hpp"
#include "tracecheck/preprocess.hpp"
#include "tracecheck/rules.hpp"
#include "tracecheck/store.hpp"

// Verification orchestration: policy lookup, per-mode preprocessing, rule
// execution, cross-stakeholder claim comparison and committed verdicts.
namespace tracecheck::verify {

inline constexpr std::string_view kCompletedEvent = "verification.completed";
inline constexpr std::string_view kFlaggedEvent = "verification.flagged";

/// Maximum under okay < warning < alert; okay for an empty list.
Verdict aggregate_outcomes(std::span<const Verdict> verdicts) noexcept;

/// One report per attribute present in any claim. Numeric values are
/// discrepant when (max - min) / max(|max|, eps) exceeds the attribute's
/// tolerance; other values when not all equal. Attributes missing from some
/// topics carry a "partial coverage" note.
std::vector<model::DiscrepancyReport> compare_claims(std::span<const model::ItemData> claims,
                                                     const rules::ConsistencyParams& params = {},
                                                     double eps = 1e-12);

struct VerificationRequest {
  std::string subject;
  std::string trigger = "manual";  // "manual" | "auto"
  std::string requested_by;
};

/// Preprocessed sensor data for one data source group (a topic under DSoD,
/// everything otherwise).
struct GpsBundle {
  std::map<std::string, std::vector<geo::GeoSample>> raw;       // per device, time-ordered
  std::map<std::string, std::vector<geo::GeoSample>> smoothed;  // per device, SSoD pipeline
  std::vector<geo::GeoSample> track;                            // what the rules see
  std::string pipeline;  // "single", "fused" or "equal"
  std::map<std::string, double> reliability;
};

struct ScalarBundle {
  std::map<std::string, std::vector<std::pair<Instant, double>>> raw;
  std::vector<rules::ScalarSample> series;
  std::string pipeline;
  std::map<std::string, double> reliability;
};

struct StepEvaluation {
  model::Step step;
  std::string product_type;
  std::optional<model::Policy> policy;
  std::map<std::string, GpsBundle> gps;  // key: topic under DSoD, "" otherwise
  std::map<std::string, std::map<epcis::ReadingKind, ScalarBundle>> scalars;
  std::vector<model::RuleResult> results;
  std::vector<std::string> notes;
  std::map<std::string, double> reliability_updates;
  model::Reads reads;
};

/// Mode-specific preprocessing of one group of Points.
GpsBundle prepare_gps(const std::vector<model::Point>& points, model::Mode mode,
                      const preprocess::PreprocessOptions& opts, bool window_configured,
                      const std::map<std::string, double>& reliability);
ScalarBundle prepare_scalar(const std::vector<model::Point>& points, epcis::ReadingKind kind,
                            model::Mode mode, const preprocess::PreprocessOptions& opts,
                            bool window_configured, const std::map<std::string, double>& reliability);

/// Step-level rules over prepared data; journey-level rules are skipped.
/// Sensor rules run when data is given (null means "no data"); the shipment
/// timeout rule only when `with_timeout` is set.
std::vector<model::RuleResult> run_step_rules(const model::Policy& policy, const model::Step& step,
                                              const GpsBundle* gps,
                                              const std::map<epcis::ReadingKind, ScalarBundle>* scalars,
                                              const std::string& topic, bool with_sensor_rules,
                                              bool with_timeout);

struct ManagerOptions {
  epcis::TriggerConfig trigger;
  std::function<Instant()> clock = system_now;
  int max_retries = 8;
};

class VerificationManager {
 public:
  explicit VerificationManager(model::Store& store, ManagerOptions options = {});

  /// Evaluates without committing anything.
  StepEvaluation evaluate_step(const std::string& step_id) const;

  model::GuardsVerification verify_step(const VerificationRequest& request);
  model::GuardsVerification verify_journey(const VerificationRequest& request);
  /// Verifies a step or journey again; throws UnknownSubject if it was never verified.
  model::GuardsVerification reverify(const std::string& subject, const std::string& requested_by = "");

  /// Subscribes to step-closing ledger events and verifies the closed step
  /// when the closing bizStep is in the trigger set.
  void enable_auto_trigger();
  std::vector<std::string> auto_trigger_errors() const;

 private:
  std::shared_ptr<std::mutex> subject_lock(const std::string& subject);
  model::GuardsVerification commit(model::GuardsVerification v, const model::Reads& reads,
                                   const std::map<std::string, double>& reliability);

  model::Store& store_;
  ManagerOptions options_;
  std::mutex locks_mutex_;
  std::map<std::string, std::shared_ptr<std::mutex>> locks_;
  mutable std::mutex errors_mutex_;
  std::vector<std::string> auto_errors_;
};

}  // namespace tracecheck::verify
