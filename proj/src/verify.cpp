#include "tracecheck/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace tracecheck::verify {

using model::GuardsVerification;
using model::Mode;
using model::Point;
using model::RuleName;
using model::RuleResult;
using model::Violation;
using nlohmann::json;

Verdict aggregate_outcomes(std::span<const Verdict> verdicts) noexcept {
  Verdict out = Verdict::Okay;
  for (auto v : verdicts) out = worst(out, v);
  return out;
}

std::vector<model::DiscrepancyReport> compare_claims(std::span<const model::ItemData> claims,
                                                     const rules::ConsistencyParams& params,
                                                     double eps) {
  std::set<std::string> attributes;
  for (const auto& c : claims) {
    for (const auto& [k, v] : c.attributes) attributes.insert(k);
  }
  std::vector<model::DiscrepancyReport> out;
  for (const auto& attr : attributes) {
    model::DiscrepancyReport d;
    d.journey_id = claims.empty() ? std::string{} : claims.front().journey_id;
    d.attribute = attr;
    for (const auto& c : claims) {
      if (auto it = c.attributes.find(attr); it != c.attributes.end()) d.per_topic[c.topic] = it->second;
    }
    if (d.per_topic.size() < claims.size()) {
      d.notes.push_back("partial coverage: reported by " + std::to_string(d.per_topic.size()) + " of " +
                        std::to_string(claims.size()) + " topics");
      out.push_back(std::move(d));
      continue;
    }
    if (d.per_topic.size() < 2) {
      d.notes.push_back("insufficient sources");
      out.push_back(std::move(d));
      continue;
    }
    const bool numeric = std::all_of(d.per_topic.begin(), d.per_topic.end(), [](const auto& kv) {
      return std::holds_alternative<double>(kv.second);
    });
    if (numeric) {
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      for (const auto& [t, v] : d.per_topic) {
        lo = std::min(lo, std::get<double>(v));
        hi = std::max(hi, std::get<double>(v));
      }
      const double spread = (hi - lo) / std::max(std::abs(hi), eps);
      d.discrepant = spread > params.tolerance_for(attr);
    } else {
      const auto first = epcis::scalar_to_string(d.per_topic.begin()->second);
      d.discrepant = std::any_of(d.per_topic.begin(), d.per_topic.end(), [&](const auto& kv) {
        return epcis::scalar_to_string(kv.second) != first;
      });
    }
    out.push_back(std::move(d));
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::chrono::milliseconds median_gap(const std::vector<std::vector<Instant>>& series,
                                     std::chrono::milliseconds fallback) {
  std::vector<std::chrono::milliseconds::rep> gaps;
  for (const auto& s : series) {
    for (std::size_t i = 1; i < s.size(); ++i) {
      if (s[i] > s[i - 1]) gaps.push_back((s[i] - s[i - 1]).count());
    }
  }
  if (gaps.empty()) return fallback;
  std::nth_element(gaps.begin(), gaps.begin() + gaps.size() / 2, gaps.end());
  return std::chrono::milliseconds(gaps[gaps.size() / 2]);
}

preprocess::Weighting weighting_for(Mode mode) {
  // A single data source with several devices merges them without
  // reliability weighting; MSoD and DSoD use the Mahalanobis weights.
  return mode == Mode::SSoD ? preprocess::Weighting::Equal : preprocess::Weighting::Mahalanobis;
}

template <typename Raw>
std::map<std::string, double> prior_reliability(const Raw& raw, const std::map<std::string, double>& stored,
                                                const preprocess::PreprocessOptions& opts) {
  std::map<std::string, double> out;
  if (opts.reset_reliability) return out;
  for (const auto& [device, samples] : raw) {
    if (auto it = stored.find(device); it != stored.end()) out[device] = it->second;
  }
  return out;
}

}  // namespace

GpsBundle prepare_gps(const std::vector<Point>& points, Mode mode,
                      const preprocess::PreprocessOptions& opts, bool window_configured,
                      const std::map<std::string, double>& reliability) {
  GpsBundle b;
  for (const auto& p : points) {
    if (p.reading.kind != epcis::ReadingKind::Gps) continue;
    b.raw[p.reading.device_id].push_back({p.reading.timestamp, {p.reading.value[0], p.reading.value[1]}});
  }
  std::vector<std::vector<Instant>> times;
  for (auto& [device, track] : b.raw) {
    std::stable_sort(track.begin(), track.end(),
                     [](const auto& a, const auto& c) { return a.time < c.time; });
    b.smoothed[device] = preprocess::smooth_gps(device, track, opts).samples;
    auto& t = times.emplace_back();
    for (const auto& s : track) t.push_back(s.time);
  }
  if (b.raw.empty()) {
    b.pipeline = "none";
  } else if (b.raw.size() == 1) {
    b.pipeline = "single";
    b.track = b.smoothed.begin()->second;
  } else {
    auto o = opts;
    if (!window_configured) o.frame_window = median_gap(times, opts.frame_window);
    const auto w = weighting_for(mode);
    auto fused = preprocess::fuse_gps(b.raw, o, prior_reliability(b.raw, reliability, opts), w);
    b.track = std::move(fused.track.samples);
    b.pipeline = w == preprocess::Weighting::Equal ? "equal" : "fused";
    if (w == preprocess::Weighting::Mahalanobis) b.reliability = std::move(fused.fusion.reliability);
  }
  return b;
}

ScalarBundle prepare_scalar(const std::vector<Point>& points, epcis::ReadingKind kind, Mode mode,
                            const preprocess::PreprocessOptions& opts, bool window_configured,
                            const std::map<std::string, double>& reliability) {
  ScalarBundle b;
  for (const auto& p : points) {
    if (p.reading.kind != kind) continue;
    b.raw[p.reading.device_id].emplace_back(p.reading.timestamp, p.reading.value[0]);
  }
  std::vector<std::vector<Instant>> times;
  for (auto& [device, s] : b.raw) {
    std::stable_sort(s.begin(), s.end(), [](const auto& a, const auto& c) { return a.first < c.first; });
    auto& t = times.emplace_back();
    for (const auto& x : s) t.push_back(x.first);
  }
  std::vector<std::pair<Instant, double>> series;
  if (b.raw.empty()) {
    b.pipeline = "none";
  } else if (b.raw.size() == 1) {
    b.pipeline = "single";
    const auto& [device, s] = *b.raw.begin();
    series = preprocess::smooth_scalar(device, kind, s, opts).samples;
  } else {
    auto o = opts;
    if (!window_configured) o.frame_window = median_gap(times, opts.frame_window);
    const auto w = weighting_for(mode);
    auto fused = preprocess::fuse_scalar(kind, b.raw, o, prior_reliability(b.raw, reliability, opts), w);
    series = std::move(fused.series.samples);
    b.pipeline = w == preprocess::Weighting::Equal ? "equal" : "fused";
    if (w == preprocess::Weighting::Mahalanobis) b.reliability = std::move(fused.fusion.reliability);
  }
  for (const auto& [t, v] : series) b.series.push_back({t, v});
  return b;
}

namespace {

RuleResult no_data(const std::string& rule, const std::string& what) {
  RuleResult r;
  r.rule_name = rule;
  r.notes.push_back("NoData: " + what);
  return r;
}

}  // namespace

std::vector<RuleResult> run_step_rules(const model::Policy& policy, const model::Step& step,
                                       const GpsBundle* gps,
                                       const std::map<epcis::ReadingKind, ScalarBundle>* scalars,
                                       const std::string& topic, bool with_sensor_rules,
                                       bool with_timeout) {
  std::vector<RuleResult> out;
  const bool have_track = gps && !gps->track.empty();
  for (const auto& spec : policy.rules) {
    std::optional<RuleResult> r;
    switch (spec.name) {
      case RuleName::Threshold: {
        if (!with_sensor_rules) break;
        const auto p = rules::parse_threshold_params(spec.params);
        const ScalarBundle* b = nullptr;
        if (scalars) {
          if (auto it = scalars->find(p.kind); it != scalars->end()) b = &it->second;
        }
        if (!b || b->series.empty()) {
          r = no_data("threshold", "no " + std::string(epcis::to_string(p.kind)) + " readings");
        } else {
          r = rules::rule_threshold(b->series, p, spec.severity);
          r->notes.push_back("pipeline: " + b->pipeline);
        }
        break;
      }
      case RuleName::Geofence:
        if (!with_sensor_rules) break;
        if (!have_track) {
          r = no_data("geofence", "no GPS readings");
        } else {
          r = rules::rule_geofence(gps->track, rules::parse_geofence_params(spec.params), spec.severity);
          r->notes.push_back("pipeline: " + gps->pipeline);
        }
        break;
      case RuleName::Backtrack:
        if (!with_sensor_rules) break;
        if (!have_track) {
          r = no_data("backtrack", "no GPS readings");
        } else {
          r = rules::rule_backtrack(gps->track, rules::parse_backtrack_params(spec.params), spec.severity);
          r->notes.push_back("pipeline: " + gps->pipeline);
        }
        break;
      case RuleName::ShipmentTimeout:
        if (with_timeout) {
          r = rules::rule_shipment_timeout(step, rules::parse_timeout_params(spec.params), spec.severity);
        }
        break;
      case RuleName::HandoverTime:
      case RuleName::AttributeConsistency:
        break;  // journey level
    }
    if (r) {
      if (with_sensor_rules) r->topic = topic;
      out.push_back(std::move(*r));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

VerificationManager::VerificationManager(model::Store& store, ManagerOptions options)
    : store_(store), options_(std::move(options)) {}

StepEvaluation VerificationManager::evaluate_step(const std::string& step_id) const {
  StepEvaluation ev;
  ev.step = store_.step(step_id, &ev.reads);
  const auto journey = store_.journey(ev.step.journey_id, &ev.reads);
  ev.product_type = journey.product_type;
  ev.policy = store_.find_policy(journey.product_type, ev.step.phase, &ev.reads);
  if (!ev.policy) {
    RuleResult r;
    r.rule_name = "policy";
    r.verdict = Verdict::Warning;
    r.notes.push_back("NoApplicablePolicy: no policy for product type '" + journey.product_type +
                      "' and phase '" + ev.step.phase + "'; step is unverifiable");
    ev.results.push_back(std::move(r));
    ev.notes.push_back("unverifiable");
    return ev;
  }
  const auto& policy = *ev.policy;
  const auto opts = preprocess::parse_preprocess_options(policy.preprocessing, "/preprocessing");
  const bool window_configured = policy.preprocessing.contains("frameWindowSec");

  const auto points = store_.points(ev.step.journey_id, ev.step.step_id, &ev.reads);
  if (points.empty()) ev.notes.push_back("NoData: step has no sensor points");

  std::set<std::string> device_set;
  for (const auto& p : points) device_set.insert(p.reading.device_id);
  const auto stored_rel = store_.reliability({device_set.begin(), device_set.end()});

  const bool dsod = policy.mode == Mode::DSoD;
  std::map<std::string, std::vector<Point>> groups;
  for (const auto& p : points) groups[dsod ? p.topic : std::string{}].push_back(p);

  for (const auto& [topic, group] : groups) {
    std::set<epcis::ReadingKind> kinds;
    for (const auto& p : group) kinds.insert(p.reading.kind);
    for (auto kind : kinds) {
      if (kind == epcis::ReadingKind::Gps) {
        ev.gps[topic] = prepare_gps(group, policy.mode, opts, window_configured, stored_rel);
      } else {
        ev.scalars[topic][kind] = prepare_scalar(group, kind, policy.mode, opts, window_configured, stored_rel);
      }
    }
  }

  auto gps_of = [&](const std::string& t) -> const GpsBundle* {
    auto it = ev.gps.find(t);
    return it == ev.gps.end() ? nullptr : &it->second;
  };
  auto scalars_of = [&](const std::string& t) -> const std::map<epcis::ReadingKind, ScalarBundle>* {
    auto it = ev.scalars.find(t);
    return it == ev.scalars.end() ? nullptr : &it->second;
  };

  if (!dsod || groups.empty()) {
    ev.results = run_step_rules(policy, ev.step, gps_of(""), scalars_of(""), "", true, true);
  } else {
    std::map<std::string, std::map<std::string, Verdict>> by_rule;  // rule -> topic -> verdict
    for (const auto& [topic, group] : groups) {
      for (auto& r : run_step_rules(policy, ev.step, gps_of(topic), scalars_of(topic), topic, true, false)) {
        by_rule[r.rule_name][topic] = r.verdict;
        ev.results.push_back(std::move(r));
      }
    }
    for (auto& r : run_step_rules(policy, ev.step, nullptr, nullptr, "", false, true)) {
      ev.results.push_back(std::move(r));
    }
    for (const auto& [rule, verdicts] : by_rule) {
      std::set<Verdict> distinct;
      for (const auto& [t, v] : verdicts) distinct.insert(v);
      if (distinct.size() > 1) {
        std::string detail = "topics disagree on " + rule + ":";
        for (const auto& [t, v] : verdicts) detail += " " + t + "=" + std::string(to_string(v));
        ev.notes.push_back(detail);
      }
    }
  }

  for (const auto& [topic, b] : ev.gps) {
    for (const auto& [d, s] : b.reliability) ev.reliability_updates[d] = s;
  }
  for (const auto& [topic, kinds] : ev.scalars) {
    for (const auto& [k, b] : kinds) {
      for (const auto& [d, s] : b.reliability) ev.reliability_updates[d] = s;
    }
  }
  return ev;
}

std::shared_ptr<std::mutex> VerificationManager::subject_lock(const std::string& subject) {
  std::lock_guard guard(locks_mutex_);
  auto& m = locks_[subject];
  if (!m) m = std::make_shared<std::mutex>();
  return m;
}

GuardsVerification VerificationManager::commit(GuardsVerification v, const model::Reads& reads,
                                               const std::map<std::string, double>& reliability) {
  auto& ledger = store_.ledger();
  std::vector<Verdict> verdicts;
  for (const auto& r : v.rule_results) verdicts.push_back(r.verdict);
  v.outcome = aggregate_outcomes(verdicts);
  if (v.rule_results.empty()) v.notes.push_back("no rules applied");
  for (auto h : reads.heights) {
    if (auto id = ledger.tx_id_at(h); !id.empty()) v.tx_ids.push_back(std::move(id));
  }
  v.verified_at = options_.clock();
  const auto seq = store_.verification_count(v.subject) + 1;
  std::string canonical;
  append_framed(canonical, v.subject);
  append_framed(canonical, std::to_string(seq));
  append_framed(canonical, format_time(v.verified_at));
  append_framed(canonical, v.trigger);
  v.verification_id = sha256_hex(canonical).substr(0, 16);

  auto tx = ledger.begin();
  const auto payload = model::to_json(v).dump();
  tx.put(model::Store::verification_key(v.subject, seq, v.verification_id), payload);
  for (const auto& [device, score] : reliability) {
    tx.put(model::Store::reliability_key(device), model::Store::reliability_value(device, score));
  }
  tx.emit(std::string(kCompletedEvent), payload);
  if (v.outcome != Verdict::Okay) tx.emit(std::string(kFlaggedEvent), payload);
  ledger.submit(std::move(tx), "verification:" + v.verification_id);
  return v;
}

GuardsVerification VerificationManager::verify_step(const VerificationRequest& request) {
  auto lock = subject_lock(request.subject);
  std::lock_guard guard(*lock);
  for (int attempt = 0;; ++attempt) {
    auto ev = evaluate_step(request.subject);
    GuardsVerification v;
    v.subject = request.subject;
    v.subject_kind = "step";
    v.journey_id = ev.step.journey_id;
    v.policy_id = ev.policy ? ev.policy->policy_id : std::string{};
    v.trigger = request.trigger;
    v.requested_by = request.requested_by;
    v.rule_results = std::move(ev.results);
    v.notes = std::move(ev.notes);
    try {
      return commit(std::move(v), ev.reads, ev.reliability_updates);
    } catch (const Error& e) {
      if (e.code() != Errc::WriteConflict || attempt + 1 >= options_.max_retries) throw;
    }
  }
}

namespace {

std::string describe(const model::DiscrepancyReport& d) {
  std::string s = d.attribute + ":";
  for (const auto& [topic, v] : d.per_topic) s += " " + topic + "=" + epcis::scalar_to_string(v);
  return s;
}

double spread_of(const model::DiscrepancyReport& d) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& [t, v] : d.per_topic) {
    if (!std::holds_alternative<double>(v)) return 1.0;
    lo = std::min(lo, std::get<double>(v));
    hi = std::max(hi, std::get<double>(v));
  }
  return hi > lo ? (hi - lo) / std::max(std::abs(hi), 1e-12) : 0.0;
}

}  // namespace

GuardsVerification VerificationManager::verify_journey(const VerificationRequest& request) {
  auto lock = subject_lock(request.subject);
  std::lock_guard guard(*lock);
  for (int attempt = 0;; ++attempt) {
    model::Reads reads;
    const auto journey = store_.journey(request.subject, &reads);
    GuardsVerification v;
    v.subject = request.subject;
    v.subject_kind = "journey";
    v.journey_id = journey.journey_id;
    v.trigger = request.trigger;
    v.requested_by = request.requested_by;

    const auto policy = store_.find_journey_policy(journey.product_type, &reads);
    if (!policy) {
      RuleResult r;
      r.rule_name = "policy";
      r.verdict = Verdict::Warning;
      r.notes.push_back("NoApplicablePolicy: no policy for product type '" + journey.product_type +
                        "'; journey is unverifiable");
      v.rule_results.push_back(std::move(r));
      v.notes.push_back("unverifiable");
    } else {
      v.policy_id = policy->policy_id;
      auto steps = store_.steps(journey.journey_id, &reads);
      std::stable_sort(steps.begin(), steps.end(), [](const auto& a, const auto& b) {
        if (!a.start || !b.start) return a.start.has_value() && !b.start.has_value();
        return a.start->time < b.start->time;
      });

      const model::RuleSpec* consistency = nullptr;
      for (const auto& spec : policy->rules) {
        if (spec.name == RuleName::AttributeConsistency) consistency = &spec;
        if (spec.name != RuleName::HandoverTime) continue;
        const auto params = rules::parse_handover_params(spec.params);
        if (steps.size() < 2) {
          RuleResult r;
          r.rule_name = "handoverTime";
          r.notes.push_back("fewer than two steps: no custody transfer to check");
          v.rule_results.push_back(std::move(r));
          continue;
        }
        for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
          std::optional<rules::CustodyEvent> depart, arrive;
          if (steps[i].end) depart = rules::CustodyEvent{steps[i].end->time, steps[i].end->event_id};
          if (steps[i + 1].start) {
            arrive = rules::CustodyEvent{steps[i + 1].start->time, steps[i + 1].start->event_id};
          }
          auto r = rules::rule_handover(depart, arrive, params, spec.severity);
          r.notes.push_back("handover " + steps[i].step_id + " -> " + steps[i + 1].step_id);
          v.rule_results.push_back(std::move(r));
        }
      }

      if (consistency || policy->mode == Mode::DSoD) {
        rules::ConsistencyParams params;
        Verdict severity = Verdict::Alert;
        if (consistency) {
          params = rules::parse_consistency_params(consistency->params);
          severity = consistency->severity;
        } else if (auto it = policy->severity_map.find("attributeConsistency"); it != policy->severity_map.end()) {
          severity = it->second;
        }
        const auto claims = store_.claims(journey.journey_id, &reads);
        v.discrepancies = compare_claims(claims, params);
        RuleResult r;
        r.rule_name = "attributeConsistency";
        std::size_t discrepant = 0;
        for (const auto& d : v.discrepancies) {
          if (!d.discrepant) continue;
          ++discrepant;
          r.add(Violation{"discrepantClaim", describe(d), spread_of(d), severity, {}, {}, {}, {}});
        }
        if (claims.size() < 2) r.notes.push_back("insufficient sources");
        r.metrics["topics"] = static_cast<double>(claims.size());
        r.metrics["attributes"] = static_cast<double>(v.discrepancies.size());
        r.metrics["discrepant"] = static_cast<double>(discrepant);
        v.rule_results.push_back(std::move(r));
      }

      RuleResult step_outcomes;
      step_outcomes.rule_name = "stepOutcomes";
      std::size_t verified = 0;
      for (const auto& s : steps) {
        const auto history = store_.verifications(s.step_id);
        if (history.empty()) continue;
        ++verified;
        const auto& latest = history.back();
        if (latest.outcome != Verdict::Okay) {
          step_outcomes.add(Violation{"stepFlagged",
                                      "step " + s.step_id + " (" + s.phase + ") latest outcome " +
                                          std::string(to_string(latest.outcome)),
                                      0, latest.outcome, {}, {}, {}, {}});
        }
        if (policy->mode == Mode::DSoD) {
          std::map<std::string, Verdict> per_topic;
          for (const auto& r : latest.rule_results) {
            if (!r.topic.empty()) per_topic[r.topic] = worst(per_topic[r.topic], r.verdict);
          }
          std::set<Verdict> distinct;
          for (const auto& [t, vd] : per_topic) distinct.insert(vd);
          if (distinct.size() > 1) {
            std::string note = "topics disagree on step " + s.step_id + ":";
            for (const auto& [t, vd] : per_topic) note += " " + t + "=" + std::string(to_string(vd));
            v.notes.push_back(note);
          }
        }
      }
      if (verified > 0) {
        step_outcomes.metrics["stepsVerified"] = static_cast<double>(verified);
        v.rule_results.push_back(std::move(step_outcomes));
      }
    }
    try {
      return commit(std::move(v), reads, {});
    } catch (const Error& e) {
      if (e.code() != Errc::WriteConflict || attempt + 1 >= options_.max_retries) throw;
    }
  }
}

GuardsVerification VerificationManager::reverify(const std::string& subject,
                                                 const std::string& requested_by) {
  const auto history = store_.verifications(subject);
  if (history.empty()) {
    throw Error(Errc::UnknownSubject, "no prior verification of '" + subject + "'");
  }
  VerificationRequest req{subject, "manual", requested_by};
  return history.back().subject_kind == "journey" ? verify_journey(req) : verify_step(req);
}

void VerificationManager::enable_auto_trigger() {
  store_.ledger().subscribe([this](const ledger::LedgerEvent& e) {
    if (e.name != model::kStepClosedEvent) return;
    std::string step_id;
    try {
      const auto j = json::parse(e.payload);
      if (!options_.trigger.biz_steps.contains(j.value("bizStep", std::string{}))) return;
      step_id = j.at("stepId").get<std::string>();
      verify_step({step_id, "auto", j.value("topic", std::string{})});
    } catch (const std::exception& ex) {
      std::lock_guard guard(errors_mutex_);
      auto_errors_.push_back("auto verification of step '" + step_id + "' failed: " + ex.what());
    }
  });
}

std::vector<std::string> VerificationManager::auto_trigger_errors() const {
  std::lock_guard guard(errors_mutex_);
  return auto_errors_;
}

}  // namespace tracecheck::verify
