#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "support.hpp"
#include "tracecheck/audit.hpp"
#include "tracecheck/ledger.hpp"
#include "tracecheck/preprocess.hpp"
#include "tracecheck/rules.hpp"
#include "tracecheck/verify.hpp"

namespace tracecheck::testing {

using nlohmann::json;

std::string fixture_path(const std::string& name) { return std::string(TRACECHECK_FIXTURES) + "/" + name; }

std::string read_fixture(const std::string& name) {
  std::ifstream in(fixture_path(name), std::ios::binary);
  if (!in) throw std::runtime_error("missing fixture " + name);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::string fail(std::uint64_t seed, const std::string& what) {
  return "seed " + std::to_string(seed) + ": " + what;
}

}  // namespace

// Two fresh ledgers fed the same transaction script end in byte-identical
// snapshots with the same txIds; a restored snapshot matches too.
std::string prop_ledger_replay(int cases) {
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 1;
    Gen g(seed);
    struct Step {
      std::vector<ledger::Write> writes;
      std::vector<ledger::LedgerEvent> events;
      std::string nonce;
      bool stale = false;  // prepared against an older height
    };
    std::vector<std::string> keys;
    for (int i = 0; i < 6; ++i) keys.push_back(ledger::encode_composite_key("K", {g.word(), g.word()}));
    std::vector<Step> script;
    const int n = g.integer(1, 25);
    for (int i = 0; i < n; ++i) {
      Step s;
      for (int w = g.integer(1, 4); w > 0; --w) s.writes.push_back({keys[g.index(keys.size())], g.word(12)});
      if (g.coin(0.3)) s.events.push_back({"evt." + g.word(), g.word(8), ""});
      s.nonce = g.word(10);
      s.stale = g.coin(0.15);
      script.push_back(std::move(s));
    }

    auto run = [&](ledger::WorldState& ws) {
      std::vector<std::string> outcome;
      for (const auto& s : script) {
        auto tx = ws.begin();
        if (s.stale) ws.submit_transaction({s.writes.front()}, {}, "interloper:" + s.nonce);
        for (const auto& w : s.writes) tx.put(w.key, w.value);
        for (const auto& e : s.events) tx.emit(e.name, e.payload);
        try {
          outcome.push_back(ws.submit(std::move(tx), s.nonce).tx_id);
        } catch (const Error& e) {
          outcome.push_back(std::string("conflict:") + std::string(to_string(e.code())));
        }
      }
      return outcome;
    };
    const auto clock = [] { return t0(); };
    ledger::WorldState a(clock), b(clock), restored(clock);
    const auto ra = run(a);
    const auto rb = run(b);
    if (ra != rb) return fail(seed, "txId sequences differ");
    if (a.snapshot().dump() != b.snapshot().dump()) return fail(seed, "snapshots differ");
    restored.restore(a.snapshot());
    if (restored.snapshot().dump() != a.snapshot().dump()) return fail(seed, "restore is not faithful");
  }
  return {};
}

// Random predict/update sequences keep P symmetric with eigenvalues >= -1e-9.
std::string prop_kalman_psd(int cases) {
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 101;
    Gen g(seed);
    auto st = g.coin() ? preprocess::KalmanState::constant_velocity(g.uniform(-1e3, 1e3), g.uniform(-1e3, 1e3),
                                                                    g.uniform(1e-3, 1e4), g.uniform(1e-3, 1e3),
                                                                    g.uniform(0, 10), g.uniform(0, 5),
                                                                    g.uniform(1e-4, 1e4))
                       : preprocess::KalmanState::random_walk(g.uniform(-50, 50), g.uniform(1e-6, 1e3),
                                                              g.uniform(0, 1), g.uniform(1e-6, 10));
    const auto dim = st.H.rows();
    for (int step = 0; step < 200; ++step) {
      if (g.coin(0.6)) st.predict(g.uniform(0, 120));
      Eigen::VectorXd z(dim);
      for (Eigen::Index i = 0; i < dim; ++i) z(i) = g.uniform(-1e4, 1e4);
      // Measurement noise spans ten orders of magnitude, including near-exact sensors.
      const double r = std::pow(10.0, g.uniform(-6, 4));
      st.update(z, Eigen::MatrixXd::Identity(dim, dim) * r);
      if ((st.P - st.P.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, st.P.cwiseAbs().maxCoeff())) {
        return fail(seed, "P lost symmetry at step " + std::to_string(step));
      }
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(st.P);
      if (eig.eigenvalues().minCoeff() < -1e-9) {
        return fail(seed, "P has eigenvalue " + std::to_string(eig.eigenvalues().minCoeff()));
      }
    }
  }
  return {};
}

// Every fused pseudo-measurement lies in the bounding box of its frame's
// measurements (coordinate-wise convex hull of a convex combination).
std::string prop_fusion_convex(int cases) {
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 201;
    Gen g(seed);
    const int devices = g.integer(2, 5);
    std::vector<preprocess::FusionFrame> frames;
    std::map<std::string, Eigen::MatrixXd> noise;
    std::map<std::string, double> reliability;
    for (int d = 0; d < devices; ++d) {
      const auto id = "d" + std::to_string(d);
      noise[id] = Eigen::Matrix2d::Identity() * std::pow(10.0, g.uniform(0, 4));
      reliability[id] = g.coin(0.2) ? 0.0 : g.uniform(0, 1);
    }
    for (int f = 0; f < 30; ++f) {
      preprocess::FusionFrame frame;
      frame.frame_time = at_min(f);
      for (int d = 0; d < devices; ++d) {
        if (d > 0 && g.coin(0.2)) continue;
        const double spike = g.coin(0.1) ? g.uniform(-5e3, 5e3) : 0;
        frame.per_device["d" + std::to_string(d)] = {{f * 100.0 + g.normal(30) + spike, g.normal(30)}, 0, 0};
      }
      frames.push_back(std::move(frame));
    }
    auto state = preprocess::KalmanState::constant_velocity(0, 0, 100, 400, 1, 0.5, 100);
    const auto weighting = g.coin(0.8) ? preprocess::Weighting::Mahalanobis : preprocess::Weighting::Equal;
    const auto result = preprocess::fuse_msod(frames, state, noise, reliability, {}, weighting);
    for (std::size_t f = 0; f < result.frames.size(); ++f) {
      const auto& fr = result.frames[f];
      for (std::size_t k = 0; k < 2; ++k) {
        double lo = 1e300, hi = -1e300;
        for (const auto& [d, e] : fr.per_device) {
          lo = std::min(lo, e.z[k]);
          hi = std::max(hi, e.z[k]);
        }
        const double tol = 1e-9 * std::max(1.0, std::abs(hi) + std::abs(lo));
        if (fr.pseudo_z.size() != 2 || fr.pseudo_z[k] < lo - tol || fr.pseudo_z[k] > hi + tol) {
          return fail(seed, "frame " + std::to_string(f) + " pseudo-measurement outside hull");
        }
      }
      for (const auto& [d, e] : fr.per_device) {
        if (e.weight < 0) return fail(seed, "negative weight");
      }
    }
  }
  return {};
}

// For fixed reliability the weight strictly decreases in the distance, and for
// fixed distance it does not decrease in reliability.
std::string prop_weight_monotone(int cases) {
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 301;
    Gen g(seed);
    const double r = g.uniform(1e-3, 1);
    const double d1 = g.uniform(0, 50);
    const double d2 = d1 + g.uniform(1e-3, 50);
    if (!(preprocess::fusion_weight(r, d1) > preprocess::fusion_weight(r, d2))) {
      return fail(seed, "weight not strictly decreasing in D");
    }
    const double r2 = std::min(1.0, r + g.uniform(0, 1));
    if (preprocess::fusion_weight(r2, d1) < preprocess::fusion_weight(r, d1)) {
      return fail(seed, "weight decreasing in reliability");
    }
  }
  return {};
}

// Splitting a series at any sample (the sample is shared) and adding the two
// trapezoid severities gives the whole-series severity.
std::string prop_threshold_additive(int cases) {
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 401;
    Gen g(seed);
    const int n = g.integer(2, 40);
    std::vector<rules::ScalarSample> series;
    double minute = 0;
    for (int i = 0; i < n; ++i) {
      series.push_back({at_min(minute), g.uniform(0, 9)});
      minute += g.uniform(0.5, 20);
    }
    rules::ThresholdParams p;
    p.t_max = g.uniform(2, 6);
    if (g.coin(0.3)) p.t_min = g.uniform(0, 1.5);
    p.mode = rules::SamplingMode::Trapezoid;
    const double whole = rules::cumulative_severity(series, p).total;
    const auto k = static_cast<std::size_t>(g.integer(0, n - 1));
    const std::span<const rules::ScalarSample> all(series);
    const double left = rules::cumulative_severity(all.subspan(0, k + 1), p).total;
    const double right = rules::cumulative_severity(all.subspan(k), p).total;
    if (std::abs(left + right - whole) > 1e-9 * std::max(1.0, whole)) {
      return fail(seed, "split at " + std::to_string(k) + ": " + std::to_string(left + right) +
                            " != " + std::to_string(whole));
    }
    const auto trace = rules::cumulative_severity(series, p);
    for (std::size_t i = 1; i < trace.running.size(); ++i) {
      if (trace.running[i] < trace.running[i - 1]) return fail(seed, "running severity decreased");
    }
  }
  return {};
}

// aggregate == max; aggregate(a ++ b) == worst(aggregate a, aggregate b);
// order does not matter; empty is okay.
std::string prop_aggregate_max(int cases) {
  if (verify::aggregate_outcomes({}) != Verdict::Okay) return "empty list is not okay";
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 501;
    Gen g(seed);
    std::vector<Verdict> a, b;
    for (int i = g.integer(0, 8); i > 0; --i) a.push_back(static_cast<Verdict>(g.integer(0, 2)));
    for (int i = g.integer(0, 8); i > 0; --i) b.push_back(static_cast<Verdict>(g.integer(0, 2)));
    auto ab = a;
    ab.insert(ab.end(), b.begin(), b.end());
    const auto agg = verify::aggregate_outcomes(ab);
    const auto expected = ab.empty() ? Verdict::Okay : *std::max_element(ab.begin(), ab.end());
    if (agg != expected) return fail(seed, "aggregate is not the max");
    if (agg != worst(verify::aggregate_outcomes(a), verify::aggregate_outcomes(b))) {
      return fail(seed, "aggregate does not distribute over concatenation");
    }
    g.shuffle(ab);
    if (verify::aggregate_outcomes(ab) != agg) return fail(seed, "aggregate depends on order");
    ab.push_back(Verdict::Alert);
    if (verify::aggregate_outcomes(ab) != Verdict::Alert) return fail(seed, "adding an alert lowered the outcome");
  }
  return {};
}

// compare_claims gives the same reports for every ordering of the claims.
std::string prop_dsod_permutation(int cases) {
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 601;
    Gen g(seed);
    const std::vector<std::string> attrs{"parentId", "weightKg", "variety", "colorGrade", "brix"};
    std::vector<model::ItemData> claims;
    for (int t = g.integer(1, 5); t > 0; --t) {
      model::ItemData d;
      d.topic = "topic-" + g.word(4);
      d.journey_id = "J";
      for (const auto& a : attrs) {
        if (g.coin(0.2)) continue;
        if (a == "weightKg" || a == "brix") {
          d.attributes[a] = g.coin(0.5) ? 1000.0 : g.uniform(900, 1000);
        } else {
          d.attributes[a] = g.coin(0.7) ? std::string("A") : g.word(3);
        }
      }
      claims.push_back(std::move(d));
    }
    rules::ConsistencyParams params;
    params.tolerance = g.coin() ? 0.0 : g.uniform(0, 0.05);
    auto render = [&](const std::vector<model::ItemData>& cs) {
      json out = json::array();
      for (const auto& r : verify::compare_claims(cs, params)) out.push_back(model::to_json(r));
      return out.dump();
    };
    const auto reference = render(claims);
    for (int k = 0; k < 6; ++k) {
      g.shuffle(claims);
      if (render(claims) != reference) return fail(seed, "reports depend on claim order");
    }
  }
  return {};
}

namespace {

class CountingSink final : public audit::Sink {
 public:
  CountingSink(std::string name, double fail_rate, std::uint64_t seed)
      : name_(std::move(name)), fail_rate_(fail_rate), gen_(seed) {}
  audit::Receipt deliver(const audit::Notification& n) override {
    if (gen_.coin(fail_rate_)) throw Error(Errc::SinkUnavailable, name_ + " is down");
    subjects.push_back(n.subject);
    return {name_, true, 1, false, {}};
  }
  std::string name() const override { return name_; }
  std::vector<std::string> subjects;

 private:
  std::string name_;
  double fail_rate_;
  Gen gen_;
};

}  // namespace

// Within one run every well-formed flagged event is either delivered or
// dead-lettered by each sink, malformed ones are counted, and per-subject
// delivery order follows commit order.
std::string prop_audit_no_loss(int cases) {
  for (int c = 0; c < cases; ++c) {
    const auto seed = static_cast<std::uint64_t>(c) + 701;
    Gen g(seed);
    std::vector<std::unique_ptr<audit::Sink>> sinks;
    auto good = std::make_unique<CountingSink>("good", 0.0, seed);
    auto flaky = std::make_unique<CountingSink>("flaky", g.uniform(0, 0.7), seed * 7);
    auto* good_ptr = good.get();
    auto* flaky_ptr = flaky.get();
    sinks.push_back(std::move(good));
    sinks.push_back(std::move(flaky));
    audit::Notifier notifier(std::move(sinks), [] { return t0(); }, [](const std::string&) {});
    ledger::WorldState ws([] { return t0(); });
    notifier.attach(ws);

    std::size_t well_formed = 0, malformed = 0;
    std::vector<std::string> committed_subjects;
    for (int i = g.integer(1, 40); i > 0; --i) {
      const auto subject = "s" + std::to_string(g.integer(0, 3));
      std::vector<ledger::LedgerEvent> events;
      const int kind = g.integer(0, 3);
      if (kind == 0) {
        events.push_back({std::string(verify::kCompletedEvent), json{{"subject", subject}, {"outcome", "okay"}}.dump(), ""});
      } else if (kind == 1) {
        events.push_back({std::string(verify::kFlaggedEvent), "{not json", ""});
        ++malformed;
      } else {
        const auto outcome = g.coin() ? "warning" : "alert";
        json payload = {{"subject", subject},
                        {"outcome", outcome},
                        {"ruleResults", json::array({{{"ruleName", "threshold"}, {"verdict", outcome},
                                                      {"violations", json::array()}, {"notes", json::array()}}})}};
        events.push_back({std::string(verify::kFlaggedEvent), payload.dump(), ""});
        ++well_formed;
        committed_subjects.push_back(subject);
      }
      ws.submit_transaction({{"k" + std::to_string(i), "v"}}, events, "n" + std::to_string(i));
    }
    const auto stats = notifier.stats();
    if (stats.flagged != well_formed + malformed) return fail(seed, "flagged count mismatch");
    if (stats.malformed != malformed) return fail(seed, "malformed count mismatch");
    if (stats.delivered + stats.dead_lettered != 2 * well_formed) return fail(seed, "a notification was lost");
    if (good_ptr->subjects != committed_subjects) return fail(seed, "delivery order differs from commit order");
    // The flaky sink saw a subsequence in commit order.
    std::size_t j = 0;
    for (const auto& s : committed_subjects) {
      if (j < flaky_ptr->subjects.size() && flaky_ptr->subjects[j] == s) ++j;
    }
    if (j != flaky_ptr->subjects.size()) return fail(seed, "flaky sink order differs from commit order");
  }
  return {};
}

}  // namespace tracecheck::testing
