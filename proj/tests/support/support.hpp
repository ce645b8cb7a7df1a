#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "tracecheck/common.hpp"
#include "tracecheck/geo.hpp"

namespace tracecheck::testing {

/// Hand-rolled generator for property tests. Every case derives from an
/// explicit seed so a failure message can name it.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(engine_); }
  std::size_t index(std::size_t n) { return static_cast<std::size_t>(integer(0, static_cast<int>(n) - 1)); }
  bool coin(double p = 0.5) { return uniform(0, 1) < p; }
  double normal(double sigma = 1) { return std::normal_distribution<double>(0, sigma)(engine_); }

  std::string word(std::size_t max_len = 6) {
    static constexpr char kAlphabet[] = "abcdefghijklmnopqrstuvwxyz0123456789-_:.";
    std::string s(static_cast<std::size_t>(integer(1, static_cast<int>(max_len))), 'a');
    for (auto& c : s) c = kAlphabet[index(sizeof kAlphabet - 1)];
    return s;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), engine_);
  }

 private:
  std::mt19937_64 engine_;
};

inline Instant t0() { return parse_time("2024-06-03T08:00:00Z"); }
inline Instant at_min(double minutes) {
  return t0() + std::chrono::milliseconds(std::llround(minutes * 60000.0));
}

/// Cold-chain temperatures, sampled every 10 minutes.
inline const std::vector<double>& cold_chain_values() {
  static const std::vector<double> v{3.2, 4.5, 5.0, 3.8, 3.5, 2.9, 3.1, 6.0, 3.0};
  return v;
}

std::string fixture_path(const std::string& name);
std::string read_fixture(const std::string& name);

// Property suites shared by the unit tests and the acceptance binary. Each
// returns an empty string on success, otherwise a description of the first
// counterexample.
std::string prop_ledger_replay(int cases);
std::string prop_kalman_psd(int cases);
std::string prop_fusion_convex(int cases);
std::string prop_weight_monotone(int cases);
std::string prop_threshold_additive(int cases);
std::string prop_aggregate_max(int cases);
std::string prop_dsod_permutation(int cases);
std::string prop_audit_no_loss(int cases);

}  // namespace tracecheck::testing
