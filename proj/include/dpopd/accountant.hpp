// Copyright 2026 The dpopd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Renyi-DP accountant for the Poisson-subsampled Gaussian mechanism at integer
// orders 2..256. Per-step RDP at order a:
//
//   (1/(a-1)) log sum_{j=0}^{a} C(a,j) (1-q)^{a-j} q^j exp(j(j-1) / (2 sigma^2))
//
// composed additively over steps and converted with
// eps = min_a [RDP(a) + log(1/delta) / (a-1)].
// The ledger takes no data, batch or teacher inputs.

#ifndef DPOPD_ACCOUNTANT_HPP_
#define DPOPD_ACCOUNTANT_HPP_

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpopd {

inline constexpr int kMinOrder = 2;
inline constexpr int kMaxOrder = 256;

/// Per-step RDP at integer order `alpha`; nullopt means sigma = 0 (no
/// privacy at all).
inline std::optional<double> rdp_step(double q, double sigma, int alpha) {
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("rdp_step: q must be in (0, 1]");
  if (alpha < 2) throw std::invalid_argument("rdp_step: order must be an integer >= 2");
  if (!(sigma >= 0.0)) throw std::invalid_argument("rdp_step: sigma must be >= 0");
  if (sigma == 0.0) return std::nullopt;
  const double a = alpha;
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);  // -inf at q == 1
  const double inv_2s2 = 1.0 / (2.0 * sigma * sigma);
  std::vector<double> terms;
  terms.reserve(static_cast<std::size_t>(alpha) + 1);
  for (int j = 0; j <= alpha; ++j) {
    const double jj = j;
    const double log_binom = std::lgamma(a + 1.0) - std::lgamma(jj + 1.0) - std::lgamma(a - jj + 1.0);
    const double from_keep = (alpha - j) == 0 ? 0.0 : (a - jj) * log_1mq;
    const double from_take = j == 0 ? 0.0 : jj * log_q;
    const double t = log_binom + from_keep + from_take + jj * (jj - 1.0) * inv_2s2;
    if (t != -std::numeric_limits<double>::infinity()) terms.push_back(t);
  }
  double hi = -std::numeric_limits<double>::infinity();
  for (double t : terms) hi = std::max(hi, t);
  double s = 0.0;
  for (double t : terms) s += std::exp(t - hi);
  const double value = (hi + std::log(s)) / (a - 1.0);
  return std::max(0.0, value);
}

/// Accumulated RDP at orders kMinOrder..kMaxOrder.
struct RdpCurve {
  std::vector<int> orders;
  std::vector<double> values;
  std::uint64_t steps = 0;

  RdpCurve() {
    for (int a = kMinOrder; a <= kMaxOrder; ++a) orders.push_back(a);
    values.assign(orders.size(), 0.0);
  }
};

struct EpsilonResult {
  double epsilon = 0.0;
  int best_alpha = kMinOrder;
  /// sigma = 0: epsilon is infinite.
  bool non_private = false;
};

/// Running (epsilon, delta) state for one DP-SGD configuration.
struct PrivacyLedger {
  double q = 0.0;
  double sigma = 0.0;
  double delta = 0.0;
  RdpCurve curve;
  bool non_private = false;
  /// Per-order single-step values, cached once per (q, sigma).
  std::vector<double> per_step;

  PrivacyLedger() = default;
  PrivacyLedger(double sampling_rate, double noise_multiplier, double target_delta)
      : q(sampling_rate), sigma(noise_multiplier), delta(target_delta) {
    if (!(target_delta > 0.0 && target_delta < 1.0)) throw std::invalid_argument("ledger: delta must be in (0, 1)");
    per_step.resize(curve.orders.size());
    for (std::size_t i = 0; i < curve.orders.size(); ++i) {
      const auto v = rdp_step(q, sigma, curve.orders[i]);
      if (!v) {
        non_private = true;
        per_step[i] = std::numeric_limits<double>::infinity();
      } else {
        per_step[i] = *v;
      }
    }
  }
};

/// Adds `steps` steps at the ledger's (q, sigma).
inline PrivacyLedger compose(PrivacyLedger ledger, std::uint64_t steps) {
  if (steps == 0) return ledger;
  for (std::size_t i = 0; i < ledger.curve.values.size(); ++i) {
    ledger.curve.values[i] += static_cast<double>(steps) * ledger.per_step[i];
  }
  ledger.curve.steps += steps;
  return ledger;
}

inline EpsilonResult epsilon_at(const RdpCurve& curve, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("epsilon_at: delta must be in (0, 1)");
  EpsilonResult best;
  best.epsilon = std::numeric_limits<double>::infinity();
  const double log_inv_delta = std::log(1.0 / delta);
  for (std::size_t i = 0; i < curve.orders.size(); ++i) {
    const double eps = curve.values[i] + log_inv_delta / (curve.orders[i] - 1.0);
    if (eps < best.epsilon) {
      best.epsilon = eps;
      best.best_alpha = curve.orders[i];
    }
  }
  if (!std::isfinite(best.epsilon)) best.non_private = true;
  return best;
}

inline EpsilonResult epsilon_at(const PrivacyLedger& ledger, double delta) {
  EpsilonResult r = epsilon_at(ledger.curve, delta);
  if (ledger.non_private && ledger.curve.steps > 0) {
    r.non_private = true;
    r.epsilon = std::numeric_limits<double>::infinity();
  }
  return r;
}

inline EpsilonResult epsilon_at(const PrivacyLedger& ledger) { return epsilon_at(ledger, ledger.delta); }

/// epsilon after `steps` steps at (q, sigma, delta).
inline EpsilonResult account(double q, double sigma, std::uint64_t steps, double delta) {
  return epsilon_at(compose(PrivacyLedger(q, sigma, delta), steps));
}

struct CalibrationResult {
  double sigma = 0.0;
  double epsilon = 0.0;
  int best_alpha = kMinOrder;
  /// Target already met at the lower search bound; sigma was not tuned.
  bool at_lower_bound = false;
};

inline constexpr double kSigmaLow = 0.3;
inline constexpr double kSigmaHigh = 200.0;

/// Smallest-found sigma in [0.3, 200] with eps(sigma) <= target and within
/// 0.5% of it, by bisection (eps is decreasing in sigma).
inline CalibrationResult calibrate_sigma(double q, std::uint64_t steps, double target_epsilon, double delta) {
  if (!(target_epsilon > 0.0)) throw std::invalid_argument("calibrate_sigma: target epsilon must be > 0");
  auto eps = [&](double sigma) { return account(q, sigma, steps, delta); };
  CalibrationResult r;
  const EpsilonResult at_low = eps(kSigmaLow);
  if (at_low.epsilon <= target_epsilon) {
    r.sigma = kSigmaLow;
    r.epsilon = at_low.epsilon;
    r.best_alpha = at_low.best_alpha;
    r.at_lower_bound = true;
    return r;
  }
  const EpsilonResult at_high = eps(kSigmaHigh);
  if (at_high.epsilon > target_epsilon) {
    throw std::invalid_argument("calibrate_sigma: target epsilon " + std::to_string(target_epsilon) +
                                " unattainable even at sigma = " + std::to_string(kSigmaHigh));
  }
  double lo = kSigmaLow, hi = kSigmaHigh;
  EpsilonResult best = at_high;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const EpsilonResult e = eps(mid);
    if (e.epsilon <= target_epsilon) {
      hi = mid;
      best = e;
      if (e.epsilon >= 0.995 * target_epsilon) break;
    } else {
      lo = mid;
    }
    if (hi - lo < 1e-12 * hi) break;
  }
  r.sigma = hi;
  r.epsilon = best.epsilon;
  r.best_alpha = best.best_alpha;
  return r;
}

}  // namespace dpopd

#endif  // DPOPD_ACCOUNTANT_HPP_
