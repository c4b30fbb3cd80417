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

// Generalized knowledge-distillation loss on continuation tokens and its exact
// gradient with respect to student logits.

#ifndef DPOPD_DISTILL_HPP_
#define DPOPD_DISTILL_HPP_

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpopd/nn_core.hpp"
#include "dpopd/rng.hpp"

namespace dpopd {

enum class Divergence {
  /// (1-beta) KL(p_T||p_S) + beta KL(p_S||p_T)
  kLinearKl,
  /// beta KL(p_T||M) + (1-beta) KL(p_S||M), M = beta p_T + (1-beta) p_S
  kGeneralizedJsd,
};

inline std::string to_string(Divergence d) {
  return d == Divergence::kLinearKl ? "linear-kl" : "generalized-jsd";
}

inline Divergence divergence_from_string(const std::string& s) {
  if (s == "linear-kl") return Divergence::kLinearKl;
  if (s == "generalized-jsd") return Divergence::kGeneralizedJsd;
  throw std::invalid_argument("unknown divergence family \"" + s + "\"");
}

struct DistillConfig {
  double beta = 0.5;
  double tau_d = 1.0;
  Divergence family = Divergence::kLinearKl;
  /// Hard-label weight. Where a reference token exists the per-token loss is
  /// (1 - gamma) * divergence + gamma * CE.
  double gamma = 0.0;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("distill: beta must be in [0, 1]");
    if (!(tau_d > 0.0) || !std::isfinite(tau_d)) throw std::invalid_argument("distill: tau_d must be > 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("distill: gamma must be in [0, 1]");
  }
};

struct TokenLoss {
  double loss = 0.0;
  Vector grad;  // d loss / d z_S
};

namespace detail {

// Pulls a gradient with respect to p_S back through softmax(z / tau).
inline void softmax_pullback(const Vector& p_s, const Vector& grad_p, double tau, Vector& grad_z) {
  double dot = 0.0;
  for (std::size_t v = 0; v < p_s.size(); ++v) dot += p_s[v] * grad_p[v];
  grad_z.resize(p_s.size());
  for (std::size_t v = 0; v < p_s.size(); ++v) grad_z[v] = p_s[v] * (grad_p[v] - dot) / tau;
}

}  // namespace detail

/// Per-token divergence between p_S = softmax(z_S / tau_d) and p_T = exp(log_p_T).
/// No tau_d^2 rescaling is applied.
inline TokenLoss gkd_token_loss(std::span<const double> z_s, std::span<const double> log_p_t,
                                const DistillConfig& config) {
  config.validate();
  if (z_s.size() != log_p_t.size()) throw std::invalid_argument("gkd_token_loss: length mismatch");
  const std::size_t V = z_s.size();
  const double beta = config.beta;
  const double tau = config.tau_d;
  const Vector log_p_s = log_softmax(z_s, tau);
  const Vector p_s = softmax_with_temperature(z_s, tau);
  const Vector p_t = exp_of(log_p_t);

  TokenLoss out;
  out.grad.assign(V, 0.0);
  if (config.family == Divergence::kLinearKl) {
    const double forward = kl_divergence(p_t, log_p_s);
    const double reverse = kl_divergence(p_s, log_p_t);
    out.loss = (1.0 - beta) * forward + beta * reverse;
    // Closed form: (1/tau) [(1-beta)(p_S - p_T) + beta p_S (log p_S - log p_T - KL(p_S||p_T))].
    for (std::size_t v = 0; v < V; ++v) {
      const double rev = p_s[v] > 0.0 ? p_s[v] * (log_p_s[v] - log_p_t[v] - reverse) : 0.0;
      out.grad[v] = ((1.0 - beta) * (p_s[v] - p_t[v]) + beta * rev) / tau;
    }
    return out;
  }

  // Generalized JSD. Both endpoints vanish identically.
  if (beta == 0.0 || beta == 1.0) return out;
  const double log_b = std::log(beta);
  const double log_1mb = std::log1p(-beta);
  Vector log_m(V), p_m(V);
  for (std::size_t v = 0; v < V; ++v) {
    const double a = log_b + log_p_t[v];
    const double b = log_1mb + log_p_s[v];
    const double hi = std::max(a, b);
    log_m[v] = hi + std::log1p(std::exp(std::min(a, b) - hi));
  }
  out.loss = beta * kl_divergence(p_t, log_m) + (1.0 - beta) * kl_divergence(p_s, log_m);
  // d loss / d p_S(v) = (1-beta)(log p_S(v) - log M(v)); the remaining terms
  // cancel because M is linear in p_S.
  Vector grad_p(V);
  for (std::size_t v = 0; v < V; ++v) grad_p[v] = (1.0 - beta) * (log_p_s[v] - log_m[v]);
  detail::softmax_pullback(p_s, grad_p, tau, out.grad);
  return out;
}

/// Cross-entropy -log p_S(target) with p_S = softmax(z / tau), and its gradient.
inline TokenLoss cross_entropy(std::span<const double> z_s, Token target, double tau) {
  const Vector log_p = log_softmax(z_s, tau);
  if (target < 0 || static_cast<std::size_t>(target) >= z_s.size()) {
    throw std::invalid_argument("cross_entropy: target outside vocabulary");
  }
  TokenLoss out;
  out.loss = -log_p[static_cast<std::size_t>(target)];
  out.grad.resize(z_s.size());
  for (std::size_t v = 0; v < z_s.size(); ++v) out.grad[v] = std::exp(log_p[v]) / tau;
  out.grad[static_cast<std::size_t>(target)] -= 1.0 / tau;
  return out;
}

struct SequenceLoss {
  /// Mean over masked-in positions.
  double loss = 0.0;
  /// Per-position gradient of the per-token loss (not divided by the number
  /// of positions; per_example_grad applies the mean). Zero vectors at
  /// masked-out positions.
  std::vector<Vector> grad;
  std::size_t positions = 0;
};

/// Loss over one sequence. `z_s[t]` and `log_p_t[t]` are read only where
/// mask[t] holds. `reference[t]` is the hard label at t if any; where it is
/// present the token loss is (1-gamma) GKD + gamma CE.
inline SequenceLoss sequence_loss(std::span<const Vector> z_s, std::span<const Vector> log_p_t,
                                  const std::vector<bool>& mask,
                                  std::span<const std::optional<Token>> reference,
                                  const DistillConfig& config) {
  config.validate();
  const std::size_t n = mask.size();
  if (z_s.size() != n || log_p_t.size() != n || (!reference.empty() && reference.size() != n)) {
    throw std::invalid_argument("sequence_loss: per-position inputs must match the mask length");
  }
  SequenceLoss out;
  out.grad.resize(n);
  double total = 0.0;
  std::size_t vocab = 0;
  for (std::size_t t = 0; t < n; ++t) {
    if (!mask[t]) continue;
    vocab = z_s[t].size();
    ++out.positions;
    const bool hard = !reference.empty() && reference[t].has_value() && config.gamma > 0.0;
    TokenLoss tl;
    if (hard && config.gamma == 1.0) {
      tl = cross_entropy(z_s[t], *reference[t], config.tau_d);
    } else {
      tl = gkd_token_loss(z_s[t], log_p_t[t], config);
      if (hard) {
        const TokenLoss ce = cross_entropy(z_s[t], *reference[t], config.tau_d);
        tl.loss = (1.0 - config.gamma) * tl.loss + config.gamma * ce.loss;
        for (std::size_t v = 0; v < tl.grad.size(); ++v) {
          tl.grad[v] = (1.0 - config.gamma) * tl.grad[v] + config.gamma * ce.grad[v];
        }
      }
    }
    total += tl.loss;
    out.grad[t] = std::move(tl.grad);
  }
  for (std::size_t t = 0; t < n; ++t) {
    if (!mask[t]) out.grad[t].assign(vocab, 0.0);
  }
  out.loss = out.positions ? total / static_cast<double>(out.positions) : 0.0;
  return out;
}

/// Max relative error between the analytic gradient and central differences
/// (step 1e-6) over coordinates with |grad| > 1e-8, on random
/// (z_S, p_T, beta, tau_d). Only `config.family` is taken from `config`.
inline double grad_check_distill(const DistillConfig& config, int trials, std::uint64_t seed = 7,
                                 std::size_t vocab = 8) {
  if (trials < 1) throw std::invalid_argument("grad_check_distill: trials must be >= 1");
  RngStream rng(seed, "grad-check-distill");
  constexpr double kStep = 1e-6;
  // Central differences at this step carry ~1e-10 of round-off, so entries
  // smaller than the floor are compared on an absolute scale.
  constexpr double kRelFloor = 1e-4;
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    DistillConfig c = config;
    c.beta = rng.uniform();
    c.tau_d = 0.5 + 1.5 * rng.uniform();
    Vector z(vocab), zt(vocab);
    for (double& x : z) x = 2.0 * rng.normal();
    for (double& x : zt) x = 2.0 * rng.normal();
    const Vector log_p_t = log_softmax(zt, 1.0);
    const TokenLoss analytic = gkd_token_loss(z, log_p_t, c);
    for (std::size_t v = 0; v < vocab; ++v) {
      Vector zp = z, zm = z;
      zp[v] += kStep;
      zm[v] -= kStep;
      const double numeric =
          (gkd_token_loss(zp, log_p_t, c).loss - gkd_token_loss(zm, log_p_t, c).loss) / (2.0 * kStep);
      const double scale = std::max({std::abs(analytic.grad[v]), std::abs(numeric), kRelFloor});
      worst = std::max(worst, std::abs(numeric - analytic.grad[v]) / scale);
    }
  }
  return worst;
}

}  // namespace dpopd

#endif  // DPOPD_DISTILL_HPP_
