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

// Numeric kernels shared by the model, the loss and the DP mechanism. All
// arithmetic is double precision.

#ifndef DPOPD_NN_CORE_HPP_
#define DPOPD_NN_CORE_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpopd/rng.hpp"

namespace dpopd {

using Vector = std::vector<double>;
using Token = int;
using TokenSeq = std::vector<Token>;

/// Row-major dense matrix with fixed dimensions.
class Matrix {
 public:
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> data() const { return data_; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  Vector data_;
};

namespace detail {
inline void require_positive_tau(double tau) {
  if (!(tau > 0.0) || !std::isfinite(tau)) {
    throw std::invalid_argument("temperature must be positive and finite, got " +
                                std::to_string(tau));
  }
}
}  // namespace detail

/// log(sum(exp(x))) with max shift. Returns -inf for an empty span.
inline double log_sum_exp(std::span<const double> x) {
  if (x.empty()) return -std::numeric_limits<double>::infinity();
  const double m = *std::max_element(x.begin(), x.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

/// softmax(logits / tau), max-shifted.
inline Vector softmax_with_temperature(std::span<const double> logits, double tau) {
  detail::require_positive_tau(tau);
  Vector out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    out[v] = std::exp((logits[v] - m) / tau);
    s += out[v];
  }
  for (double& p : out) p /= s;
  return out;
}

/// log softmax(logits / tau) via log-sum-exp.
inline Vector log_softmax(std::span<const double> logits, double tau) {
  detail::require_positive_tau(tau);
  Vector out(logits.size());
  if (logits.empty()) return out;
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t v = 0; v < logits.size(); ++v) {
    out[v] = (logits[v] - m) / tau;
    s += std::exp(out[v]);
  }
  const double lse = std::log(s);
  for (double& x : out) x -= lse;
  return out;
}

/// KL(p || q) = sum_v p(v) (log p(v) - log q(v)), with 0 log 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> log_q) {
  if (p.size() != log_q.size()) {
    throw std::invalid_argument("kl_divergence: length mismatch (" + std::to_string(p.size()) +
                                " vs " + std::to_string(log_q.size()) + ")");
  }
  double kl = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) {
    if (p[v] > 0.0) kl += p[v] * (std::log(p[v]) - log_q[v]);
  }
  return kl;
}

inline double l2_norm(std::span<const double> v) {
  // Scaled accumulation; gradients can be large before clipping.
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) return 0.0;
  double s = 0.0;
  for (double x : v) {
    const double y = x / scale;
    s += y * y;
  }
  return scale * std::sqrt(s);
}

/// Inverse-CDF sample over the given index order. Consumes exactly one draw.
inline std::size_t sample_categorical(std::span<const double> p, RngStream& stream) {
  for (double x : p) {
    if (x < -1e-12 || !std::isfinite(x)) {
      throw std::invalid_argument("sample_categorical: invalid probability entry " +
                                  std::to_string(x));
    }
  }
  if (p.empty()) throw std::invalid_argument("sample_categorical: empty distribution");
  const double u = stream.uniform();
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last_positive = i;
    cum += p[i];
    if (u < cum) return i;
  }
  // Rounding left u above the final cumulative mass.
  return last_positive;
}

/// Log-probabilities of an externally supplied distribution: entries are
/// floored at `floor` and renormalized so the result is finite everywhere.
inline Vector floored_log_probs(std::span<const double> p, double floor = 1e-12) {
  Vector out(p.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    out[i] = std::max(p[i], floor);
    s += out[i];
  }
  for (double& x : out) x = std::log(x / s);
  return out;
}

inline Vector exp_of(std::span<const double> log_p) {
  Vector out(log_p.size());
  std::transform(log_p.begin(), log_p.end(), out.begin(), [](double x) { return std::exp(x); });
  return out;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace dpopd

#endif  // DPOPD_NN_CORE_HPP_
