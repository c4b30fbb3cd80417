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

// Reference computations for tests. Written independently of the library:
// long-double direct sums, no shared helpers beyond the data structures.

#ifndef DPOPD_TESTS_ORACLES_HPP_
#define DPOPD_TESTS_ORACLES_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

#include "dpopd/data.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline Vec softmax(const Vec& z, double tau = 1.0) {
  long double hi = -std::numeric_limits<long double>::infinity();
  for (double x : z) hi = std::max<long double>(hi, x / tau);
  long double s = 0;
  std::vector<long double> e(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) s += e[i] = std::exp(static_cast<long double>(z[i]) / tau - hi);
  Vec p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) p[i] = static_cast<double>(e[i] / s);
  return p;
}

/// KL(p || q) from probabilities, with 0 log 0 = 0.
inline double kl(const Vec& p, const Vec& q) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0) s += static_cast<long double>(p[i]) * std::log(static_cast<long double>(p[i]) / q[i]);
  }
  return static_cast<double>(s);
}

/// Classical Jensen-Shannon divergence with the equal-weight mixture.
inline double jsd(const Vec& p, const Vec& q) {
  Vec m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return 0.5 * kl(p, m) + 0.5 * kl(q, m);
}

/// Central finite differences of f at x.
inline Vec fd_gradient(const std::function<double(const Vec&)>& f, Vec x, double h) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor).
inline double max_rel_error(const Vec& a, const Vec& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / den);
  }
  return worst;
}

/// Unsubsampled Gaussian mechanism: RDP(alpha) = alpha / (2 sigma^2) per step.
inline double gaussian_epsilon(double sigma, std::uint64_t steps, double delta) {
  double best = std::numeric_limits<double>::infinity();
  for (int a = 2; a <= 256; ++a) {
    const double rdp = static_cast<double>(steps) * a / (2.0 * sigma * sigma);
    best = std::min(best, rdp + std::log(1.0 / delta) / (a - 1.0));
  }
  return best;
}

/// Subsampled Gaussian per-step RDP by a direct (non-log-space) binomial sum.
/// Only valid where the terms stay in long-double range.
inline double subsampled_rdp_direct(double q, double sigma, int alpha) {
  long double s = 0;
  long double binom = 1;
  for (int j = 0; j <= alpha; ++j) {
    if (j > 0) binom = binom * (alpha - j + 1) / j;
    s += binom * std::pow(static_cast<long double>(1 - q), alpha - j) * std::pow(static_cast<long double>(q), j) *
         std::exp(static_cast<long double>(j) * (j - 1) / (2.0L * sigma * sigma));
  }
  return static_cast<double>(std::log(s) / (alpha - 1));
}

/// exp of the mean -log P(token | true code, true history) over continuation
/// tokens, read straight from the chain table.
inline double chain_perplexity(const dpopd::MarkovChainSpec& chain, const dpopd::Corpus& corpus) {
  long double nll = 0;
  std::size_t count = 0;
  const int m = chain.order;
  const int content = chain.vocab.num_content();
  for (const auto& ex : corpus.examples) {
    const int code = *ex.control_code - dpopd::Vocab::kFirstCode;
    std::vector<int> history(static_cast<std::size_t>(m), 0);
    std::vector<dpopd::Token> all(ex.prompt);
    all.insert(all.end(), ex.reference.begin(), ex.reference.end());
    for (std::size_t t = 0; t < all.size(); ++t) {
      std::size_t row = 0;
      for (int h : history) row = row * static_cast<std::size_t>(content) + static_cast<std::size_t>(h);
      row += static_cast<std::size_t>(code) * static_cast<std::size_t>(std::pow(content, m));
      const int outcome = all[t] == dpopd::Vocab::kEos ? content : all[t] - (dpopd::Vocab::kFirstCode + chain.vocab.num_codes);
      const double p = chain.table[row * static_cast<std::size_t>(content + 1) + static_cast<std::size_t>(outcome)];
      if (t >= ex.prompt.size()) {
        nll -= std::log(static_cast<long double>(p));
        ++count;
      }
      if (outcome == content) break;
      history.erase(history.begin());
      history.push_back(outcome);
    }
  }
  return static_cast<double>(std::exp(nll / count));
}

}  // namespace oracle

#endif  // DPOPD_TESTS_ORACLES_HPP_
