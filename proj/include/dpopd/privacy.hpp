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

// DP-SGD mechanism: Poisson subsampling, per-example clipping, Gaussian
// noising and the parameter update
//
//   g~ = (1/B) sum_i clip_C(g_i) + (1/B) N(0, sigma^2 C^2 I),  theta <- theta - eta g~
//
// where B = qN is the expected lot size.

#ifndef DPOPD_PRIVACY_HPP_
#define DPOPD_PRIVACY_HPP_

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpopd/model.hpp"
#include "dpopd/nn_core.hpp"
#include "dpopd/rng.hpp"

namespace dpopd {

/// Raised when a caller breaks a mechanism precondition that privacy relies on.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct DpConfig {
  double clip_norm = 1.0;         // C
  double noise_multiplier = 1.0;  // sigma
  double sampling_rate = 0.01;    // q = B / N
  std::size_t num_records = 0;    // N
  double learning_rate = 1e-4;    // eta
  std::size_t steps = 0;          // U
  std::uint64_t seed = 0;
  /// sigma == 0 is only accepted when this is set.
  bool non_private = false;

  double expected_batch() const { return sampling_rate * static_cast<double>(num_records); }

  void validate() const {
    if (!(clip_norm > 0.0)) throw std::invalid_argument("dp: clip norm C must be > 0");
    if (!(noise_multiplier >= 0.0)) throw std::invalid_argument("dp: noise multiplier must be >= 0");
    if (noise_multiplier == 0.0 && !non_private) {
      throw std::invalid_argument("dp: sigma = 0 requires explicit non-private mode");
    }
    if (!(sampling_rate > 0.0 && sampling_rate <= 1.0)) throw std::invalid_argument("dp: q must be in (0, 1]");
    if (num_records == 0) throw std::invalid_argument("dp: N must be >= 1");
    if (!(learning_rate >= 0.0)) throw std::invalid_argument("dp: learning rate must be >= 0");
  }
};

struct NoisedUpdate {
  Vector gradient;  // g~
  std::size_t batch_size = 0;
  std::uint64_t step = 0;
  std::uint64_t noise_counter = 0;
};

/// Each index in [0, N) is kept independently with probability q. One draw
/// per record, in index order.
inline std::vector<std::size_t> poisson_subsample(std::size_t num_records, double q, RngStream& stream) {
  if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("poisson_subsample: q must be in (0, 1]");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < num_records; ++i) {
    if (stream.uniform() < q) out.push_back(i);
  }
  return out;
}

/// g * min(1, C / ||g||).
inline Vector clip_gradient(std::span<const double> g, double clip_norm) {
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_gradient: C must be > 0");
  if (!all_finite(g)) throw std::invalid_argument("clip_gradient: non-finite gradient");
  Vector out(g.begin(), g.end());
  const double norm = l2_norm(g);
  if (norm > clip_norm) {
    const double scale = clip_norm / norm;
    for (double& x : out) x *= scale;
  }
  return out;
}

/// The noise stream for step `step`: draws are addressed by (seed, step), so
/// they do not depend on batch composition or on any other stream.
inline RngStream noise_stream_for_step(std::uint64_t seed, std::uint64_t step, std::size_t dim) {
  RngStream s(seed, streams::kDpNoise);
  s.seek(step * static_cast<std::uint64_t>(dim));
  return s;
}

/// (sum_i g_i + sigma C z) / B with z ~ N(0, I) drawn coordinate by coordinate
/// from `noise`. B is the expected lot size, not the realized one.
inline NoisedUpdate noisy_aggregate(std::span<const Vector> clipped, std::size_t dim,
                                    double expected_batch, double clip_norm, double sigma,
                                    RngStream& noise, std::uint64_t step = 0) {
  if (!(expected_batch > 0.0)) throw std::invalid_argument("noisy_aggregate: lot size must be > 0");
  NoisedUpdate u;
  u.step = step;
  u.batch_size = clipped.size();
  u.noise_counter = noise.counter().second;
  u.gradient.assign(dim, 0.0);
  for (const Vector& g : clipped) {
    if (g.size() != dim) throw std::invalid_argument("noisy_aggregate: gradient dimension mismatch");
    const double n = l2_norm(g);
    if (n > clip_norm + 1e-9) {
      throw ContractViolation("noisy_aggregate: unclipped gradient with norm " + std::to_string(n) +
                              " > C = " + std::to_string(clip_norm));
    }
    for (std::size_t j = 0; j < dim; ++j) u.gradient[j] += g[j];
  }
  if (sigma > 0.0) {
    const double scale = sigma * clip_norm;
    for (std::size_t j = 0; j < dim; ++j) u.gradient[j] += scale * noise.normal();
  }
  const double inv = 1.0 / expected_batch;
  for (double& x : u.gradient) x *= inv;
  return u;
}

/// theta - eta * g~, as a new parameter set.
inline Params dp_sgd_step(const Params& params, const NoisedUpdate& update, double learning_rate) {
  if (update.gradient.size() != params.size()) throw std::invalid_argument("dp_sgd_step: dimension mismatch");
  Vector flat(params.flat().begin(), params.flat().end());
  for (std::size_t j = 0; j < flat.size(); ++j) flat[j] -= learning_rate * update.gradient[j];
  return Params(params.config(), std::move(flat));
}

}  // namespace dpopd

#endif  // DPOPD_PRIVACY_HPP_
