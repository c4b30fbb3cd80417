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

#ifndef DPOPD_RNG_HPP_
#define DPOPD_RNG_HPP_

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <string_view>
#include <utility>

namespace dpopd {

/// 64-bit FNV-1a over raw bytes. Used for stream naming and file integrity
/// hashes; not a cryptographic hash.
inline std::uint64_t fnv1a64(const void* data, std::size_t size,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace detail {

// Philox4x32-10 (Salmon et al., "Parallel random numbers: as easy as 1, 2, 3").
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = std::uint64_t{kMul0} * ctr[0];
    const std::uint64_t p1 = std::uint64_t{kMul1} * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

}  // namespace detail

/// Counter-based random stream. The output at a given position depends only on
/// (seed, identifier, counter), so streams can be replayed, forked and seeked
/// without coordination. One call to any draw method consumes exactly one
/// counter value.
///
/// Satisfies UniformRandomBitGenerator.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::string_view identifier)
      : seed_(seed),
        id_(identifier),
        key_(splitmix64(seed ^ splitmix64(fnv1a64(id_)))) {}

  const std::string& identifier() const { return id_; }
  std::uint64_t seed() const { return seed_; }

  /// 128-bit counter as (high, low); equals the number of draws taken.
  std::pair<std::uint64_t, std::uint64_t> counter() const {
    return {ctr_hi_, ctr_lo_};
  }
  void seek(std::uint64_t lo, std::uint64_t hi = 0) {
    ctr_lo_ = lo;
    ctr_hi_ = hi;
  }

  /// Child stream with an independent key; the parent is not advanced.
  RngStream fork(std::string_view name) const {
    return RngStream(seed_, id_ + "/" + std::string(name),
                     splitmix64(key_ ^ splitmix64(fnv1a64(name))));
  }
  RngStream fork(std::uint64_t index) const {
    return RngStream(seed_, id_ + "/" + std::to_string(index),
                     splitmix64(key_ + 0x9e3779b97f4a7c15ULL * (index + 1)));
  }

  /// Two 64-bit words from one counter position.
  std::array<std::uint64_t, 2> next_block() {
    const std::array<std::uint32_t, 4> ctr = {
        static_cast<std::uint32_t>(ctr_lo_), static_cast<std::uint32_t>(ctr_lo_ >> 32),
        static_cast<std::uint32_t>(ctr_hi_), static_cast<std::uint32_t>(ctr_hi_ >> 32)};
    const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(key_),
                                              static_cast<std::uint32_t>(key_ >> 32)};
    const auto out = detail::philox4x32(ctr, key);
    if (++ctr_lo_ == 0) ++ctr_hi_;
    return {(std::uint64_t{out[1]} << 32) | out[0], (std::uint64_t{out[3]} << 32) | out[2]};
  }

  result_type operator()() { return next_block()[0]; }
  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller on one block.
  double normal() {
    const auto block = next_block();
    // (0, 1] keeps the log finite.
    const double u1 = (static_cast<double>(block[0] >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = static_cast<double>(block[1] >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Gamma(shape, 1) by Marsaglia-Tsang; consumes a variable number of draws.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      const double u = (static_cast<double>((*this)() >> 11) + 1.0) * 0x1.0p-53;
      return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

 private:
  RngStream(std::uint64_t seed, std::string identifier, std::uint64_t key)
      : seed_(seed), id_(std::move(identifier)), key_(key) {}

  std::uint64_t seed_;
  std::string id_;
  std::uint64_t key_;
  std::uint64_t ctr_lo_ = 0;
  std::uint64_t ctr_hi_ = 0;
};

/// Stream names shared across modules.
namespace streams {
inline constexpr std::string_view kDpNoise = "dp-noise";
inline constexpr std::string_view kSubsample = "subsample";
inline constexpr std::string_view kRollout = "rollout";
inline constexpr std::string_view kInit = "init";
inline constexpr std::string_view kData = "data";
inline constexpr std::string_view kBranch = "branch";
inline constexpr std::string_view kChain = "chain";
inline constexpr std::string_view kEval = "eval";
}  // namespace streams

}  // namespace dpopd

#endif  // DPOPD_RNG_HPP_
