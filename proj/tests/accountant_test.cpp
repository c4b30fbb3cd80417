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

#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "dpopd/accountant.hpp"
#include "oracles.hpp"

namespace dpopd {
namespace {

TEST(RdpStep, FullSamplingOrderTwoIsExact) {
  const auto v = rdp_step(1.0, 1.0, 2);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(*v, 1.0);
}

TEST(RdpStep, FullSamplingMatchesGaussianClosedForm) {
  for (double sigma : {0.5, 1.0, 3.0, 20.0}) {
    for (int a : {2, 3, 10, 64, 256}) {
      const double want = a / (2.0 * sigma * sigma);
      EXPECT_NEAR(*rdp_step(1.0, sigma, a), want, 1e-9 * want) << sigma << " " << a;
    }
  }
}

TEST(RdpStep, VanishesAsRateGoesToZero) { EXPECT_LE(*rdp_step(1e-12, 1.0, 8), 1e-12); }

TEST(RdpStep, AgreesWithDirectBinomialSum) {
  for (double q : {0.005, 0.01, 0.05, 0.3}) {
    for (double sigma : {0.8, 1.0, 2.0}) {
      for (int a : {2, 3, 5, 16, 32}) {
        const double want = oracle::subsampled_rdp_direct(q, sigma, a);
        EXPECT_NEAR(*rdp_step(q, sigma, a), want, 1e-9 * std::max(want, 1e-12)) << q << " " << sigma << " " << a;
      }
    }
  }
}

TEST(RdpStep, IncreasesWithOrder) { EXPECT_GE(*rdp_step(0.01, 1.0, 3), *rdp_step(0.01, 1.0, 2)); }

TEST(RdpStep, FiniteOverSupportedRange) {
  for (double sigma : {0.3, 1.0, 200.0}) {
    for (double q : {1e-6, 0.01, 0.5, 1.0}) {
      for (int a : {2, 100, 256}) {
        const auto v = rdp_step(q, sigma, a);
        ASSERT_TRUE(v.has_value());
        EXPECT_TRUE(std::isfinite(*v)) << sigma << " " << q << " " << a;
        EXPECT_GE(*v, 0.0);
      }
    }
  }
}

TEST(RdpStep, ZeroNoiseIsNonPrivateNotError) {
  EXPECT_FALSE(rdp_step(0.01, 0.0, 2).has_value());
  const EpsilonResult e = account(0.01, 0.0, 10, 1e-5);
  EXPECT_TRUE(e.non_private);
  EXPECT_TRUE(std::isinf(e.epsilon));
}

TEST(RdpStep, RejectsBadArguments) {
  EXPECT_THROW(rdp_step(0.0, 1.0, 2), std::invalid_argument);
  EXPECT_THROW(rdp_step(0.1, 1.0, 1), std::invalid_argument);
  EXPECT_THROW(rdp_step(0.1, -1.0, 2), std::invalid_argument);
}

TEST(Compose, ZeroStepsIsIdentity) {
  const PrivacyLedger l(0.01, 1.0, 1e-5);
  const PrivacyLedger c = compose(l, 0);
  EXPECT_EQ(c.curve.values, l.curve.values);
  EXPECT_EQ(c.curve.steps, 0u);
}

TEST(Compose, Additive) {
  const PrivacyLedger l(0.02, 1.3, 1e-5);
  const PrivacyLedger ab = compose(compose(l, 300), 700);
  const PrivacyLedger direct = compose(l, 1000);
  EXPECT_EQ(ab.curve.steps, 1000u);
  for (std::size_t i = 0; i < ab.curve.values.size(); ++i) {
    EXPECT_NEAR(ab.curve.values[i], direct.curve.values[i], 1e-12 * std::max(1.0, direct.curve.values[i]));
  }
}

TEST(Compose, FullSamplingClosedForm) {
  const double sigma = 2.0;
  const PrivacyLedger l = compose(PrivacyLedger(1.0, sigma, 1e-5), 50);
  for (std::size_t i = 0; i < l.curve.orders.size(); ++i) {
    const double want = 50.0 * l.curve.orders[i] / (2.0 * sigma * sigma);
    EXPECT_NEAR(l.curve.values[i], want, 1e-9 * want);
  }
}

TEST(EpsilonAt, ZeroCurveUsesLargestOrder) {
  const RdpCurve zero;
  const EpsilonResult e = epsilon_at(zero, 1e-5);
  EXPECT_DOUBLE_EQ(e.epsilon, std::log(1e5) / (kMaxOrder - 1.0));
  EXPECT_EQ(e.best_alpha, kMaxOrder);
}

TEST(EpsilonAt, NonincreasingInDelta) {
  const PrivacyLedger l = compose(PrivacyLedger(0.01, 1.0, 1e-5), 1000);
  EXPECT_GE(epsilon_at(l, 1e-5).epsilon, epsilon_at(l, 1e-3).epsilon);
}

TEST(EpsilonAt, FullSamplingMatchesGaussianOracle) {
  for (double sigma : {1.0, 5.0, 30.0}) {
    for (std::uint64_t steps : {1u, 100u, 2000u}) {
      const double want = oracle::gaussian_epsilon(sigma, steps, 1e-5);
      EXPECT_NEAR(account(1.0, sigma, steps, 1e-5).epsilon, want, 1e-9 * want);
    }
  }
}

TEST(EpsilonAt, IntegerOrdersCloseToFineGridMinimum) {
  const double sigma = 5.0, delta = 1e-5;
  const std::uint64_t steps = 100;
  double fine = std::numeric_limits<double>::infinity();
  for (int k = 11; k <= 2560; ++k) {
    const double a = k / 10.0;
    fine = std::min(fine, steps * a / (2.0 * sigma * sigma) + std::log(1.0 / delta) / (a - 1.0));
  }
  const double got = account(1.0, sigma, steps, delta).epsilon;
  EXPECT_GE(got, fine - 1e-12);
  EXPECT_LE(got, 1.02 * fine);
}

TEST(EpsilonAt, MonotoneOverGrid) {
  const double delta = 1e-5;
  const double qs[] = {0.005, 0.01, 0.05};
  const double sigmas[] = {0.8, 1.0, 2.0};
  const std::uint64_t us[] = {100, 1000};
  auto eps = [&](int qi, int si, int ui) { return account(qs[qi], sigmas[si], us[ui], delta).epsilon; };
  for (int qi = 0; qi < 3; ++qi) {
    for (int si = 0; si < 3; ++si) {
      for (int ui = 0; ui < 2; ++ui) {
        const double e = eps(qi, si, ui);
        EXPECT_TRUE(std::isfinite(e));
        if (ui + 1 < 2) { EXPECT_LE(e, eps(qi, si, ui + 1)); }
        if (qi + 1 < 3) { EXPECT_LE(e, eps(qi + 1, si, ui)); }
        if (si + 1 < 3) { EXPECT_GE(e, eps(qi, si + 1, ui)); }
      }
    }
  }
}

TEST(EpsilonAt, IndependentOfAnythingButMechanismParameters) {
  const EpsilonResult a = account(0.01, 1.2, 2000, 1.0 / 2000);
  const PrivacyLedger stepped = [] {
    PrivacyLedger l(0.01, 1.2, 1.0 / 2000);
    for (int u = 0; u < 2000; ++u) l = compose(l, 1);
    return l;
  }();
  const EpsilonResult b = epsilon_at(stepped);
  EXPECT_NEAR(a.epsilon, b.epsilon, 1e-9 * a.epsilon);
  EXPECT_EQ(a.best_alpha, b.best_alpha);
}

TEST(Calibrate, RoundTripWithinHalfPercentBelowTarget) {
  const double delta = 1.0 / 2000;
  for (double target : {0.5, 2.0, 8.0}) {
    const CalibrationResult c = calibrate_sigma(0.01, 2000, target, delta);
    EXPECT_FALSE(c.at_lower_bound);
    const double eps = account(0.01, c.sigma, 2000, delta).epsilon;
    EXPECT_LE(eps, target) << target;
    EXPECT_GE(eps, 0.99 * target) << target;
    EXPECT_DOUBLE_EQ(eps, c.epsilon);
  }
}

TEST(Calibrate, MoreStepsNeedMoreNoise) {
  const double a = calibrate_sigma(0.01, 1000, 2.0, 1e-5).sigma;
  const double b = calibrate_sigma(0.01, 2000, 2.0, 1e-5).sigma;
  EXPECT_GT(b, a);
}

TEST(Calibrate, HugeBudgetStopsAtLowerBound) {
  const CalibrationResult c = calibrate_sigma(0.01, 100, 1e6, 1e-5);
  EXPECT_TRUE(c.at_lower_bound);
  EXPECT_EQ(c.sigma, kSigmaLow);
}

TEST(Calibrate, UnattainableBudgetThrows) {
  EXPECT_THROW(calibrate_sigma(1.0, 100000, 1e-3, 1e-5), std::invalid_argument);
  EXPECT_THROW(calibrate_sigma(0.01, 100, 0.0, 1e-5), std::invalid_argument);
}

}  // namespace
}  // namespace dpopd
