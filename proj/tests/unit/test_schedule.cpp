#include <gtest/gtest.h>

#include <cmath>

#include "bld/schedule.hpp"
#include "support.hpp"

namespace bld {
namespace {

// Reference formulas evaluated in double precision, one element at a time.
double ref_alpha_bar(const std::vector<float>& betas, int t) {
  if (t < 0) return 1.0;
  double p = 1.0;
  for (int s = 0; s <= t; ++s) p *= 1.0 - static_cast<double>(betas[static_cast<std::size_t>(s)]);
  return p;
}
double ref_noise(double ab, double z0, double e) { return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * e; }
double ref_z0(double ab, double zt, double e) { return (zt - std::sqrt(1.0 - ab) * e) / std::sqrt(ab); }
double ref_step(double ab, double ab_next, double zt, double e) {
  return std::sqrt(ab_next) * ref_z0(ab, zt, e) + std::sqrt(1.0 - ab_next) * e;
}

TEST(Schedule, HandComputedCumulativeProduct) {
  const auto s = make_schedule_from_betas({0.1f, 0.2f, 0.3f, 0.4f}, 4);
  const double expected[] = {0.9, 0.72, 0.504, 0.3024};
  for (int t = 0; t < 4; ++t) EXPECT_NEAR(s.alpha_bars[t], expected[t], 1e-6) << "t=" << t;
  EXPECT_EQ(s.sampler_steps, (std::vector<int>{3, 2, 1, 0}));
}

TEST(Schedule, FullStrideVisitsEveryStep) {
  const auto s = make_schedule(1000, 1000);
  ASSERT_EQ(s.sampler_steps.size(), 1000u);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(s.sampler_steps[i], 999 - i);
}

TEST(Schedule, FiftyStepsRunFromLastToZero) {
  for (auto kind : {BetaSchedule::linear, BetaSchedule::cosine}) {
    const auto s = make_schedule(1000, 50, kind);
    ASSERT_EQ(s.sampler_steps.size(), 50u);
    EXPECT_EQ(s.sampler_steps.front(), 999);
    EXPECT_EQ(s.sampler_steps.back(), 0);
    EXPECT_NO_THROW(validate(s));
  }
}

TEST(Schedule, InvariantsHoldAcrossStrides) {
  for (auto kind : {BetaSchedule::linear, BetaSchedule::cosine})
    for (int k : {1, 2, 3, 7, 49, 50, 333, 999}) {
      const auto s = make_schedule(1000, k, kind);
      EXPECT_EQ(s.num_sampler_steps(), k);
      EXPECT_EQ(s.sampler_steps.front(), 999);
      for (std::size_t i = 1; i < s.sampler_steps.size(); ++i) EXPECT_LT(s.sampler_steps[i], s.sampler_steps[i - 1]);
      for (int t = 0; t < 1000; ++t) {
        const double ref = ref_alpha_bar(s.betas, t);
        EXPECT_LE(std::fabs(s.alpha_bars[t] - ref), 1e-6 * ref);
        if (t > 0) EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
      }
    }
}

TEST(Schedule, RejectsBadArguments) {
  EXPECT_THROW(make_schedule(0, 1), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 0), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, -3), std::invalid_argument);
  EXPECT_THROW(make_schedule(10, 11), std::invalid_argument);
  EXPECT_THROW(parse_beta_schedule("quadratic"), std::invalid_argument);
  EXPECT_EQ(parse_beta_schedule("cosine"), BetaSchedule::cosine);
}

TEST(Noise, ZeroNoiseWeightReturnsInput) {
  const auto s = make_schedule(10, 10);
  const Tensor z0 = test::random_tensor({4, 3, 3}, 1);
  const Tensor e = test::random_tensor({4, 3, 3}, 2);
  EXPECT_TRUE(bit_equal(noise(s, z0, kTerminalStep, e), z0));
}

TEST(Noise, ZeroSignalScalesNoise) {
  const auto s = make_schedule(1000, 50);
  const Tensor z0({2, 2, 2}, 0.0f);
  const Tensor e = test::random_tensor({2, 2, 2}, 3);
  const int t = 400;
  const Tensor out = noise(s, z0, t, e);
  const float w = std::sqrt(1.0f - s.alpha_bars[t]);
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_NEAR(out[i], w * e[i], 1e-6);
}

TEST(Noise, HandCaseQuarterAlphaBar) {
  // betas chosen so that alpha_bar at t = 1 is exactly 0.25.
  const auto s = make_schedule_from_betas({0.5f, 0.5f}, 2);
  ASSERT_FLOAT_EQ(s.alpha_bars[1], 0.25f);
  const Tensor out = noise(s, Tensor({2}, {1.0f, 1.0f}), 1, Tensor({2}, {0.0f, 2.0f}));
  EXPECT_NEAR(out[0], 0.5, 1e-6);
  EXPECT_NEAR(out[1], 0.5 + std::sqrt(0.75) * 2.0, 1e-6);
}

TEST(Noise, ShapeMismatchThrows) {
  const auto s = make_schedule(10, 10);
  EXPECT_THROW(noise(s, Tensor({2, 2}), 3, Tensor({4})), ShapeError);
  EXPECT_THROW(estimate_z0(s, Tensor({2, 2}), Tensor({2, 3}), 3), ShapeError);
}

TEST(Noise, VarianceScalesWithOneMinusAlphaBar) {
  const auto s = make_schedule(1000, 50);
  const Tensor z = test::random_tensor({4, 16, 16}, 5);
  const Tensor e = test::random_tensor({4, 16, 16}, 6);
  for (int t : {0, 10, 250, 999}) {
    const Tensor zt = noise(s, z, t, e);
    const double a = std::sqrt(static_cast<double>(s.alpha_bars[t]));
    const double b = std::sqrt(1.0 - s.alpha_bars[t]);
    for (std::size_t i = 0; i < z.size(); ++i) EXPECT_NEAR(zt[i] - a * z[i], b * e[i], 2e-6);
  }
}

TEST(EstimateZ0, InvertsNoiseForEveryStep) {
  const auto s = make_schedule(1000, 50);
  for (int t = 0; t < 1000; ++t) {
    const Tensor z = test::random_tensor({4, 4, 4}, 100 + t);
    const Tensor e = test::random_tensor({4, 4, 4}, 200 + t);
    const Tensor zt = noise(s, z, t, e);
    // Storing z_t in float32 already costs half an ulp, which the division by sqrt(alpha_bar) amplifies.
    float peak = 0.0f;
    for (float v : zt.values()) peak = std::max(peak, std::fabs(v));
    const double floor = 0.5 * std::ldexp(1.0, std::ilogb(peak) - 23) / std::sqrt(s.alpha_bars[t]);
    EXPECT_LE(max_abs_diff(estimate_z0(s, zt, e, t), z), std::max(1e-5, 1.01 * floor + 1e-6)) << "t=" << t;
    if (s.alpha_bars[t] > 0.01f) EXPECT_LT(max_abs_diff(estimate_z0(s, zt, e, t), z), 1e-5f) << "t=" << t;
  }
  const auto small = make_schedule_from_betas({0.1f, 0.2f, 0.3f, 0.4f}, 4);
  for (int t = 0; t < 4; ++t) {
    const Tensor z = test::random_tensor({3, 5}, 7 + t), e = test::random_tensor({3, 5}, 70 + t);
    EXPECT_LT(max_abs_diff(estimate_z0(small, noise(small, z, t, e), e, t), z), 1e-5f);
  }
}

TEST(EstimateZ0, ZeroPredictionDividesBySqrtAlphaBar) {
  const auto s = make_schedule(1000, 50);
  const Tensor zt = test::random_tensor({8}, 9);
  const Tensor out = estimate_z0(s, zt, Tensor({8}), 500);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out[i], zt[i] / std::sqrt(s.alpha_bars[500]), 1e-5);
}

TEST(SamplerStep, TerminalStepReturnsCleanEstimate) {
  const auto s = make_schedule(1000, 50);
  const Tensor zt = test::random_tensor({2, 3, 3}, 1), e = test::random_tensor({2, 3, 3}, 2);
  EXPECT_TRUE(bit_equal(sampler_step(s, zt, e, 20, kTerminalStep), estimate_z0(s, zt, e, 20)));
}

TEST(SamplerStep, TrueNoiseLandsOnNoisedInput) {
  const auto s = make_schedule(1000, 50);
  const Tensor z = test::random_tensor({4, 4, 4}, 3), e = test::random_tensor({4, 4, 4}, 4);
  for (std::size_t i = 0; i < s.sampler_steps.size(); ++i) {
    const int t = s.sampler_steps[i], tn = s.next_step(i);
    EXPECT_LT(max_abs_diff(sampler_step(s, noise(s, z, t, e), e, t, tn), noise(s, z, tn, e)), 1e-5f);
  }
}

TEST(SamplerStep, HandCaseTwoByOneMatchesFormula) {
  const auto s = make_schedule_from_betas({0.1f, 0.2f, 0.3f, 0.4f}, 4);
  const Tensor zt({2, 1}, {0.7f, -1.3f}), e({2, 1}, {0.25f, 0.5f});
  const double ab3 = 0.3024, ab2 = 0.504;
  const Tensor out = sampler_step(s, zt, e, 3, 2);
  EXPECT_NEAR(out[0], ref_step(ab3, ab2, 0.7, 0.25), 1e-6);
  EXPECT_NEAR(out[1], ref_step(ab3, ab2, -1.3, 0.5), 1e-6);
}

TEST(SamplerStep, RejectsNonDecreasingPair) {
  const auto s = make_schedule(100, 10);
  const Tensor z({3}), e({3});
  EXPECT_THROW(sampler_step(s, z, e, 10, 10), std::invalid_argument);
  EXPECT_THROW(sampler_step(s, z, e, 10, 20), std::invalid_argument);
  EXPECT_THROW(sampler_step(s, z, e, 100, 5), std::invalid_argument);
}

TEST(SamplerStep, EtaZeroMatchesDeterministicUpdate) {
  const auto s = make_schedule(1000, 50);
  const Tensor zt = test::random_tensor({2, 4, 4}, 5), e = test::random_tensor({2, 4, 4}, 6);
  std::mt19937_64 rng(1);
  EXPECT_LT(max_abs_diff(sampler_step(s, zt, e, 999, 979, 0.0f, rng), sampler_step(s, zt, e, 999, 979)), 1e-6f);
}

TEST(SamplerStep, EtaOneIsSeededAndStochastic) {
  const auto s = make_schedule(1000, 50);
  const Tensor zt = test::random_tensor({2, 4, 4}, 5), e = test::random_tensor({2, 4, 4}, 6);
  std::mt19937_64 r1(9), r2(9), r3(10);
  const Tensor a = sampler_step(s, zt, e, 500, 480, 1.0f, r1);
  EXPECT_TRUE(bit_equal(a, sampler_step(s, zt, e, 500, 480, 1.0f, r2)));
  EXPECT_FALSE(bit_equal(a, sampler_step(s, zt, e, 500, 480, 1.0f, r3)));
}

TEST(ScheduleOracle, ThousandRandomCases) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> pick_k(1, 100);
  // float32 outputs carry about 7 significant digits, so errors are measured against max(1, |reference|).
  double worst = 0.0;
  const auto err = [](double got, double ref) { return std::fabs(got - ref) / std::max(1.0, std::fabs(ref)); };
  for (int c = 0; c < 1000; ++c) {
    const auto s = make_schedule(1000, pick_k(rng), c % 2 ? BetaSchedule::cosine : BetaSchedule::linear);
    std::uniform_int_distribution<std::size_t> pick_i(0, s.sampler_steps.size() - 1);
    const std::size_t i = pick_i(rng);
    const int t = s.sampler_steps[i], tn = s.next_step(i);
    const Tensor z = Tensor::randn({6}, rng), e = Tensor::randn({6}, rng), e2 = Tensor::randn({6}, rng);
    const double ab = ref_alpha_bar(s.betas, t), abn = ref_alpha_bar(s.betas, tn);
    const Tensor zt = noise(s, z, t, e);
    const Tensor z0 = estimate_z0(s, zt, e2, t);
    const Tensor zn = sampler_step(s, zt, e2, t, tn);
    for (std::size_t j = 0; j < 6; ++j) {
      worst = std::max(worst, err(zt[j], ref_noise(ab, z[j], e[j])));
      worst = std::max(worst, err(z0[j], ref_z0(ab, zt[j], e2[j])));
      worst = std::max(worst, err(zn[j], ref_step(ab, abn, zt[j], e2[j])));
    }
  }
  EXPECT_LT(worst, 1e-5);
}

}  // namespace
}  // namespace bld
