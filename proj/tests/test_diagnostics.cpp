#include <gtest/gtest.h>

#include <vector>

#include "qsgld/diagnostics.hpp"

using namespace qsgld;

namespace {

std::vector<QuantizationErrorSample> uniform_samples(std::size_t n, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<QuantizationErrorSample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].epsilon_factor = rng.uniform(-0.5, 0.5);
    out[i].qp = 10;
    out[i].step_index = static_cast<std::int64_t>(i);
  }
  return out;
}

} // namespace

TEST(WnhTest, UniformFactorsPass) {
  const auto r = wnh_test(uniform_samples(100000, 1));
  EXPECT_TRUE(r.pass);
  EXPECT_GE(r.var_ratio, 0.98);
  EXPECT_LE(r.var_ratio, 1.02);
  EXPECT_EQ(r.n, 100000u);
}

TEST(WnhTest, RealizedErrorsAtOneQpPass) {
  WnhThresholds th;
  th.normalized = false;
  EXPECT_TRUE(wnh_test(uniform_samples(100000, 2), th).pass);
}

TEST(WnhTest, ZerosFail) {
  std::vector<QuantizationErrorSample> zeros(5000);
  const auto r = wnh_test(zeros);
  EXPECT_FALSE(r.pass);
  EXPECT_DOUBLE_EQ(r.uniform_ks, 0.5);
}

TEST(WnhTest, CorrelatedSeriesFails) {
  auto s = uniform_samples(100000, 3);
  for (std::size_t i = 1; i < s.size(); i += 2) {
    s[i].epsilon_factor = s[i - 1].epsilon_factor;
  }
  const auto r = wnh_test(s);
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.lag1_autocorr, 0.3);
}

TEST(WnhTest, MixedQpRealizedIsUsageError) {
  auto s = uniform_samples(2000, 4);
  s[5].qp = 20;
  WnhThresholds th;
  th.normalized = false;
  EXPECT_THROW(wnh_test(s, th), UsageError);
}

TEST(WnhTest, TooFewSamplesAfterBurnIn) {
  WnhThresholds th;
  th.min_step = 1500;
  EXPECT_THROW(wnh_test(uniform_samples(2000, 5), th), UsageError);
}

TEST(CorrelationTest, UncompensatedMatchesPrediction) {
  RngStream rng(6);
  const auto pairs = uncompensated_pairs(10, 0, 100000, rng);
  const auto r = correlation_test(pairs, 10, 0, false);
  EXPECT_NEAR(r.predicted, 8.333e-4, 1e-6);
  EXPECT_TRUE(r.pass);
  EXPECT_GT(r.correlation_estimate, 10 * r.stderr_estimate);
}

TEST(CorrelationTest, UncompensatedAtOtherLevel) {
  RngStream rng(7);
  const auto pairs = uncompensated_pairs(10, 3, 100000, rng);
  EXPECT_TRUE(correlation_test(pairs, 10, 3, false).pass);
}

TEST(CorrelationTest, CompensatedIsUncorrelated) {
  RngStream rng(8);
  const auto pairs = compensated_pairs(10, 0, 100000, 0.2, rng);
  const auto r = correlation_test(pairs, 10, 0, true);
  EXPECT_EQ(r.predicted, 0.0);
  EXPECT_TRUE(r.pass);
}

TEST(CorrelationTest, DitheredIsUncorrelated) {
  RngStream rng(9);
  const auto pairs = dithered_pairs(10, 0, 100000, rng);
  EXPECT_TRUE(correlation_test(pairs, 10, 0, true).pass);
}

TEST(CorrelationTest, UncompensatedPairsFailZeroPrediction) {
  RngStream rng(10);
  const auto pairs = uncompensated_pairs(10, 0, 100000, rng);
  EXPECT_FALSE(correlation_test(pairs, 10, 0, true).pass);
}

TEST(CorrelationTest, TooFewPairsIsUsageError) {
  RngStream rng(11);
  const auto pairs = uncompensated_pairs(10, 0, 9999, rng);
  EXPECT_THROW(correlation_test(pairs, 10, 0, false), UsageError);
}

TEST(CorrelationTest, CompensatedNeedsIntegerLambdaQp) {
  RngStream rng(12);
  EXPECT_THROW(compensated_pairs(10, 0, 10, 0.15, rng), UsageError);
}

TEST(CltTest, LargeBatchPasses) {
  RngStream rng(13);
  const auto sums = synthetic_epoch_sums(256, 10000, rng);
  const auto r = clt_test(sums, 256);
  EXPECT_TRUE(r.pass);
  EXPECT_LT(r.ks_vs_normal, 0.02);
  EXPECT_FALSE(r.regime_warning);
}

TEST(CltTest, SingleBatchFails) {
  RngStream rng(14);
  const auto sums = synthetic_epoch_sums(1, 10000, rng);
  const auto r = clt_test(sums, 1);
  EXPECT_FALSE(r.pass);
  EXPECT_TRUE(r.regime_warning);
  EXPECT_GT(r.ks_vs_normal, 0.04);
}

TEST(CltTest, ZeroSumsFail) {
  const std::vector<double> zeros(2000, 0.0);
  EXPECT_FALSE(clt_test(zeros, 64).pass);
}

TEST(CltTest, TooFewSumsIsUsageError) {
  const std::vector<double> few(999, 0.0);
  EXPECT_THROW(clt_test(few, 64), UsageError);
}

TEST(ParalysisProbe, UncompensatedAlwaysStuck) {
  EXPECT_EQ(paralysis_probe(10, 0.01, 1.0, false), 1.0);
}

TEST(ParalysisProbe, CompensatedEscapes) {
  EXPECT_LT(paralysis_probe(10, 0.2, 0.2, true), 0.05);
}

TEST(ParalysisProbe, ZeroGradientStaysPut) {
  EXPECT_EQ(paralysis_probe(10, 0.2, 0.0, true), 1.0);
}

TEST(ParalysisProbe, OutsideRegimeIsUsageError) {
  EXPECT_THROW(paralysis_probe(10, 0.1, 1.0, false), UsageError);
}
