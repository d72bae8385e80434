#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "calpo/robustness.hpp"

namespace {

using calpo::CleanFamily;
using calpo::ContaminationModel;

TEST(CleanFamily, CdfQuantileRoundTrip) {
  for (auto f : {CleanFamily::uniform, CleanFamily::triangular}) {
    EXPECT_NEAR(calpo::clean_cdf(f, 2.0, 0.0), 0.5, 1e-15);
    EXPECT_EQ(calpo::clean_cdf(f, 2.0, -3.0), 0.0);
    EXPECT_EQ(calpo::clean_cdf(f, 2.0, 3.0), 1.0);
    for (double p = 0.05; p < 1.0; p += 0.05) {
      EXPECT_NEAR(calpo::clean_cdf(f, 2.0, calpo::clean_quantile(f, 2.0, p)), p, 1e-12);
    }
  }
  EXPECT_DOUBLE_EQ(calpo::clean_density(CleanFamily::uniform, 1.0, 0.3), 0.5);
  EXPECT_DOUBLE_EQ(calpo::clean_density(CleanFamily::triangular, 1.0, 0.0), 1.0);
}

TEST(SampleSurrogate, NoContaminationStaysInSupport) {
  ContaminationModel m{0.3, 0.0, 50.0, CleanFamily::triangular, 0.5, 3};
  const auto s = calpo::sample_surrogate(m, 10000);
  EXPECT_EQ(s.outliers, 0u);
  for (double v : s.values) {
    EXPECT_GE(v, -0.2);
    EXPECT_LE(v, 0.8);
  }
  EXPECT_EQ(calpo::sample_surrogate(m, 100).values, calpo::sample_surrogate(m, 100).values);
}

TEST(SampleSurrogate, OutlierCountWithinHoeffdingBand) {
  ContaminationModel m{0.0, 0.4999, 10.0, CleanFamily::uniform, 1.0, 4};
  const std::size_t n = 100000;
  const auto s = calpo::sample_surrogate(m, n);
  // P(|K/n - alpha| > t) <= 2 exp(-2 n t^2) = 1e-6
  const double t = std::sqrt(std::log(2.0 / 1e-6) / (2.0 * n));
  EXPECT_NEAR(static_cast<double>(s.outliers) / n, 0.4999, t);
  std::size_t at_outlier = 0;
  for (double v : s.values) at_outlier += v == 10.0;
  EXPECT_EQ(at_outlier, s.outliers);
}

TEST(SampleSurrogate, RejectsInvalidModel) {
  EXPECT_THROW(calpo::sample_surrogate(ContaminationModel{0, 0.5, 1, CleanFamily::uniform, 1, 0}, 10),
               calpo::InvalidInput);
  EXPECT_THROW(calpo::sample_surrogate(ContaminationModel{0, 0.1, 1, CleanFamily::uniform, 0, 0}, 10),
               calpo::InvalidInput);
}

TEST(Median, OddAndEven) {
  EXPECT_EQ(calpo::sample_median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(calpo::sample_median({4.0, 1.0, 3.0, 2.0}), 2.5);
  EXPECT_THROW(calpo::sample_median({}), calpo::InvalidInput);
}

TEST(AnalyticBiases, Examples) {
  ContaminationModel m{0.0, 0.1, 10.0, CleanFamily::uniform, 1.0, 0};
  const auto a = calpo::analytic_biases(m);
  EXPECT_NEAR(a.mean_bias, 1.0, 1e-15);
  EXPECT_NEAR(a.median_offset, 2.0 / 1.8 - 1.0, 1e-15);
  EXPECT_NEAR(a.median_offset, 0.1111111111, 1e-10);
  m.alpha = 0.0;
  const auto b = calpo::analytic_biases(m);
  EXPECT_EQ(b.mean_bias, 0.0);
  EXPECT_NEAR(b.median_offset, 0.0, 1e-15);
  // Triangular: solve (1 - alpha) F0(d) = 1/2 by bisection.
  m = {0.0, 0.2, 5.0, CleanFamily::triangular, 1.0, 0};
  double lo = 0, hi = 1;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (0.8 * calpo::clean_cdf(CleanFamily::triangular, 1.0, mid) < 0.5 ? lo : hi) = mid;
  }
  EXPECT_NEAR(calpo::analytic_biases(m).median_offset, lo, 1e-12);
  m.alpha = 0.5;
  EXPECT_THROW(calpo::analytic_biases(m), calpo::InvalidInput);
}

TEST(ContaminationTheorem, MeansGrowMediansStay) {
  ContaminationModel base{0.0, 0.1, 0.0, CleanFamily::uniform, 1.0, 5};
  const auto rows = calpo::verify_contamination_theorem(base, {0.1}, {10.0, 1000.0}, 100000, {0, 1});
  ASSERT_EQ(rows.size(), 4u);
  const double sd = std::sqrt(0.1 * 0.9 * 1000.0 * 1000.0 / 100000);
  for (const auto& r : rows) {
    EXPECT_NEAR(r.empirical_mean, r.analytic_mean, 4 * sd * r.M / 1000.0 + 0.01);
    EXPECT_NEAR(r.empirical_median, 1.0 / 9.0, 0.05);
  }
  EXPECT_NEAR(rows[2].empirical_mean - rows[0].empirical_mean, 99.0, 5 * sd);
  const auto csv = calpo::contamination_to_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')),
            "alpha,M,B,family,n,seed,empirical_mean,empirical_median,analytic_mean,analytic_median,K");
}

TEST(ContaminationTheorem, NoOffsetMeansNoBias) {
  ContaminationModel m{0.2, 0.25, 0.0, CleanFamily::uniform, 1.0, 6};
  const auto r = calpo::estimate(m, 100000);
  EXPECT_NEAR(r.empirical_mean, 0.2, 3.0 / std::sqrt(100000.0));
  EXPECT_NEAR(r.empirical_median, 0.2, 3.0 / std::sqrt(100000.0));
}

TEST(MedianStability, HoldsForAnyMagnitude) {
  ContaminationModel m{0.0, 0.1, 0.0, CleanFamily::uniform, 1.0, 7};
  const std::size_t n = 10001;
  const auto r = calpo::median_stability(m, n, {0, 1, 3000, 5000}, 1e6);
  EXPECT_EQ(r.checked, 4u);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_LE(r.worst_distance, 1.0);
  EXPECT_THROW(calpo::median_stability(m, n, {5001}, 1e6), calpo::InvalidInput);
}

TEST(Breakdown, MajorityOutliersMoveMedian) {
  ContaminationModel m{0.0, 0.1, 1000.0, CleanFamily::uniform, 1.0, 8};
  EXPECT_EQ(calpo::breakdown_median(m, 1001, 501), 1000.0);
}

TEST(Dkw, Examples) {
  ContaminationModel m{0.0, 0.1, 10.0, CleanFamily::uniform, 1.0, 9};
  const auto r = calpo::dkw_check(m, 10000, 100, 0.05);
  EXPECT_NEAR(r.bound, 2 * std::exp(-2e4 * 0.0499 * 0.0499), 1e-30);
  EXPECT_LT(r.bound, 1e-21);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_TRUE(r.passed());
  EXPECT_EQ(calpo::dkw_check(m, 1000, 50, 10.0).violations, 0u);
  m.alpha = 0.0;
  EXPECT_TRUE(calpo::dkw_check(m, 1000, 200, 0.01).passed());
  EXPECT_THROW(calpo::dkw_check(m, 100, 10, 0.01), calpo::InvalidInput);
}

TEST(MeanBand, FractionMeetsRequirement) {
  ContaminationModel m{0.0, 0.1, 100.0, CleanFamily::uniform, 1.0, 10};
  const auto r = calpo::mean_bias_band(m, 20000, 100);
  EXPECT_TRUE(r.passed());
}

TEST(RiskMinimizers, Examples) {
  const auto grid = calpo::unit_grid(1e-3);
  ASSERT_EQ(grid.size(), 1001u);
  const auto a = calpo::pointwise_risk_minimizers(0.7, grid, 0.63);
  EXPECT_NEAR(a.l2_argmin, 0.7, 1e-3);
  ASSERT_EQ(a.l1_argmins.size(), 1u);
  EXPECT_EQ(a.l1_argmins[0], 1.0);
  EXPECT_NEAR(a.surrogate_argmin, 0.63, 1e-12);
  const auto h = calpo::pointwise_risk_minimizers(0.5, grid, 0.5);
  EXPECT_EQ(h.l1_argmins.size(), grid.size());
  const auto low = calpo::pointwise_risk_minimizers(0.2, grid, 0.2);
  ASSERT_EQ(low.l1_argmins.size(), 1u);
  EXPECT_EQ(low.l1_argmins[0], 0.0);
  EXPECT_THROW(calpo::pointwise_risk_minimizers(0.5, {}, 0.5), calpo::InvalidInput);
}

}  // namespace
