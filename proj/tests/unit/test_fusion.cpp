#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "lwd/errors.hpp"
#include "lwd/fusion.hpp"
#include "lwd/math.hpp"
#include "oracles.hpp"

using namespace lwd;

namespace {

std::vector<double> one_to(int n) {
  std::vector<double> v;
  for (int i = 1; i <= n; ++i) v.push_back(i);
  return v;
}

std::vector<double> normal_draws(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = standard_normal(rng);
  return v;
}

struct CalibratedToy {
  fixture::ToyDetector det = fixture::toy_detector(21);
  ScoreBatch cdf_slice, threshold_slice;
  Tensor threshold_images;
  DetectorCalibration calib;

  CalibratedToy() {
    cdf_slice = score_batch(fixture::random_images(300, {3, 4, 4}, 1), det.parts());
    threshold_images = fixture::random_images(400, {3, 4, 4}, 2);
    threshold_slice = score_batch(threshold_images, det.parts());
    calib = fit_calibration(cdf_slice, threshold_slice, {0.05, 0.5});
    calib.model_fingerprint = det.model.fingerprint();
    calib.recovery_fingerprint = det.recovery.fingerprint();
    calib.augmentation_fingerprint = det.augment.fingerprint();
  }
};

}  // namespace

TEST(EmpiricalCDF, MidRankRuleOnOneToNinetyNine) {
  const auto cdf = EmpiricalCDF::fit(one_to(99));
  // 49 below, one tie counted half, plus the half offset: 50 / 100.
  EXPECT_DOUBLE_EQ(cdf(50.0), 0.5);
  EXPECT_DOUBLE_EQ(cdf(50.5), 50.5 / 100.0);
}

TEST(EmpiricalCDF, OutOfSupportQueriesAreClamped) {
  const auto cdf = EmpiricalCDF::fit(one_to(99));
  EXPECT_DOUBLE_EQ(cdf(-1e9), 1.0 / 100.0);
  EXPECT_DOUBLE_EQ(cdf(1e9), 99.0 / 100.0);
  EXPECT_TRUE(std::isfinite(quantile_normalize(-1e300, cdf)));
  EXPECT_TRUE(std::isfinite(quantile_normalize(1e300, cdf)));
}

TEST(EmpiricalCDF, TiesGetMidRank) {
  std::vector<double> v(20, 3.0);
  const auto cdf = EmpiricalCDF::fit(v);
  EXPECT_DOUBLE_EQ(cdf(3.0), (0.0 + 10.0 + 0.5) / 21.0);
}

TEST(EmpiricalCDF, TooFewOrNonFiniteScoresAreRejected) {
  EXPECT_THROW(EmpiricalCDF::fit(one_to(19)), CalibrationError);
  auto v = one_to(30);
  v[4] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(EmpiricalCDF::fit(v), ValidationError);
}

TEST(QuantileNormalize, MedianMapsNearZero) {
  const auto cdf = EmpiricalCDF::fit(one_to(101));
  EXPECT_LE(std::abs(quantile_normalize(51.0, cdf)), normal_quantile(0.5 + 1.0 / 102.0));
}

TEST(QuantileNormalize, MonotoneOnRandomInputs) {
  const auto cdf = EmpiricalCDF::fit(normal_draws(200, 3));
  Rng rng(4);
  for (int i = 0; i < 500; ++i) {
    double a = uniform(rng, -4, 4), b = uniform(rng, -4, 4);
    if (a > b) std::swap(a, b);
    EXPECT_LE(quantile_normalize(a, cdf), quantile_normalize(b, cdf));
  }
}

TEST(QuantileNormalize, NinetySevenPointFiveMapsToOneNinetySix) {
  // 39 scores put the midpoint of the 39th rank at 39/40 = 0.975.
  const auto cdf = EmpiricalCDF::fit(one_to(39));
  ASSERT_DOUBLE_EQ(cdf(39.0), 0.975);
  EXPECT_NEAR(quantile_normalize(39.0, cdf), 1.96, 0.01);
  EXPECT_NEAR(quantile_normalize(39.0, cdf), oracle::normal_quantile(0.975), 1e-9);
}

TEST(QuantileNormalize, CalibrationScoresBecomeStandardNormal) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Rng rng(seed);
    std::vector<double> s(600);
    for (double& x : s) x = std::exp(2.0 * standard_normal(rng));
    const auto cdf = EmpiricalCDF::fit(s);
    std::vector<double> z;
    for (double x : s) z.push_back(quantile_normalize(x, cdf));
    EXPECT_LE(std::abs(mean_of(z)), 0.1);
    EXPECT_GE(variance_of(z), 0.85);
    EXPECT_LE(variance_of(z), 1.15);
  }
}

TEST(Rlt, Examples) {
  EXPECT_EQ(rlt_score(0.0, 0.0), 0.0);
  EXPECT_EQ(rlt_score(3.0, 0.0), 9.0);
  EXPECT_EQ(rlt_score(0.0, 3.0), 9.0);
  EXPECT_EQ(rlt_score(1.0, -2.0), 5.0);
}

TEST(Rlt, SymmetricNonNegativeAndMonotoneInMagnitude) {
  Rng rng(5);
  for (int i = 0; i < 300; ++i) {
    const double a = uniform(rng, -5, 5), b = uniform(rng, -5, 5), grow = uniform(rng, 0, 2);
    EXPECT_EQ(rlt_score(a, b), rlt_score(b, a));
    EXPECT_GE(rlt_score(a, b), 0.0);
    EXPECT_GE(rlt_score(a + std::copysign(grow, a), b), rlt_score(a, b));
  }
}

TEST(Rlt, HeldOutExpectationIsTwoForIndependentScores) {
  const auto cdf_rt = EmpiricalCDF::fit(normal_draws(2000, 6));
  const auto cdf_lt = EmpiricalCDF::fit(normal_draws(2000, 7));
  const auto rt = normal_draws(800, 8), lt = normal_draws(800, 9);
  double total = 0.0;
  for (std::size_t i = 0; i < rt.size(); ++i) total += rlt_score(quantile_normalize(rt[i], cdf_rt), quantile_normalize(lt[i], cdf_lt));
  EXPECT_NEAR(total / 800.0, 2.0, 0.3);
}

TEST(Thresholds, OneToHundred) {
  const auto t = calibrate_thresholds(one_to(100), {0.05, 0.5});
  EXPECT_GE(t.at(0.05), 95.0);
  EXPECT_LE(t.at(0.05), 96.0);
  EXPECT_DOUBLE_EQ(t.at(0.05), 95.05);
  EXPECT_DOUBLE_EQ(t.at(0.5), 50.5);
  EXPECT_GE(t.at(0.05), t.at(0.5));
}

TEST(Thresholds, RealizedFprWithinTwoOverRootN) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = normal_draws(500, seed);
    const auto t = calibrate_thresholds(s, {0.05, 0.2, 0.5});
    for (const auto& [a, tau] : t) {
      int flagged = 0;
      for (double x : s) flagged += x > tau;
      EXPECT_NEAR(flagged / 500.0, a, 2.0 / std::sqrt(500.0));
    }
  }
}

TEST(Thresholds, ErrorCases) {
  EXPECT_THROW(calibrate_thresholds(one_to(10), {0.05}), CalibrationError);
  EXPECT_THROW(calibrate_thresholds(one_to(50), {1.5}), ConfigError);
}

TEST(Detect, FiftyPercentLevelFlagsAboutHalfTheCalibrationSlice) {
  CalibratedToy toy;
  for (Measure m : all_measures()) {
    const auto d = detect(toy.threshold_images, toy.det.parts(), toy.calib, m, 0.5);
    int flagged = 0;
    for (const auto& x : d) flagged += x.flag;
    EXPECT_NEAR(flagged / 400.0, 0.5, 2.0 / std::sqrt(400.0)) << to_string(m);
  }
}

TEST(Detect, ScoreEqualToThresholdIsNotFlagged) {
  CalibratedToy toy;
  const Tensor x = toy.threshold_images.slice_rows(0, 1);
  DetectorCalibration c = toy.calib;
  const double score = detect(x, toy.det.parts(), c, Measure::rt, 0.05).front().scores.rt;
  c.thresholds[Measure::rt][0.05] = score;
  EXPECT_FALSE(detect(x, toy.det.parts(), c, Measure::rt, 0.05).front().flag);
  c.thresholds[Measure::rt][0.05] = std::nextafter(score, -1e300);
  EXPECT_TRUE(detect(x, toy.det.parts(), c, Measure::rt, 0.05).front().flag);
}

TEST(Detect, BreakdownMatchesNormalizationAndIsPure) {
  CalibratedToy toy;
  const Tensor x = toy.threshold_images.slice_rows(0, 5);
  const auto a = detect(x, toy.det.parts(), toy.calib, Measure::rlt, 0.05);
  const auto b = detect(x, toy.det.parts(), toy.calib, Measure::rlt, 0.05);
  for (int i = 0; i < 5; ++i) {
    const auto& s = a[static_cast<std::size_t>(i)].scores;
    EXPECT_EQ(s.rt, toy.threshold_slice.rt[static_cast<std::size_t>(i)]);
    EXPECT_EQ(s.lt, toy.threshold_slice.lt[static_cast<std::size_t>(i)]);
    EXPECT_EQ(s.rlt, rlt_score(s.rt_norm, s.lt_norm));
    EXPECT_EQ(s.rlt, b[static_cast<std::size_t>(i)].scores.rlt);
  }
}

TEST(Detect, FingerprintMismatchIsConfigError) {
  CalibratedToy toy;
  const auto other = fixture::toy_detector(22);
  DetectorParts mixed = toy.det.parts();
  mixed.model = &other.model;
  EXPECT_THROW(detect(toy.threshold_images, mixed, toy.calib, Measure::rlt, 0.05), ConfigError);
  EXPECT_THROW(detect(toy.threshold_images, toy.det.parts(), toy.calib, Measure::rlt, 0.01), ConfigError);
}

TEST(Calibration, ThresholdOrderingAndJsonRoundTrip) {
  CalibratedToy toy;
  for (Measure m : all_measures()) EXPECT_GE(toy.calib.threshold(m, 0.05), toy.calib.threshold(m, 0.5));
  fixture::TempDir dir("calib");
  toy.calib.save(dir.path() / "c.json");
  const auto back = DetectorCalibration::load(dir.path() / "c.json");
  EXPECT_EQ(back.to_json(), toy.calib.to_json());
  EXPECT_EQ(back.cdf_rt.sorted_scores(), toy.calib.cdf_rt.sorted_scores());
}
