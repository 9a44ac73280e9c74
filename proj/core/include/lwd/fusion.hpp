#pragma once

#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "lwd/classifier.hpp"
#include "lwd/logit_probe.hpp"
#include "lwd/recovery.hpp"

namespace lwd {

/// Smallest benign sample accepted for a CDF or a threshold.
inline constexpr int kMinCalibrationScores = 20;

/// Empirical CDF with mid-rank ties and a (rank + 0.5)/(N + 1) plotting
/// position, clamped to [1/(N+1), N/(N+1)] so it never reaches 0 or 1.
class EmpiricalCDF {
 public:
  EmpiricalCDF() = default;
  static EmpiricalCDF fit(std::span<const double> scores);

  double operator()(double s) const;
  const std::vector<double>& sorted_scores() const { return sorted_; }
  int size() const { return static_cast<int>(sorted_.size()); }

  nlohmann::json to_json() const;
  static EmpiricalCDF from_json(const nlohmann::json& j);

 private:
  std::vector<double> sorted_;
};

/// Phi^-1(F(s)).
double quantile_normalize(double score, const EmpiricalCDF& cdf);

double rlt_score(double rt_norm, double lt_norm);

enum class Measure { rt, lt, rlt };
std::string to_string(Measure m);
Measure measure_from_string(const std::string& s);
inline const std::vector<Measure>& all_measures() {
  static const std::vector<Measure> m = {Measure::rt, Measure::lt, Measure::rlt};
  return m;
}

/// Linear-interpolation (type 7) sample quantile, q in [0, 1].
double empirical_quantile(std::span<const double> values, double q);

/// Threshold at benign false-positive rate alpha: the (1 - alpha) quantile.
/// Inputs are flagged when their score is strictly above it.
std::map<double, double> calibrate_thresholds(std::span<const double> benign_scores, const std::vector<double>& fpr_levels);

/// Text key used for an FPR level in JSON ("0.05").
std::string fpr_key(double fpr);

struct ScoreRecord {
  double rt = 0.0;
  double lt = 0.0;
  double rt_norm = 0.0;
  double lt_norm = 0.0;
  double rlt = 0.0;

  double get(Measure m) const;
  nlohmann::json to_json() const;
};

struct DetectorCalibration {
  EmpiricalCDF cdf_rt;
  EmpiricalCDF cdf_lt;
  std::map<Measure, std::map<double, double>> thresholds;
  std::string model_fingerprint;
  std::string recovery_fingerprint;
  std::string augmentation_fingerprint;
  RtTerms rt_terms;
  LtTerms lt_terms;
  nlohmann::json provenance = nlohmann::json::object();

  /// Throws ConfigError when no threshold exists for (m, fpr).
  double threshold(Measure m, double fpr) const;
  ScoreRecord normalize(double rt, double lt) const;

  nlohmann::json to_json() const;
  static DetectorCalibration from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static DetectorCalibration load(const std::filesystem::path& path);
};

/// Raw per-input scores of a batch plus what produced them.
struct ScoreBatch {
  std::vector<double> rt;
  std::vector<double> lt;
  std::vector<ErrorVector> errors;
  std::vector<LtBreakdown> lt_parts;
  std::vector<int> predicted;

  int size() const { return static_cast<int>(rt.size()); }
};

/// Everything needed to score an input.
struct DetectorParts {
  const Classifier* model = nullptr;
  const RecoveryBank* recovery = nullptr;
  const AugmentationBank* augment = nullptr;
  RtTerms rt_terms;
  LtTerms lt_terms;
};

ScoreBatch score_batch(const Tensor& x, const DetectorParts& parts);

/// Fits both CDFs on one benign slice and the thresholds of all three
/// measures on a second, disjoint slice.
DetectorCalibration fit_calibration(const ScoreBatch& cdf_slice, const ScoreBatch& threshold_slice,
                                    const std::vector<double>& fpr_levels);

/// Raises ConfigError if the calibration was fitted against different components.
void check_compatible(const DetectorCalibration& calib, const DetectorParts& parts);

struct Detection {
  bool flag = false;
  ScoreRecord scores;
};

std::vector<Detection> detect(const Tensor& x, const DetectorParts& parts, const DetectorCalibration& calib,
                              Measure measure, double fpr);

}  // namespace lwd
