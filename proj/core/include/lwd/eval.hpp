#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "lwd/attacks.hpp"
#include "lwd/dataset.hpp"
#include "lwd/fusion.hpp"

namespace lwd {

inline constexpr int kReportSchemaVersion = 1;

/// Probability that a random adversarial score exceeds a random benign one,
/// ties counting one half.
double roc_auc(std::span<const double> benign, std::span<const double> adversarial);

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};
std::vector<RocPoint> roc_curve(std::span<const double> benign, std::span<const double> adversarial);

/// Fraction of inputs that are still correctly classified or flagged.
double robust_accuracy(const std::vector<bool>& correct, const std::vector<bool>& flagged);

struct RobustAccuracy {
  double ra = 0.0;
  /// Share of the batch flagged by the detector.
  double flagged_rate = 0.0;
  int n = 0;
};
RobustAccuracy robust_accuracy_at_fpr(const AdvBatch& batch, const DetectorParts& parts, const DetectorCalibration& calib,
                                      Measure measure, double fpr);

struct ShiftProfile {
  std::string population;
  std::vector<double> mean_profile;
  std::vector<double> dispersion;
  /// 1-based layer indices whose mean mass exceeds peak_factor / M.
  std::vector<int> peak_layers;
  double flatness = 0.0;
  double peak_factor = 2.0;
  int k_rt = 1;
  int count = 0;

  nlohmann::json to_json() const;
};

/// Mean and variance of softmax(e) across inputs; flatness is the largest mean mass.
ShiftProfile shift_profile(const std::vector<ErrorVector>& errors, const std::string& population, double peak_factor = 2.0);
std::pair<ShiftProfile, ShiftProfile> layer_shift_profile(const std::vector<LayerTrace>& benign,
                                                          const std::vector<LayerTrace>& adversarial,
                                                          const RecoveryBank& bank, const std::string& attack_name,
                                                          double peak_factor = 2.0);

struct ParameterCounts {
  std::size_t classifier = 0;
  std::size_t recovery = 0;
  std::size_t augmentation = 0;

  std::size_t detector() const { return recovery + augmentation; }
  double overhead_ratio() const;
  nlohmann::json to_json() const;
};

ParameterCounts parameter_count(const Classifier& model, const RecoveryBank* recovery, const AugmentationBank* augment);
/// Weights and biases of a GELU head with `depth` hidden layers.
std::size_t mlp_parameter_count(int in_dim, int hidden_dim, int depth, int out_dim);

struct ScoreStats {
  double mean = 0.0;
  double sd = 0.0;
  int n = 0;

  static ScoreStats of(std::span<const double> v);
  nlohmann::json to_json() const;
};

struct AttackEvaluation {
  std::string name;
  AttackConfig config;
  int attempted = 0;
  /// Successful adversarials whose original was correctly classified.
  int evaluated = 0;
  double success_rate = 0.0;
  std::map<Measure, double> auc;
  std::map<Measure, std::map<double, RobustAccuracy>> ra;
  std::map<Measure, ScoreStats> adversarial_stats;
  /// Scores of the evaluated population, kept for figures.
  std::map<Measure, std::vector<double>> scores;
  ShiftProfile profile;
  /// Means of the score factors (log entropy, log decidedness, log drift, ...).
  nlohmann::json components = nlohmann::json::object();
  nlohmann::json log = nlohmann::json::object();

  nlohmann::json to_json() const;
};

/// Mean and sd of each RT and LT factor over the rows selected by `keep`.
nlohmann::json score_components(const ScoreBatch& sb, const std::vector<bool>& keep);

struct EvalOptions {
  std::vector<double> fpr_levels = {0.05, 0.5};
  double peak_factor = 2.0;
};

struct EvalReport {
  nlohmann::json provenance = nlohmann::json::object();
  int benign_evaluated = 0;
  double clean_accuracy = 0.0;
  std::map<Measure, ScoreStats> benign_stats;
  std::map<Measure, std::vector<double>> benign_scores;
  /// Realized false-positive rate of each threshold on the benign test set.
  std::map<Measure, std::map<double, double>> benign_fpr;
  ShiftProfile benign_profile;
  nlohmann::json benign_components = nlohmann::json::object();
  std::vector<AttackEvaluation> attacks;
  ParameterCounts params;

  const AttackEvaluation& attack(const std::string& name) const;
  nlohmann::json to_json() const;
};

/// Scores the benign test split and every adversarial batch. The benign
/// population is the correctly classified test inputs; each attack's
/// population is its successful adversarials built from correctly
/// classified originals.
EvalReport evaluate_detector(const DetectorParts& parts, const DetectorCalibration& calib, const DatasetSplit& benign,
                             const std::vector<std::pair<std::string, AdvBatch>>& batches, const EvalOptions& opts = {});

/// Emits SVG figures and matching CSV series for a report under `dir`.
/// Returns the written paths.
std::vector<std::filesystem::path> write_report_figures(const EvalReport& report, const std::filesystem::path& dir);

// ----------------------------------------------------------------- ablation

struct SweepSpec {
  /// One of depth, hidden_dim, G, k, epsilon, terms.
  std::string key;
  nlohmann::json values = nlohmann::json::array();
  std::uint64_t seed = 0;

  static SweepSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

const std::vector<std::string>& sweep_keys();

/// Config overrides (a JSON patch merged into the run config) for one sweep value.
nlohmann::json sweep_override(const std::string& key, const nlohmann::json& value);

/// Runs one cell: receives the merged overrides and the shared seed.
using CellRunner = std::function<EvalReport(const nlohmann::json& overrides, std::uint64_t seed)>;

struct AblationReport {
  SweepSpec sweep;
  std::vector<nlohmann::json> overrides;
  std::vector<EvalReport> cells;

  nlohmann::json to_json() const;
};

/// Expands the sweep into cells sharing one seed and runs each.
AblationReport run_ablation(const SweepSpec& sweep, const CellRunner& runner);

}  // namespace lwd
