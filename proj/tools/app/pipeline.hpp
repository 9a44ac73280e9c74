#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "lwd/attacks.hpp"
#include "lwd/classifier.hpp"
#include "lwd/eval.hpp"
#include "lwd/fusion.hpp"
#include "lwd/logit_probe.hpp"
#include "lwd/recovery.hpp"
#include "run_config.hpp"

namespace lwd::app {

inline constexpr const char* kArtifactRootEnv = "LWD_ARTIFACT_ROOT";

/// Directory layout under one artifact root:
///   classifiers/<hash>/   trained classifier shared by runs with the same data+model+seed
///   runs/<hash>/          detector artifacts, manifest, attacks/, reports/
///   ablations/<hash>/     sweep reports
class ArtifactStore {
 public:
  explicit ArtifactStore(std::filesystem::path root) : root_(std::move(root)) {}

  /// `out` if given, else $LWD_ARTIFACT_ROOT, else ./artifacts.
  static std::filesystem::path default_root(const std::string& out = "");

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path classifier_dir(const RunConfig& cfg) const;
  std::filesystem::path run_dir(const RunConfig& cfg) const;
  std::filesystem::path ablation_dir(const nlohmann::json& key) const;

 private:
  std::filesystem::path root_;
};

/// First 16 hex chars of SHA-256 over the canonical dump.
std::string key_hash(const nlohmann::json& key);

/// Adds `seconds` under `stage` in <dir>/timing.json. Timings are kept out of
/// the manifest so they never affect artifact hashes.
void record_timing(const std::filesystem::path& dir, const std::string& stage, double seconds);

/// Progress lines on stderr, prefixed with the elapsed wall time.
void progress(const std::string& message);

struct Datasets {
  DatasetSplit train;
  DatasetSplit calibration;
  DatasetSplit test;
};
Datasets load_data(const RunConfig& cfg);

struct Detector {
  Classifier model;
  RecoveryBank recovery;
  AugmentationBank augment;
  DetectorCalibration calib;

  DetectorParts parts() const { return {&model, &recovery, &augment, calib.rt_terms, calib.lt_terms}; }
};

struct CalibrateResult {
  Detector detector;
  std::filesystem::path run_dir;
  nlohmann::json summary;
  /// Held-out benign scores after normalization, in test-split order.
  std::vector<ScoreRecord> heldout;
};

/// Trains (or reuses) the classifier, trains both banks, fits the calibration
/// and writes everything with a manifest. With `reuse`, a complete run
/// directory whose hashes check out is loaded instead of retrained.
CalibrateResult cmd_calibrate(const RunConfig& cfg, const ArtifactStore& store, bool reuse = true);

/// ConfigError when the run has not been calibrated.
Detector load_detector(const RunConfig& cfg, const ArtifactStore& store);
Classifier load_classifier(const RunConfig& cfg, const ArtifactStore& store);

struct AttackOutput {
  std::string name;
  std::filesystem::path path;
  nlohmann::json stats;
};

/// One archive per attack name under <run>/attacks/. Existing archives with
/// the same inputs are reused. Names are keys of cfg.attacks.
std::vector<AttackOutput> cmd_attack(const RunConfig& cfg, const ArtifactStore& store,
                                     const std::vector<std::string>& names, bool reuse = true);

struct EvaluateResult {
  EvalReport report;
  std::filesystem::path dir;
  nlohmann::json json;
};

/// Evaluates the given AdvBatch archives; with none given, the configured
/// attack kinds (generated if missing).
EvaluateResult cmd_evaluate(const RunConfig& cfg, const ArtifactStore& store,
                            const std::vector<std::filesystem::path>& adv_paths);

/// Flatness table and profile figures for benign data and each attack.
nlohmann::json cmd_validate_assumption(const RunConfig& cfg, const ArtifactStore& store,
                                       const std::vector<std::filesystem::path>& adv_paths);

struct AblationResult {
  AblationReport report;
  std::filesystem::path dir;
};
AblationResult cmd_ablate(const RunConfig& cfg, const ArtifactStore& store, const SweepSpec& sweep);

/// Name recorded for an archive: the stem up to the content-hash suffix.
std::string batch_name(const std::filesystem::path& path);

}  // namespace lwd::app
