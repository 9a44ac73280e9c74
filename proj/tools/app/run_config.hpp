#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "lwd/attacks.hpp"
#include "lwd/classifier.hpp"
#include "lwd/dataset.hpp"
#include "lwd/eval.hpp"
#include "lwd/logit_probe.hpp"
#include "lwd/recovery.hpp"

namespace lwd::app {

struct DataConfig {
  /// CIFAR-10 binary directory or synthetic-spec JSON file. Empty means `synthetic`.
  std::string source;
  std::optional<SyntheticSpec> synthetic;
  double train_fraction = 0.6;
  double calibration_fraction = 0.5;
  int limit_train = 0;
  int limit_calibration = 0;
  int limit_test = 0;
  std::uint64_t split_seed = 0;
};

struct RunConfig {
  std::string profile = "ci";
  std::uint64_t seed = 0;
  DataConfig data;
  ArchitectureSpec arch;
  ClassifierTrainConfig train;
  /// Optional pre-trained classifier archive.
  std::string checkpoint;
  RecoveryConfig recovery;
  ProbeConfig probe;
  /// Benign training images used for the augmentation operators (0 = all).
  int probe_limit = 0;
  RtTerms rt_terms;
  LtTerms lt_terms;
  /// Share of the calibration split used for the CDFs; the rest sets thresholds.
  double cdf_fraction = 0.7;
  std::vector<double> fpr_levels = {0.05, 0.5};
  std::vector<std::string> attack_kinds = {"fgsm", "pgd", "cw"};
  /// Test inputs attacked per kind (0 = all).
  int attack_limit = 0;
  std::map<std::string, AttackConfig> attacks;
  EvalOptions eval;
  /// Benign test inputs scored by evaluate (0 = all).
  int eval_limit = 0;
  std::optional<SweepSpec> sweep;

  /// The fully merged JSON this config was built from.
  nlohmann::json resolved = nlohmann::json::object();

  /// Profile defaults, then the config file, then `overrides`, merged with
  /// JSON merge-patch semantics. Relative paths resolve against `base_dir`.
  static RunConfig resolve(const std::string& profile, const nlohmann::json& file, const nlohmann::json& overrides,
                           const std::filesystem::path& base_dir = {});
  static RunConfig from_json(const nlohmann::json& j);

  void validate() const;
  const AttackConfig& attack(const std::string& name) const;

  /// Canonical JSON of everything the detector artifacts depend on.
  nlohmann::json detector_key() const;
  /// Canonical JSON of everything the classifier depends on.
  nlohmann::json classifier_key() const;
};

std::vector<std::string> profile_names();
nlohmann::json profile_defaults(const std::string& name);

/// Reads a JSON config file; LoadError names the path.
nlohmann::json read_config_file(const std::filesystem::path& path);

}  // namespace lwd::app
