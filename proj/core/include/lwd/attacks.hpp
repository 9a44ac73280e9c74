#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lwd/archive.hpp"
#include "lwd/classifier.hpp"
#include "lwd/fusion.hpp"

namespace lwd {

enum class AttackKind { fgsm, pgd, cw, adaptive };
enum class ProjectionMode { joint, orthogonal };

std::string to_string(AttackKind k);
AttackKind attack_kind_from_string(const std::string& s);
std::string to_string(ProjectionMode m);
ProjectionMode projection_mode_from_string(const std::string& s);

struct AttackConfig {
  AttackKind kind = AttackKind::fgsm;
  /// L-infinity budget in pixel units.
  double epsilon = 0.05;
  int steps = 1;
  double step_size = 0.05;
  bool targeted = false;
  bool random_start = false;
  // CW
  double cw_c = 1.0;
  double cw_kappa = 0.0;
  double cw_lr = 0.05;
  // Adaptive
  double beta1 = 1.0;
  double beta2 = 1.0;
  ProjectionMode mode = ProjectionMode::orthogonal;
  std::uint64_t seed = 0;

  /// Defaults per kind: FGSM eps 0.05; PGD eps 0.02, 40 steps, step eps/10;
  /// CW eps 1 (box only), 100 steps; adaptive eps 0.02, 40 steps, step eps/10.
  static AttackConfig defaults(AttackKind kind);
  void validate() const;
  nlohmann::json to_json() const;
  static AttackConfig from_json(const nlohmann::json& j);
};

struct AdvBatch {
  Tensor originals;
  Tensor adversarials;
  std::vector<int> labels;
  /// Target classes for targeted attacks, empty otherwise.
  std::vector<int> targets;
  std::vector<int> predicted;
  std::vector<bool> success;
  std::vector<double> linf;
  std::vector<double> l2;
  AttackConfig config;
  /// Attack-specific logs (gradient cosines, detection flags, ...).
  nlohmann::json log = nlohmann::json::object();

  int size() const { return static_cast<int>(labels.size()); }
  double success_rate() const;
  /// Throws ValidationError unless every adversarial is in [0, 1] and within
  /// epsilon + 1e-6 of its original in L-infinity.
  void validate() const;

  Archive to_archive() const;
  static AdvBatch from_archive(const Archive& a);
  void save(const std::filesystem::path& path) const { to_archive().save(path); }
  static AdvBatch load(const std::filesystem::path& path);
};

/// Sign of the cross-entropy gradient, one step of size epsilon.
AdvBatch fgsm(const Classifier& model, const Tensor& x, const std::vector<int>& y, double epsilon);
AdvBatch pgd(const Classifier& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg);
/// L2 Carlini-Wagner in tanh space inside [max(0, x - eps), min(1, x + eps)],
/// fixed trade-off constant, Adam. Keeps the smallest successful perturbation.
AdvBatch cw(const Classifier& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg);

/// Detector-aware PGD. Joint mode ascends CE - beta1 RT - beta2 LT with sign
/// steps. Orthogonal mode steps on the classifier gradient with the detector
/// gradient projected out until the input is misclassified, then on the
/// negative detector gradient with the classifier gradient projected out;
/// each step takes the sign of the projected direction. The returned input is
/// the misclassified iterate with the lowest weighted detector score, or the
/// last iterate if none was misclassified. With beta1 = beta2 = 0 both modes
/// reduce to plain PGD. When `calib` is given, per-example detection flags at
/// its FPR levels are stored in the log.
AdvBatch orthogonal_pgd(const Classifier& model, const Tensor& x, const std::vector<int>& y, const DetectorParts& detector,
                        const DetectorCalibration* calib, const AttackConfig& cfg);

/// Dispatch on cfg.kind. `detector` is required for the adaptive kind.
AdvBatch run_attack(const Classifier& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
                    const DetectorParts* detector = nullptr, const DetectorCalibration* calib = nullptr);

}  // namespace lwd
