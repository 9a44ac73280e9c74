#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lwd/archive.hpp"
#include "lwd/autograd.hpp"
#include "lwd/classifier.hpp"
#include "lwd/dataset.hpp"

namespace lwd {

struct ProbeConfig {
  /// Number of augmentation operators, 1..6.
  int G = 4;
  /// First layer (1-based) included in the feature drift; layers k_lt..L.
  int k_lt = 1;
  /// Weight of the sum of squared distances of each operator from identity.
  double lambda = 0.1;
  /// Standard deviation of the Gaussian noise added to identity at init.
  double init_noise = 0.01;
  int epochs = 5;
  int batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static ProbeConfig from_json(const nlohmann::json& j);
};

/// Switches that drop one factor of the LT score.
struct LtTerms {
  /// Weight by the entropy of the clean prediction.
  bool entropy = true;
  /// Compare the augmented softmax against the predicted one-hot; when off,
  /// against the clean softmax instead.
  bool decidedness = true;
  /// Divide by the feature drift.
  bool feature_drift = true;

  nlohmann::json to_json() const;
  static LtTerms from_json(const nlohmann::json& j);
};

struct AugmentationTerms {
  double delta_z = 0.0;
  double delta_l = 0.0;
  double s = 0.0;
};

struct LtBreakdown {
  std::vector<AugmentationTerms> per_aug;
  double entropy_weight = 0.0;
  double lt = 0.0;
};

/// G dense linear maps on the flattened image, applied as clamp(W x, 0, 1).
class AugmentationBank {
 public:
  static AugmentationBank init(int input_dim, const ProbeConfig& cfg);

  int size() const { return static_cast<int>(ops_.size()); }
  int k_lt() const { return k_lt_; }
  double lambda() const { return lambda_; }
  int input_dim() const { return input_dim_; }
  const ad::Var& op(int g) const { return ops_.at(static_cast<std::size_t>(g)); }
  ad::Var& op(int g) { return ops_.at(static_cast<std::size_t>(g)); }

  /// Augmented NCHW batch for operator g.
  ad::Var apply(int g, const ad::Var& x) const;
  /// lambda * sum_g ||W_g - I||_F^2 as a differentiable scalar.
  ad::Var identity_penalty() const;
  /// Frobenius distance of operator g from identity.
  double distance_from_identity(int g) const;

  std::vector<ad::Var> parameters() const { return ops_; }
  std::size_t parameter_count() const;
  void set_trainable(bool on);
  std::string fingerprint() const;

  nlohmann::json& metadata() { return meta_; }
  const nlohmann::json& metadata() const { return meta_; }

  Archive to_archive() const;
  static AugmentationBank from_archive(const Archive& a);
  void save(const std::filesystem::path& path) const { to_archive().save(path); }
  static AugmentationBank load(const std::filesystem::path& path);

 private:
  int input_dim_ = 0;
  int k_lt_ = 1;
  double lambda_ = 0.1;
  std::vector<ad::Var> ops_;
  ad::Var identity_;
  nlohmann::json meta_ = nlohmann::json::object();
};

/// Differentiable LT pieces for a batch. `clean` is the forward pass of `x`.
/// `predicted` fixes the one-hot target; gradients never flow through it.
struct LtGraph {
  ad::Var lt;                       // B x 1
  ad::Var entropy;                  // B x 1
  std::vector<ad::Var> delta_z;     // per operator, B x 1
  std::vector<ad::Var> delta_l;     // per operator, B x 1
  std::vector<ad::Var> s;           // per operator, B x 1
};

LtGraph lt_graph(const Classifier& model, const AugmentationBank& bank, const ad::Var& x,
                 const Classifier::Forward& clean, const std::vector<int>& predicted, const LtTerms& terms = {});

/// Scores a batch of images (N x C x H x W). Evaluated in chunks.
std::vector<LtBreakdown> lt_scores(const Tensor& x, const Classifier& model, const AugmentationBank& bank,
                                   const LtTerms& terms = {});
/// Single image, either C x H x W or 1 x C x H x W.
LtBreakdown lt_score(const Tensor& x, const Classifier& model, const AugmentationBank& bank,
                     const LtTerms& terms = {});

/// Minimizes mean LT + lambda * sum ||W - I||^2 on benign images. The returned
/// operators are the snapshot with the lowest held-out mean LT seen during
/// training (the initial operators included).
AugmentationBank train_augmentations(const DatasetSplit& benign, const Classifier& model, AugmentationBank bank,
                                     const ProbeConfig& cfg, const LtTerms& terms = {});

}  // namespace lwd
