#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "lwd/archive.hpp"
#include "lwd/autograd.hpp"
#include "lwd/dataset.hpp"

namespace lwd {

/// Per-input view of the network: pooled block outputs z_1..z_L, logits,
/// their softmax and the predicted class.
struct LayerTrace {
  std::vector<std::vector<double>> z;
  std::vector<double> logits;
  std::vector<double> probs;
  int predicted = -1;

  int num_layers() const { return static_cast<int>(z.size()); }
};

struct ArchitectureSpec {
  /// "plain_cnn" (conv-relu blocks) or "resnet_cnn" (two-conv residual blocks).
  std::string id = "plain_cnn";
  /// Output channels per block; the block count is L.
  std::vector<int> widths = {16, 16, 32, 32, 64, 64, 64, 64};
  /// Block indices (0-based) followed by 2x2 average pooling.
  std::vector<int> pool_after = {1, 3, 5};

  nlohmann::json to_json() const;
  static ArchitectureSpec from_json(const nlohmann::json& j);
};

std::vector<std::string> registered_architectures();

struct ClassifierTrainConfig {
  int epochs = 15;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  /// Random 2-pixel-padded crop plus horizontal flip.
  bool augment = true;

  nlohmann::json to_json() const;
  static ClassifierTrainConfig from_json(const nlohmann::json& j);
};

class Classifier {
 public:
  struct Forward {
    std::vector<ad::Var> taps;  // (B x D_i), one per block
    ad::Var logits;             // (B x C)
  };

  static Classifier create(const ArchitectureSpec& arch, const Shape& input_shape, int num_classes,
                           std::uint64_t seed);

  /// Differentiable forward pass on an NCHW batch.
  Forward forward(const ad::Var& x) const;
  /// Inference convenience: logits only, evaluated in chunks.
  Tensor logits(const Tensor& x) const;
  std::vector<int> predict(const Tensor& x) const;
  std::vector<LayerTrace> forward_trace(const Tensor& x) const;

  const std::string& architecture_id() const { return arch_.id; }
  const ArchitectureSpec& architecture() const { return arch_; }
  int num_layers() const { return static_cast<int>(layer_dims_.size()); }
  int num_classes() const { return num_classes_; }
  const std::vector<int>& layer_dims() const { return layer_dims_; }
  const Shape& input_shape() const { return input_shape_; }
  int input_dim() const;

  std::vector<ad::Var> parameters() const;
  std::size_t parameter_count() const;
  /// Toggle whether parameters collect gradients. Frozen by default after training.
  void set_trainable(bool on);

  /// First 16 hex chars of the SHA-256 over all parameters and the architecture.
  std::string fingerprint() const;

  nlohmann::json& metadata() { return meta_; }
  const nlohmann::json& metadata() const { return meta_; }

  Archive to_archive() const;
  static Classifier from_archive(const Archive& a);
  void save(const std::filesystem::path& path) const { to_archive().save(path); }
  static Classifier load(const std::filesystem::path& path);

 private:
  void check_input(const Tensor& x) const;

  ArchitectureSpec arch_;
  Shape input_shape_;
  int num_classes_ = 0;
  std::vector<int> layer_dims_;
  std::map<std::string, ad::Var> params_;
  nlohmann::json meta_ = nlohmann::json::object();
};

double accuracy(const Classifier& model, const DatasetSplit& data);

/// Cross-entropy training with AdamW. Records per-epoch loss, final train
/// accuracy and (when `eval` is non-empty) clean test accuracy in metadata.
/// Throws TrainingError when final train accuracy < 1/C + 0.05 or the loss
/// becomes non-finite.
Classifier train_classifier(const DatasetSplit& train, const ArchitectureSpec& arch,
                            const ClassifierTrainConfig& config, const DatasetSplit* eval = nullptr);

}  // namespace lwd
