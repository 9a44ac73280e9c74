#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "lwd/archive.hpp"
#include "lwd/autograd.hpp"
#include "lwd/classifier.hpp"
#include "lwd/math.hpp"

namespace lwd {

inline constexpr double kScoreLogFloor = 1e-12;

struct RecoveryConfig {
  /// First reconstructed layer (1-based); heads cover k_rt..L-1.
  int k_rt = 1;
  /// Hidden layers per head.
  int depth = 3;
  int hidden_dim = 512;
  int epochs = 50;
  int batch_size = 32;
  double lr = 1e-4;
  double weight_decay = 0.01;
  /// Share of the training traces held out to check the loss did not get worse.
  double holdout_fraction = 0.1;
  /// "benign": after training, each layer's error is divided by its mean on
  /// the held-out benign slice, so a typical benign error is 1. "raw": plain
  /// per-dimension MSE.
  std::string error_units = "benign";
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static RecoveryConfig from_json(const nlohmann::json& j);
};

/// Switches that drop one factor of the RT score.
struct RtTerms {
  bool inverse_entropy = true;
  bool log_error = true;

  nlohmann::json to_json() const;
  static RtTerms from_json(const nlohmann::json& j);
};

/// Per-layer reconstruction errors e_k, k = k_rt..L-1.
struct ErrorVector {
  std::vector<double> e;
  int k_rt = 1;
};

/// Fully connected GELU network with `depth` hidden layers and a linear output.
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(int in_dim, int hidden_dim, int depth, int out_dim, Rng& rng);

  ad::Var forward(const ad::Var& x) const;
  int in_dim() const { return in_dim_; }
  int out_dim() const { return out_dim_; }
  std::vector<ad::Var>& layers() { return layers_; }
  const std::vector<ad::Var>& layers() const { return layers_; }
  std::size_t parameter_count() const;

 private:
  int in_dim_ = 0;
  int out_dim_ = 0;
  /// Alternating weight (out x in) and bias (out) leaves.
  std::vector<ad::Var> layers_;
};

/// Inverse regressors from the final embedding z_L back to each z_k.
class RecoveryBank {
 public:
  static RecoveryBank create(const std::vector<int>& layer_dims, const RecoveryConfig& cfg);

  int k_rt() const { return k_rt_; }
  int num_layers() const { return static_cast<int>(layer_dims_.size()); }
  /// Number of scored layers, L - k_rt.
  int num_errors() const { return num_layers() - k_rt_; }
  int depth() const { return depth_; }
  int hidden_dim() const { return hidden_dim_; }
  const std::vector<int>& layer_dims() const { return layer_dims_; }
  const MlpHead& head(int k) const { return heads_.at(k); }
  MlpHead& head(int k) { return heads_.at(k); }

  /// Differentiable errors for a batch of taps (one Var per layer, B x D_i).
  /// Returns B x M with column j holding e_{k_rt + j}.
  ad::Var error_rows(const std::vector<ad::Var>& taps) const;
  ErrorVector layer_errors(const LayerTrace& trace) const;
  std::vector<ErrorVector> layer_errors(const std::vector<LayerTrace>& traces) const;

  /// Mean over inputs of sum_k e_k.
  double loss(const std::vector<LayerTrace>& traces) const;

  std::vector<ad::Var> parameters() const;
  std::size_t parameter_count() const;
  void set_trainable(bool on);
  std::string fingerprint() const;

  nlohmann::json& metadata() { return meta_; }
  const nlohmann::json& metadata() const { return meta_; }

  /// Divisor per reconstructed layer (k_rt..L-1); all ones unless set.
  const std::vector<double>& error_scale() const { return error_scale_; }
  void set_error_scale(std::vector<double> scale);

  Archive to_archive() const;
  static RecoveryBank from_archive(const Archive& a);
  void save(const std::filesystem::path& path) const { to_archive().save(path); }
  static RecoveryBank load(const std::filesystem::path& path);

 private:
  friend RecoveryBank train_recovery_bank(const std::vector<LayerTrace>& traces, const RecoveryConfig& cfg);
  void check_trace(const LayerTrace& t) const;
  std::vector<ad::Var> taps_from(const std::vector<LayerTrace>& traces, std::size_t begin, std::size_t end) const;

  std::vector<int> layer_dims_;
  int k_rt_ = 1;
  int depth_ = 3;
  int hidden_dim_ = 512;
  std::map<int, MlpHead> heads_;
  std::vector<double> error_scale_;
  nlohmann::json meta_ = nlohmann::json::object();
};

/// Trains all heads jointly on benign traces. Records the loss curve and the
/// held-out loss before and after training in the bank metadata.
RecoveryBank train_recovery_bank(const std::vector<LayerTrace>& traces, const RecoveryConfig& cfg);

/// (ln M - H(softmax(e))) * ln(max(floor, mean(e))).
double rt_score(std::span<const double> e, const RtTerms& terms = {});
inline double rt_score(const ErrorVector& e, const RtTerms& terms = {}) { return rt_score(e.e, terms); }
/// Row-wise RT on B x M errors, returns B x 1.
ad::Var rt_score_rows(const ad::Var& errors, const RtTerms& terms = {});

}  // namespace lwd
