#pragma once

#include <vector>

#include "lwd/autograd.hpp"

namespace lwd {

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  /// Global L2 gradient-norm clip; <= 0 disables.
  double clip_norm = 0.0;
};

/// Decoupled-weight-decay Adam over a fixed set of leaf parameters.
class AdamW {
 public:
  AdamW(std::vector<ad::Var> params, AdamWOptions opts);

  void zero_grad();
  /// Applies one update from the gradients currently stored on the leaves.
  /// Returns the (pre-clip) global gradient norm.
  double step();

  const AdamWOptions& options() const { return opts_; }
  long steps_taken() const { return t_; }

 private:
  std::vector<ad::Var> params_;
  AdamWOptions opts_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

double global_grad_norm(const std::vector<ad::Var>& params);

}  // namespace lwd
