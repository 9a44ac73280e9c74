#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "lwd/tensor.hpp"

/// Reverse-mode automatic differentiation over batched tensors.
///
/// Every op returns a `Var` whose node remembers its parents and a backward
/// closure, but only when at least one parent requires a gradient; pure
/// inference therefore builds no graph. `backward(root)` accumulates into
/// `grad()` of every reachable node that requires one. Leaves created with
/// `leaf()` keep their accumulated gradient until `zero_grad()`.
namespace lwd::ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node& self)> backward_fn;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  void zero_grad() { node_->grad = Tensor(); }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool defined() const { return static_cast<bool>(node_); }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var leaf(Tensor value, bool requires_grad = true);

/// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
void backward(const Var& root);

// Elementwise (identical shapes).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
/// log(max(a, floor)); zero gradient where the floor is active.
Var log_floor(const Var& a, double floor);
Var relu(const Var& a);
Var gelu(const Var& a);
Var tanh(const Var& a);
/// Clamp into [lo, hi]; gradient passes through on the closed interval.
Var clamp(const Var& a, double lo, double hi);

// Shape.
Var reshape(const Var& a, Shape shape);
/// Concatenate (B x 1) columns into (B x n).
Var concat_cols(std::span<const Var> cols);

// Linear algebra. All rank-2.
/// a (n x k) times b^T where b is (m x k).
Var matmul_nt(const Var& a, const Var& b);
/// x (B x in), weight (out x in), bias (out) or undefined.
Var linear(const Var& x, const Var& weight, const Var& bias);

// Convolution / pooling on NCHW.
/// Square kernel, stride 1, "same" zero padding (kernel must be odd).
Var conv2d(const Var& x, const Var& weight, const Var& bias);
/// 2x2 average pooling with stride 2 (H, W must be even).
Var avg_pool2(const Var& x);
/// (B, C, H, W) -> (B, C).
Var global_avg_pool(const Var& x);

// Row reductions on (B x D) -> (B x 1).
Var row_sum(const Var& a);
Var row_mean(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);

Var softmax_rows(const Var& logits);
Var log_softmax_rows(const Var& logits);
/// Shannon entropy (nats) of softmax(logits), per row.
Var softmax_entropy_rows(const Var& logits);
/// -log softmax(logits)[label], per row.
Var cross_entropy_rows(const Var& logits, std::span<const int> labels);
/// max(Z_y - max_{j != y} Z_j, -kappa), per row.
Var margin_rows(const Var& logits, std::span<const int> labels, double kappa);

}  // namespace lwd::ad
