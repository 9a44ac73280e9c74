#include "lwd/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "lwd/errors.hpp"

namespace lwd::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

Var make(Tensor value, std::initializer_list<Var> parents, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.shared());
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ContractError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                        shape_str(a.shape()));
  }
}

// Applies a pointwise derivative: parent.grad += self.grad * dfdx(x, y).
template <typename D>
Var unary(const Var& a, Tensor out, D dfdx) {
  return make(std::move(out), {a}, [dfdx](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    const double* x = p.value.ptr();
    const double* y = self.value.ptr();
    const double* go = self.grad.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * dfdx(x[i], y[i]);
  });
}

template <typename F>
Tensor map_values(const Tensor& in, F f) {
  Tensor out(in.shape());
  const double* x = in.ptr();
  double* y = out.ptr();
  for (std::size_t i = 0; i < in.size(); ++i) y[i] = f(x[i]);
  return out;
}

void im2col(const double* img, int channels, int height, int width, int k, double* col) {
  const int pad = k / 2;
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* dst = col + static_cast<std::ptrdiff_t>(((c * k + ki) * k + kj)) * hw;
        const double* src = img + static_cast<std::ptrdiff_t>(c) * hw;
        for (int y = 0; y < height; ++y) {
          const int iy = y + ki - pad;
          double* drow = dst + y * width;
          if (iy < 0 || iy >= height) {
            std::fill_n(drow, width, 0.0);
            continue;
          }
          const double* srow = src + iy * width;
          for (int x = 0; x < width; ++x) {
            const int ix = x + kj - pad;
            drow[x] = (ix >= 0 && ix < width) ? srow[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int channels, int height, int width, int k, double* img) {
  const int pad = k / 2;
  const int hw = height * width;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* src = col + static_cast<std::ptrdiff_t>(((c * k + ki) * k + kj)) * hw;
        double* dst = img + static_cast<std::ptrdiff_t>(c) * hw;
        for (int y = 0; y < height; ++y) {
          const int iy = y + ki - pad;
          if (iy < 0 || iy >= height) continue;
          const double* srow = src + y * width;
          double* drow = dst + iy * width;
          for (int x = 0; x < width; ++x) {
            const int ix = x + kj - pad;
            if (ix >= 0 && ix < width) drow[ix] += srow[x];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var leaf(Tensor value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return Var(std::move(node));
}

void backward(const Var& root) {
  if (!root.defined()) throw ContractError("backward on undefined variable");
  if (root.value().size() != 1) throw ContractError("backward root must be a single element");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass; only leaves accumulate across passes.
  for (Node* node : order) {
    if (node->backward_fn) node->grad = Tensor();
  }
  root.node()->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      Tensor& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      Node& p = *self.parents[k];
      if (!p.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      Tensor& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      Tensor& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      Tensor& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

Var scale(const Var& a, double s) {
  return unary(a, map_values(a.value(), [s](double x) { return x * s; }),
               [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, map_values(a.value(), [s](double x) { return x + s; }),
               [](double, double) { return 1.0; });
}

Var square(const Var& a) {
  return unary(a, map_values(a.value(), [](double x) { return x * x; }),
               [](double x, double) { return 2.0 * x; });
}

Var log_floor(const Var& a, double floor) {
  return unary(a, map_values(a.value(), [floor](double x) { return std::log(std::max(x, floor)); }),
               [floor](double x, double) { return x > floor ? 1.0 / x : 0.0; });
}

Var relu(const Var& a) {
  return unary(a, map_values(a.value(), [](double x) { return x > 0.0 ? x : 0.0; }),
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary(
      a, map_values(a.value(), [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); }),
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
      });
}

Var tanh(const Var& a) {
  return unary(a, map_values(a.value(), [](double x) { return std::tanh(x); }),
               [](double, double y) { return 1.0 - y * y; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(a, map_values(a.value(), [lo, hi](double x) { return std::clamp(x, lo, hi); }),
               [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- shape

Var reshape(const Var& a, Shape shape) {
  return make(a.value().reshaped(std::move(shape)), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Var concat_cols(std::span<const Var> cols) {
  if (cols.empty()) throw ContractError("concat_cols of nothing");
  const int rows = cols[0].dim(0);
  const int n = static_cast<int>(cols.size());
  Tensor out({rows, n});
  for (int j = 0; j < n; ++j) {
    if (cols[static_cast<std::size_t>(j)].value().size() != static_cast<std::size_t>(rows)) {
      throw ContractError("concat_cols expects (B x 1) columns");
    }
    for (int i = 0; i < rows; ++i) out[static_cast<std::size_t>(i * n + j)] = cols[static_cast<std::size_t>(j)].value()[static_cast<std::size_t>(i)];
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(out);
  bool needs = std::any_of(cols.begin(), cols.end(), [](const Var& v) { return v.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (const auto& c : cols) node->parents.push_back(c.shared());
    node->backward_fn = [rows, n](Node& self) {
      for (int j = 0; j < n; ++j) {
        Node& p = *self.parents[static_cast<std::size_t>(j)];
        if (!p.requires_grad) continue;
        Tensor& g = p.grad_buffer();
        for (int i = 0; i < rows; ++i) g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i * n + j)];
      }
    };
  }
  return Var(std::move(node));
}

// ---------------------------------------------------------------- linear algebra

Var matmul_nt(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(0);
  if (b.dim(1) != k) throw ContractError("matmul_nt: inner dimension mismatch");
  Tensor out({n, m});
  MatMap(out.ptr(), n, m).noalias() =
      ConstMatMap(a.value().ptr(), n, k) * ConstMatMap(b.value().ptr(), m, k).transpose();
  return make(std::move(out), {a, b}, [n, k, m](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    ConstMatMap g(self.grad.ptr(), n, m);
    if (pa.requires_grad) {
      MatMap(pa.grad_buffer().ptr(), n, k).noalias() += g * ConstMatMap(pb.value.ptr(), m, k);
    }
    if (pb.requires_grad) {
      MatMap(pb.grad_buffer().ptr(), m, k).noalias() += g.transpose() * ConstMatMap(pa.value.ptr(), n, k);
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear");
  const int batch = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  if (weight.dim(1) != in) {
    throw ContractError("linear: input width " + std::to_string(in) + " does not match weight " +
                        shape_str(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.value().size() != static_cast<std::size_t>(out_dim)) {
    throw ContractError("linear: bias size mismatch");
  }
  Tensor out({batch, out_dim});
  MatMap o(out.ptr(), batch, out_dim);
  o.noalias() = ConstMatMap(x.value().ptr(), batch, in) * ConstMatMap(weight.value().ptr(), out_dim, in).transpose();
  if (has_bias) o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.value().ptr(), out_dim);

  auto fn = [batch, in, out_dim, has_bias](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    ConstMatMap g(self.grad.ptr(), batch, out_dim);
    if (px.requires_grad) {
      MatMap(px.grad_buffer().ptr(), batch, in).noalias() += g * ConstMatMap(pw.value.ptr(), out_dim, in);
    }
    if (pw.requires_grad) {
      MatMap(pw.grad_buffer().ptr(), out_dim, in).noalias() += g.transpose() * ConstMatMap(px.value.ptr(), batch, in);
    }
    if (has_bias) {
      Node& pb = *self.parents[2];
      if (pb.requires_grad) {
        // Plain loop for the same alignment reason as the conv bias below.
        double* gb = pb.grad_buffer().ptr();
        for (int r = 0; r < batch; ++r) {
          const double* row = self.grad.ptr() + static_cast<std::ptrdiff_t>(r) * out_dim;
          for (int c = 0; c < out_dim; ++c) gb[c] += row[c];
        }
      }
    }
  };
  if (has_bias) return make(std::move(out), {x, weight, bias}, fn);
  return make(std::move(out), {x, weight}, fn);
}

// ---------------------------------------------------------------- conv / pool

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d");
  const int batch = x.dim(0), cin = x.dim(1), height = x.dim(2), width = x.dim(3);
  const int cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k || k % 2 == 0) {
    throw ContractError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                        shape_str(x.shape()));
  }
  if (bias.value().size() != static_cast<std::size_t>(cout)) throw ContractError("conv2d: bias size mismatch");
  const int hw = height * width;
  const int ckk = cin * k * k;

  Tensor out({batch, cout, height, width});
  std::vector<double> col(static_cast<std::size_t>(ckk) * hw);
  ConstMatMap wm(weight.value().ptr(), cout, ckk);
  Eigen::Map<const Eigen::VectorXd> bv(bias.value().ptr(), cout);
  for (int b = 0; b < batch; ++b) {
    im2col(x.value().ptr() + static_cast<std::ptrdiff_t>(b) * cin * hw, cin, height, width, k, col.data());
    MatMap o(out.ptr() + static_cast<std::ptrdiff_t>(b) * cout * hw, cout, hw);
    o.noalias() = wm * ConstMatMap(col.data(), ckk, hw);
    o.colwise() += bv;
  }

  return make(std::move(out), {x, weight, bias}, [=](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    std::vector<double> cbuf(static_cast<std::size_t>(ckk) * hw);
    ConstMatMap w(pw.value.ptr(), cout, ckk);
    for (int b = 0; b < batch; ++b) {
      ConstMatMap g(self.grad.ptr() + static_cast<std::ptrdiff_t>(b) * cout * hw, cout, hw);
      if (pw.requires_grad) {
        im2col(px.value.ptr() + static_cast<std::ptrdiff_t>(b) * cin * hw, cin, height, width, k, cbuf.data());
        MatMap(pw.grad_buffer().ptr(), cout, ckk).noalias() += g * ConstMatMap(cbuf.data(), ckk, hw).transpose();
      }
      if (pb.requires_grad) {
        // Plain loop: Eigen's row reduction peels by address alignment, which
        // makes the rounding depend on where the buffer was allocated.
        double* gb = pb.grad_buffer().ptr();
        for (int c = 0; c < cout; ++c) {
          const double* row = self.grad.ptr() + (static_cast<std::ptrdiff_t>(b) * cout + c) * hw;
          double s = 0.0;
          for (int i = 0; i < hw; ++i) s += row[i];
          gb[c] += s;
        }
      }
      if (px.requires_grad) {
        MatMap(cbuf.data(), ckk, hw).noalias() = w.transpose() * g;
        col2im_add(cbuf.data(), cin, height, width, k,
                   px.grad_buffer().ptr() + static_cast<std::ptrdiff_t>(b) * cin * hw);
      }
    }
  });
}

Var avg_pool2(const Var& x) {
  require_rank(x, 4, "avg_pool2");
  const int batch = x.dim(0), ch = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (height % 2 || width % 2) throw ContractError("avg_pool2 requires even spatial size");
  const int oh = height / 2, ow = width / 2;
  Tensor out({batch, ch, oh, ow});
  const double* in = x.value().ptr();
  for (int bc = 0; bc < batch * ch; ++bc) {
    const double* src = in + static_cast<std::ptrdiff_t>(bc) * height * width;
    double* dst = out.ptr() + static_cast<std::ptrdiff_t>(bc) * oh * ow;
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        const double* s = src + 2 * y * width + 2 * xx;
        dst[y * ow + xx] = 0.25 * (s[0] + s[1] + s[width] + s[width + 1]);
      }
  }
  return make(std::move(out), {x}, [=](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.grad_buffer().ptr();
    for (int bc = 0; bc < batch * ch; ++bc) {
      double* dst = g + static_cast<std::ptrdiff_t>(bc) * height * width;
      const double* src = self.grad.ptr() + static_cast<std::ptrdiff_t>(bc) * oh * ow;
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          const double v = 0.25 * src[y * ow + xx];
          double* d = dst + 2 * y * width + 2 * xx;
          d[0] += v;
          d[1] += v;
          d[width] += v;
          d[width + 1] += v;
        }
    }
  });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int batch = x.dim(0), ch = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({batch, ch});
  for (int bc = 0; bc < batch * ch; ++bc) {
    const double* src = x.value().ptr() + static_cast<std::ptrdiff_t>(bc) * hw;
    double s = 0.0;
    for (int i = 0; i < hw; ++i) s += src[i];
    out[static_cast<std::size_t>(bc)] = s / hw;
  }
  return make(std::move(out), {x}, [=](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    double* g = p.grad_buffer().ptr();
    for (int bc = 0; bc < batch * ch; ++bc) {
      const double v = self.grad[static_cast<std::size_t>(bc)] / hw;
      double* dst = g + static_cast<std::ptrdiff_t>(bc) * hw;
      for (int i = 0; i < hw; ++i) dst[i] += v;
    }
  });
}

// ---------------------------------------------------------------- reductions

Var row_sum(const Var& a) {
  const int rows = a.dim(0);
  const std::size_t width = a.value().row_size();
  Tensor out({rows, 1});
  for (int i = 0; i < rows; ++i) {
    double s = 0.0;
    for (double v : a.value().row(i)) s += v;
    out[static_cast<std::size_t>(i)] = s;
  }
  return make(std::move(out), {a}, [rows, width](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (int i = 0; i < rows; ++i) {
      const double v = self.grad[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < width; ++j) g[static_cast<std::size_t>(i) * width + j] += v;
    }
  });
}

Var row_mean(const Var& a) {
  const auto width = static_cast<double>(a.value().row_size());
  return scale(row_sum(a), 1.0 / width);
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().span()) s += v;
  return make(Tensor::scalar(s), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var softmax_rows(const Var& logits) {
  require_rank(logits, 2, "softmax_rows");
  const int rows = logits.dim(0), cols = logits.dim(1);
  Tensor out(logits.shape());
  for (int i = 0; i < rows; ++i) {
    auto z = logits.value().row(i);
    auto y = out.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += (y[static_cast<std::size_t>(j)] = std::exp(z[static_cast<std::size_t>(j)] - mx));
    for (auto& v : y) v /= s;
  }
  return make(std::move(out), {logits}, [rows, cols](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (int i = 0; i < rows; ++i) {
      auto y = self.value.row(i);
      auto gy = self.grad.row(i);
      double dot = 0.0;
      for (int j = 0; j < cols; ++j) dot += y[static_cast<std::size_t>(j)] * gy[static_cast<std::size_t>(j)];
      auto gx = g.row(i);
      for (int j = 0; j < cols; ++j) gx[static_cast<std::size_t>(j)] += y[static_cast<std::size_t>(j)] * (gy[static_cast<std::size_t>(j)] - dot);
    }
  });
}

Var log_softmax_rows(const Var& logits) {
  require_rank(logits, 2, "log_softmax_rows");
  const int rows = logits.dim(0), cols = logits.dim(1);
  Tensor out(logits.shape());
  for (int i = 0; i < rows; ++i) {
    auto z = logits.value().row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    auto y = out.row(i);
    for (int j = 0; j < cols; ++j) y[static_cast<std::size_t>(j)] = z[static_cast<std::size_t>(j)] - lse;
  }
  return make(std::move(out), {logits}, [rows, cols](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (int i = 0; i < rows; ++i) {
      auto y = self.value.row(i);
      auto gy = self.grad.row(i);
      double total = 0.0;
      for (double v : gy) total += v;
      auto gx = g.row(i);
      for (int j = 0; j < cols; ++j) gx[static_cast<std::size_t>(j)] += gy[static_cast<std::size_t>(j)] - std::exp(y[static_cast<std::size_t>(j)]) * total;
    }
  });
}

Var softmax_entropy_rows(const Var& logits) {
  require_rank(logits, 2, "softmax_entropy_rows");
  const int rows = logits.dim(0), cols = logits.dim(1);
  Tensor probs(logits.shape());
  Tensor out({rows, 1});
  for (int i = 0; i < rows; ++i) {
    auto z = logits.value().row(i);
    auto p = probs.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += (p[static_cast<std::size_t>(j)] = std::exp(z[static_cast<std::size_t>(j)] - mx));
    double h = 0.0;
    for (auto& v : p) {
      v /= s;
      if (v > 0.0) h -= v * std::log(v);
    }
    out[static_cast<std::size_t>(i)] = h;
  }
  // dH/dz_j = -p_j (z_j - sum_i p_i z_i)
  return make(std::move(out), {logits}, [rows, cols, probs = std::move(probs)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (int i = 0; i < rows; ++i) {
      auto z = p.value.row(i);
      auto pr = probs.row(i);
      double zbar = 0.0;
      for (int j = 0; j < cols; ++j) zbar += pr[static_cast<std::size_t>(j)] * z[static_cast<std::size_t>(j)];
      const double go = self.grad[static_cast<std::size_t>(i)];
      auto gx = g.row(i);
      for (int j = 0; j < cols; ++j) {
        gx[static_cast<std::size_t>(j)] -= go * pr[static_cast<std::size_t>(j)] * (z[static_cast<std::size_t>(j)] - zbar);
      }
    }
  });
}

Var cross_entropy_rows(const Var& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross_entropy_rows");
  const int rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(rows)) throw ContractError("cross_entropy_rows: label count mismatch");
  std::vector<int> y(labels.begin(), labels.end());
  Tensor probs(logits.shape());
  Tensor out({rows, 1});
  for (int i = 0; i < rows; ++i) {
    if (y[static_cast<std::size_t>(i)] < 0 || y[static_cast<std::size_t>(i)] >= cols) throw ContractError("cross_entropy_rows: label out of range");
    auto z = logits.value().row(i);
    auto p = probs.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (int j = 0; j < cols; ++j) s += (p[static_cast<std::size_t>(j)] = std::exp(z[static_cast<std::size_t>(j)] - mx));
    for (auto& v : p) v /= s;
    out[static_cast<std::size_t>(i)] = mx + std::log(s) - z[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])];
  }
  return make(std::move(out), {logits}, [rows, y = std::move(y), probs = std::move(probs)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (int i = 0; i < rows; ++i) {
      const double go = self.grad[static_cast<std::size_t>(i)];
      auto pr = probs.row(i);
      auto gx = g.row(i);
      for (std::size_t j = 0; j < gx.size(); ++j) gx[j] += go * pr[j];
      gx[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] -= go;
    }
  });
}

Var margin_rows(const Var& logits, std::span<const int> labels, double kappa) {
  require_rank(logits, 2, "margin_rows");
  const int rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != static_cast<std::size_t>(rows)) throw ContractError("margin_rows: label count mismatch");
  std::vector<int> y(labels.begin(), labels.end());
  std::vector<int> rival(static_cast<std::size_t>(rows));
  std::vector<char> active(static_cast<std::size_t>(rows));
  Tensor out({rows, 1});
  for (int i = 0; i < rows; ++i) {
    auto z = logits.value().row(i);
    const int yi = y[static_cast<std::size_t>(i)];
    int best = -1;
    double best_v = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < cols; ++j) {
      if (j != yi && z[static_cast<std::size_t>(j)] > best_v) {
        best_v = z[static_cast<std::size_t>(j)];
        best = j;
      }
    }
    rival[static_cast<std::size_t>(i)] = best;
    const double m = z[static_cast<std::size_t>(yi)] - best_v;
    active[static_cast<std::size_t>(i)] = m > -kappa;
    out[static_cast<std::size_t>(i)] = std::max(m, -kappa);
  }
  return make(std::move(out), {logits}, [rows, y = std::move(y), rival = std::move(rival), active = std::move(active)](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    Tensor& g = p.grad_buffer();
    for (int i = 0; i < rows; ++i) {
      if (!active[static_cast<std::size_t>(i)]) continue;
      const double go = self.grad[static_cast<std::size_t>(i)];
      auto gx = g.row(i);
      gx[static_cast<std::size_t>(y[static_cast<std::size_t>(i)])] += go;
      gx[static_cast<std::size_t>(rival[static_cast<std::size_t>(i)])] -= go;
    }
  });
}

}  // namespace lwd::ad
