#include "lwd/optim.hpp"

#include <cmath>

#include "lwd/errors.hpp"

namespace lwd {

AdamW::AdamW(std::vector<ad::Var> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
  for (const auto& p : params_) {
    if (!p.requires_grad()) throw ContractError("AdamW parameter does not require grad");
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double global_grad_norm(const std::vector<ad::Var>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad().span()) sq += g * g;
  }
  return std::sqrt(sq);
}

double AdamW::step() {
  ++t_;
  const double norm = global_grad_norm(params_);
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm at optimizer step " + std::to_string(t_));
  const double clip = (opts_.clip_norm > 0.0 && norm > opts_.clip_norm) ? opts_.clip_norm / norm : 1.0;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));

  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = params_[k].mutable_value();
    const Tensor& g = params_[k].grad();
    if (g.empty()) continue;
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= opts_.lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * w[i]);
    }
  }
  return norm;
}

}  // namespace lwd
