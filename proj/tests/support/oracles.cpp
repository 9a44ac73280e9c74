#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "lwd/archive.hpp"

namespace lwd::oracle {

std::vector<double> softmax(const std::vector<double>& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  std::vector<double> out(v.size());
  double z = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - m);
    z += out[i];
  }
  for (double& x : out) x /= z;
  return out;
}

double softmax_entropy(const std::vector<double>& v) {
  const auto p = softmax(v);
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

namespace {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

std::vector<double> dense(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  const int out = w.dim(0), in = w.dim(1);
  std::vector<double> y(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    double acc = b.vec()[static_cast<std::size_t>(o)];
    for (int i = 0; i < in; ++i) acc += w.vec()[static_cast<std::size_t>(o * in + i)] * x[static_cast<std::size_t>(i)];
    y[static_cast<std::size_t>(o)] = acc;
  }
  return y;
}

}  // namespace

std::vector<double> layer_errors(const RecoveryBank& bank, const LayerTrace& trace) {
  const Archive a = bank.to_archive();
  const int L = trace.num_layers();
  std::vector<double> e;
  std::size_t slot = 0;
  for (int k = bank.k_rt(); k <= L - 1; ++k) {
    std::vector<double> h = trace.z.back();
    for (int j = 0;; ++j) {
      const std::string base = "h" + std::to_string(k) + "." + std::to_string(j);
      if (!a.has(base + ".w")) break;
      const bool last = !a.has("h" + std::to_string(k) + "." + std::to_string(j + 1) + ".w");
      h = dense(a.get(base + ".w"), a.get(base + ".b"), h);
      if (!last) {
        for (double& v : h) v = gelu(v);
      }
    }
    const auto& z = trace.z[static_cast<std::size_t>(k - 1)];
    double sq = 0.0;
    for (std::size_t d = 0; d < z.size(); ++d) sq += (z[d] - h[d]) * (z[d] - h[d]);
    e.push_back(sq / static_cast<double>(z.size()) / bank.error_scale()[slot++]);
  }
  return e;
}

double rt_score(const std::vector<double>& e, bool inverse_entropy, bool log_error) {
  double factor = 1.0;
  if (inverse_entropy) factor = std::log(static_cast<double>(e.size())) - softmax_entropy(e);
  double magnitude = 1.0;
  if (log_error) {
    double mean = 0.0;
    for (double v : e) mean += v;
    mean /= static_cast<double>(e.size());
    magnitude = std::log(std::max(1e-12, mean));
  }
  return factor * magnitude;
}

LtParts lt_score(const Classifier& model, const AugmentationBank& bank, const Tensor& image, const LtTerms& terms) {
  const int dim = static_cast<int>(image.size());
  Shape batch_shape = {1};
  for (int d : image.shape()) batch_shape.push_back(d);
  const Tensor x = image.reshaped(batch_shape);
  const LayerTrace clean = model.forward_trace(x).front();

  LtParts out;
  out.entropy = terms.entropy ? softmax_entropy(clean.logits) : 1.0;
  std::vector<double> target(clean.logits.size(), 0.0);
  if (terms.decidedness) {
    int best = 0;
    for (std::size_t c = 1; c < clean.probs.size(); ++c) {
      if (clean.probs[c] > clean.probs[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
    }
    target[static_cast<std::size_t>(best)] = 1.0;
  } else {
    target = softmax(clean.logits);
  }

  const int L = clean.num_layers();
  double total = 0.0;
  for (int g = 0; g < bank.size(); ++g) {
    const Tensor& w = bank.op(g).value();
    Tensor moved(batch_shape);
    for (int r = 0; r < dim; ++r) {
      double acc = 0.0;
      for (int c = 0; c < dim; ++c) acc += w.vec()[static_cast<std::size_t>(r * dim + c)] * x.vec()[static_cast<std::size_t>(c)];
      moved.span()[static_cast<std::size_t>(r)] = std::clamp(acc, 0.0, 1.0);
    }
    const LayerTrace aug = model.forward_trace(moved).front();
    double dz = 0.0;
    for (int i = bank.k_lt(); i <= L; ++i) {
      const auto& a = clean.z[static_cast<std::size_t>(i - 1)];
      const auto& b = aug.z[static_cast<std::size_t>(i - 1)];
      double sq = 0.0;
      for (std::size_t d = 0; d < a.size(); ++d) sq += (a[d] - b[d]) * (a[d] - b[d]);
      dz += sq / static_cast<double>(a.size());
    }
    dz /= static_cast<double>(L - bank.k_lt() + 1);
    const auto p = softmax(aug.logits);
    double dl = 0.0;
    for (std::size_t c = 0; c < p.size(); ++c) dl += (target[c] - p[c]) * (target[c] - p[c]);
    double s = std::log(std::max(1e-12, out.entropy * dl));
    if (terms.feature_drift) s -= std::log(std::max(1e-12, dz));
    out.delta_z.push_back(dz);
    out.delta_l.push_back(dl);
    out.s.push_back(s);
    total += s;
  }
  out.lt = total / bank.size();
  return out;
}

double brute_force_auc(const std::vector<double>& benign, const std::vector<double>& adversarial) {
  double wins = 0.0;
  for (double a : adversarial) {
    for (double b : benign) {
      if (a > b) {
        wins += 1.0;
      } else if (a == b) {
        wins += 0.5;
      }
    }
  }
  return wins / (static_cast<double>(benign.size()) * static_cast<double>(adversarial.size()));
}

double normal_quantile(double p) {
  // 1 - p is exact here, and the lower tail keeps erfc well conditioned.
  if (p > 0.5) return -normal_quantile(1.0 - p);
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (0.5 * std::erfc(-mid / std::sqrt(2.0)) < p) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                          std::size_t i, double h) {
  const double x0 = x[i];
  x[i] = x0 + h;
  const double up = f(x);
  x[i] = x0 - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

Classifier toy_classifier(std::uint64_t seed, int classes) {
  ArchitectureSpec arch;
  arch.id = "plain_cnn";
  arch.widths = {4, 5, 6};
  arch.pool_after = {0};
  return Classifier::create(arch, {3, 4, 4}, classes, seed);
}

}  // namespace lwd::oracle
