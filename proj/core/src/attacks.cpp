#include "lwd/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include "lwd/errors.hpp"
#include "lwd/math.hpp"
#include "lwd/optim.hpp"

namespace lwd {

namespace {

constexpr int kAttackChunk = 64;

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

double sgn(double g) { return static_cast<double>((g > 0.0) - (g < 0.0)); }

// One projected step: move, project onto the eps-ball around x0, clamp to [0, 1].
double project_step(double cur, double x0, double delta, double eps) {
  return clip01(std::min(std::max(cur + delta, x0 - eps), x0 + eps));
}

void check_batch(const Classifier& model, const Tensor& x, const std::vector<int>& y) {
  if (x.rank() != 4 || x.dim(0) != static_cast<int>(y.size())) {
    throw ContractError("attack batch " + shape_str(x.shape()) + " does not match " + std::to_string(y.size()) + " labels");
  }
  for (int label : y) {
    if (label < 0 || label >= model.num_classes()) throw ValidationError("attack label out of range");
  }
  for (double v : x.span()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("attack input outside [0, 1]");
  }
}

std::vector<int> slice(const std::vector<int>& v, int b, int e) { return {v.begin() + b, v.begin() + e}; }

std::vector<int> draw_targets(const std::vector<int>& y, int classes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x7A4E7ULL));
  std::vector<int> t;
  for (int label : y) {
    t.push_back((label + 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(classes - 1))) % classes);
  }
  return t;
}

// Gradient of the attacker's classification objective: +CE(y) untargeted,
// -CE(target) targeted; ascending it helps the attack.
Tensor classifier_gradient(const Classifier& model, const Tensor& cur, const std::vector<int>& labels, bool targeted) {
  const ad::Var xv = ad::leaf(cur, true);
  const auto f = model.forward(xv);
  ad::Var loss = ad::sum(ad::cross_entropy_rows(f.logits, labels));
  if (targeted) loss = ad::scale(loss, -1.0);
  ad::backward(loss);
  return xv.grad();
}

void finalize(const Classifier& model, AdvBatch& out) {
  out.predicted = model.predict(out.adversarials);
  const int n = out.size();
  out.success.assign(static_cast<std::size_t>(n), false);
  out.linf.assign(static_cast<std::size_t>(n), 0.0);
  out.l2.assign(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const auto r = static_cast<std::size_t>(i);
    out.success[r] = out.targets.empty() ? out.predicted[r] != out.labels[r] : out.predicted[r] == out.targets[r];
    auto a = out.adversarials.row(i);
    auto o = out.originals.row(i);
    double linf = 0.0, l2 = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
      const double d = a[k] - o[k];
      linf = std::max(linf, std::abs(d));
      l2 += d * d;
    }
    out.linf[r] = linf;
    out.l2[r] = std::sqrt(l2);
  }
  out.validate();
}

AdvBatch start_batch(const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg, int classes) {
  AdvBatch b;
  b.originals = x;
  b.adversarials = x;
  b.labels = y;
  b.config = cfg;
  if (cfg.targeted) b.targets = draw_targets(y, classes, cfg.seed);
  return b;
}

void pgd_loop(const Classifier& model, AdvBatch& b) {
  const AttackConfig& cfg = b.config;
  const int n = b.size();
  const double eps = cfg.epsilon;
  if (cfg.random_start) {
    Rng rng(derive_seed(cfg.seed, 0x9D5A47ULL));
    auto adv = b.adversarials.span();
    auto org = b.originals.span();
    for (std::size_t k = 0; k < adv.size(); ++k) adv[k] = clip01(org[k] + uniform(rng, -eps, eps));
  }
  const auto& labels = cfg.targeted ? b.targets : b.labels;
  for (int step = 0; step < cfg.steps; ++step) {
    for (int s = 0; s < n; s += kAttackChunk) {
      const int e = std::min(n, s + kAttackChunk);
      const Tensor g = classifier_gradient(model, b.adversarials.slice_rows(s, e), slice(labels, s, e), cfg.targeted);
      double* cur = b.adversarials.ptr() + static_cast<std::ptrdiff_t>(s) * static_cast<std::ptrdiff_t>(b.adversarials.row_size());
      const double* org = b.originals.ptr() + static_cast<std::ptrdiff_t>(s) * static_cast<std::ptrdiff_t>(b.originals.row_size());
      for (std::size_t k = 0; k < g.size(); ++k) cur[k] = project_step(cur[k], org[k], cfg.step_size * sgn(g[k]), eps);
    }
  }
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

std::string to_string(AttackKind k) {
  switch (k) {
    case AttackKind::fgsm: return "fgsm";
    case AttackKind::pgd: return "pgd";
    case AttackKind::cw: return "cw";
    case AttackKind::adaptive: return "adaptive";
  }
  return "?";
}

AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "fgsm") return AttackKind::fgsm;
  if (s == "pgd") return AttackKind::pgd;
  if (s == "cw") return AttackKind::cw;
  if (s == "adaptive") return AttackKind::adaptive;
  throw ConfigError("unknown attack '" + s + "' (expected fgsm, pgd, cw or adaptive)");
}

std::string to_string(ProjectionMode m) { return m == ProjectionMode::joint ? "joint" : "orthogonal"; }

ProjectionMode projection_mode_from_string(const std::string& s) {
  if (s == "joint") return ProjectionMode::joint;
  if (s == "orthogonal") return ProjectionMode::orthogonal;
  throw ConfigError("unknown projection mode '" + s + "'");
}

AttackConfig AttackConfig::defaults(AttackKind kind) {
  AttackConfig c;
  c.kind = kind;
  switch (kind) {
    case AttackKind::fgsm:
      c.epsilon = 0.05;
      c.steps = 1;
      c.step_size = 0.05;
      break;
    case AttackKind::pgd:
      c.epsilon = 0.02;
      c.steps = 40;
      c.step_size = 0.002;
      break;
    case AttackKind::adaptive:
      c.epsilon = 8.0 / 255.0;
      c.steps = 40;
      c.step_size = c.epsilon / 10.0;
      break;
    case AttackKind::cw:
      c.epsilon = 1.0;
      c.steps = 100;
      c.step_size = 0.0;
      break;
  }
  return c;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0)) throw ConfigError("attack epsilon must be >= 0");
  if (steps < 1) throw ConfigError("attack steps must be >= 1");
  if (beta1 < 0.0 || beta2 < 0.0) throw ConfigError("adaptive beta weights must be >= 0");
  if (kind != AttackKind::cw && !(step_size >= 0.0)) throw ConfigError("attack step_size must be >= 0");
  if (kind == AttackKind::cw && targeted) throw ConfigError("targeted CW is not supported");
  if (kind == AttackKind::cw && (cw_c < 0.0 || cw_lr <= 0.0 || cw_kappa < 0.0)) throw ConfigError("invalid CW settings");
}

nlohmann::json AttackConfig::to_json() const {
  return {{"kind", to_string(kind)}, {"epsilon", epsilon}, {"steps", steps},     {"step_size", step_size},
          {"targeted", targeted},    {"random_start", random_start}, {"cw_c", cw_c}, {"cw_kappa", cw_kappa},
          {"cw_lr", cw_lr},          {"beta1", beta1},       {"beta2", beta2},   {"mode", to_string(mode)},
          {"seed", seed}};
}

AttackConfig AttackConfig::from_json(const nlohmann::json& j) {
  AttackConfig c = defaults(attack_kind_from_string(j.value("kind", std::string("fgsm"))));
  c.epsilon = j.value("epsilon", c.epsilon);
  c.steps = j.value("steps", c.steps);
  if (j.contains("step_size")) {
    c.step_size = j.at("step_size").get<double>();
  } else if (c.kind == AttackKind::fgsm) {
    c.step_size = c.epsilon;
  } else if (c.kind != AttackKind::cw) {
    c.step_size = c.epsilon / 10.0;
  }
  c.targeted = j.value("targeted", c.targeted);
  c.random_start = j.value("random_start", c.random_start);
  c.cw_c = j.value("cw_c", c.cw_c);
  c.cw_kappa = j.value("cw_kappa", c.cw_kappa);
  c.cw_lr = j.value("cw_lr", c.cw_lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.mode = projection_mode_from_string(j.value("mode", to_string(c.mode)));
  c.seed = j.value("seed", c.seed);
  return c;
}

double AdvBatch::success_rate() const {
  if (success.empty()) return 0.0;
  return static_cast<double>(std::count(success.begin(), success.end(), true)) / static_cast<double>(success.size());
}

void AdvBatch::validate() const {
  if (!originals.same_shape(adversarials)) throw ValidationError("adversarial batch shape differs from originals");
  if (originals.rank() != 4 || originals.dim(0) != size()) throw ValidationError("adversarial batch has wrong label count");
  const double bound = config.epsilon + 1e-6;
  for (int i = 0; i < size(); ++i) {
    auto a = adversarials.row(i);
    auto o = originals.row(i);
    for (std::size_t k = 0; k < a.size(); ++k) {
      if (!(a[k] >= 0.0 && a[k] <= 1.0)) {
        throw ValidationError("adversarial " + std::to_string(i) + " leaves the [0, 1] pixel range");
      }
      if (std::abs(a[k] - o[k]) > bound) {
        throw ValidationError("adversarial " + std::to_string(i) + " exceeds the L-inf budget " +
                              std::to_string(config.epsilon));
      }
    }
  }
}

namespace {

Tensor int_tensor(const std::vector<int>& v) {
  return Tensor({static_cast<int>(v.size())}, std::vector<double>(v.begin(), v.end()));
}

std::vector<int> to_ints(const Tensor& t) {
  std::vector<int> v;
  for (double d : t.span()) v.push_back(static_cast<int>(std::lround(d)));
  return v;
}

}  // namespace

Archive AdvBatch::to_archive() const {
  Archive a("adv_batch");
  a.meta()["config"] = config.to_json();
  a.meta()["log"] = log;
  a.meta()["success_rate"] = success_rate();
  a.put("originals", originals);
  a.put("adversarials", adversarials);
  a.put("labels", int_tensor(labels));
  if (!targets.empty()) a.put("targets", int_tensor(targets));
  if (!predicted.empty()) a.put("predicted", int_tensor(predicted));
  std::vector<double> s(success.begin(), success.end());
  a.put("success", Tensor({static_cast<int>(s.size())}, s));
  a.put("linf", Tensor({static_cast<int>(linf.size())}, linf));
  a.put("l2", Tensor({static_cast<int>(l2.size())}, l2));
  return a;
}

AdvBatch AdvBatch::from_archive(const Archive& a) {
  if (a.kind() != "adv_batch") throw LoadError("archive is not an adversarial batch");
  AdvBatch b;
  if (!a.meta().contains("config")) throw LoadError("adversarial batch has no attack config");
  b.config = AttackConfig::from_json(a.meta().at("config"));
  b.log = a.meta().value("log", nlohmann::json::object());
  b.originals = a.get("originals");
  b.adversarials = a.get("adversarials");
  b.labels = to_ints(a.get("labels"));
  if (a.has("targets")) b.targets = to_ints(a.get("targets"));
  if (a.has("predicted")) b.predicted = to_ints(a.get("predicted"));
  if (a.has("success")) {
    for (double v : a.get("success").span()) b.success.push_back(v != 0.0);
  }
  if (a.has("linf")) b.linf = a.get("linf").vec();
  if (a.has("l2")) b.l2 = a.get("l2").vec();
  b.validate();
  return b;
}

AdvBatch AdvBatch::load(const std::filesystem::path& path) {
  try {
    return from_archive(Archive::load(path, "adv_batch"));
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

AdvBatch fgsm(const Classifier& model, const Tensor& x, const std::vector<int>& y, double epsilon) {
  AttackConfig cfg = AttackConfig::defaults(AttackKind::fgsm);
  cfg.epsilon = epsilon;
  cfg.step_size = epsilon;
  cfg.validate();
  check_batch(model, x, y);
  AdvBatch b = start_batch(x, y, cfg, model.num_classes());
  const int n = b.size();
  for (int s = 0; s < n; s += kAttackChunk) {
    const int e = std::min(n, s + kAttackChunk);
    const Tensor g = classifier_gradient(model, x.slice_rows(s, e), slice(y, s, e), false);
    double* adv = b.adversarials.ptr() + static_cast<std::ptrdiff_t>(s) * static_cast<std::ptrdiff_t>(x.row_size());
    const double* org = x.ptr() + static_cast<std::ptrdiff_t>(s) * static_cast<std::ptrdiff_t>(x.row_size());
    for (std::size_t k = 0; k < g.size(); ++k) adv[k] = project_step(org[k], org[k], epsilon * sgn(g[k]), epsilon);
  }
  finalize(model, b);
  return b;
}

AdvBatch pgd(const Classifier& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(model, x, y);
  AdvBatch b = start_batch(x, y, cfg, model.num_classes());
  b.config.kind = AttackKind::pgd;
  pgd_loop(model, b);
  finalize(model, b);
  return b;
}

AdvBatch cw(const Classifier& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(model, x, y);
  AdvBatch b = start_batch(x, y, cfg, model.num_classes());
  b.config.kind = AttackKind::cw;
  const int n = b.size();
  const int d = static_cast<int>(x.row_size());
  const std::vector<int> clean_pred = model.predict(x);

  for (int s = 0; s < n; s += kAttackChunk) {
    const int e = std::min(n, s + kAttackChunk);
    const int m = e - s;
    const Tensor x0 = x.slice_rows(s, e);
    Tensor lo(x0.shape()), half(x0.shape()), w0(x0.shape());
    for (std::size_t k = 0; k < x0.size(); ++k) {
      const double l = std::max(0.0, x0[k] - cfg.epsilon);
      const double h = std::min(1.0, x0[k] + cfg.epsilon);
      lo[k] = l;
      half[k] = 0.5 * (h - l);
      const double t = h > l ? (x0[k] - l) / (h - l) : 0.5;
      w0[k] = std::atanh(std::clamp(2.0 * t - 1.0, -1.0 + 1e-9, 1.0 - 1e-9));
    }
    const ad::Var lo_v = ad::constant(lo);
    const ad::Var half_v = ad::constant(half);
    const ad::Var x_flat = ad::constant(x0.reshaped({m, d}));
    const std::vector<int> labels = slice(y, s, e);
    ad::Var w = ad::leaf(w0, true);
    AdamW opt({w}, {.lr = cfg.cw_lr, .weight_decay = 0.0});

    std::vector<double> best_l2(static_cast<std::size_t>(m), std::numeric_limits<double>::infinity());
    Tensor best = x0;
    Tensor last = x0;
    auto record = [&](const Tensor& xa, const Tensor& logits) {
      for (int i = 0; i < m; ++i) {
        if (argmax(logits.row(i)) == labels[static_cast<std::size_t>(i)]) continue;
        double l2 = 0.0;
        auto a = xa.row(i);
        auto o = x0.row(i);
        for (std::size_t k = 0; k < a.size(); ++k) l2 += (a[k] - o[k]) * (a[k] - o[k]);
        if (l2 < best_l2[static_cast<std::size_t>(i)]) {
          best_l2[static_cast<std::size_t>(i)] = l2;
          std::copy(a.begin(), a.end(), best.row(i).begin());
        }
      }
    };
    for (int step = 0; step <= cfg.steps; ++step) {
      opt.zero_grad();
      const ad::Var xa = ad::add(lo_v, ad::mul(half_v, ad::add_scalar(ad::tanh(w), 1.0)));
      const auto f = model.forward(xa);
      Tensor xa_val = xa.value();
      for (std::size_t k = 0; k < xa_val.size(); ++k) xa_val[k] = std::clamp(xa_val[k], lo[k], lo[k] + 2.0 * half[k]);
      record(xa_val, f.logits.value());
      last = xa_val;
      if (step == cfg.steps) break;
      const ad::Var dist = ad::row_sum(ad::square(ad::sub(ad::reshape(xa, {m, d}), x_flat)));
      const ad::Var loss = ad::sum(ad::add(dist, ad::scale(ad::margin_rows(f.logits, labels, cfg.cw_kappa), cfg.cw_c)));
      ad::backward(loss);
      opt.step();
    }
    for (int i = 0; i < m; ++i) {
      const auto r = static_cast<std::size_t>(i);
      auto dst = b.adversarials.row(s + i);
      if (clean_pred[static_cast<std::size_t>(s + i)] != labels[r]) {
        auto o = x0.row(i);
        std::copy(o.begin(), o.end(), dst.begin());
      } else if (std::isfinite(best_l2[r])) {
        auto src = best.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
      } else {
        auto src = last.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
      }
    }
  }
  finalize(model, b);
  return b;
}

AdvBatch orthogonal_pgd(const Classifier& model, const Tensor& x, const std::vector<int>& y, const DetectorParts& detector,
                        const DetectorCalibration* calib, const AttackConfig& cfg) {
  cfg.validate();
  check_batch(model, x, y);
  if (detector.model == nullptr || detector.recovery == nullptr || detector.augment == nullptr) {
    throw ContractError("adaptive attack needs a classifier, recovery bank and augmentation bank");
  }
  if (detector.model->fingerprint() != model.fingerprint()) {
    throw ContractError("adaptive attack detector was built for a different classifier");
  }
  AdvBatch b = start_batch(x, y, cfg, model.num_classes());
  b.config.kind = AttackKind::adaptive;
  const bool detector_free = cfg.beta1 == 0.0 && cfg.beta2 == 0.0;

  nlohmann::json cos_log = nlohmann::json::array();
  nlohmann::json ortho_log = nlohmann::json::array();
  nlohmann::json fooled_log = nlohmann::json::array();
  if (detector_free) {
    pgd_loop(model, b);
  } else {
    const int n = b.size();
    const double eps = cfg.epsilon;
    const auto& labels = cfg.targeted ? b.targets : b.labels;
    const std::size_t d = x.row_size();
    // Fooled iterates are kept by detector cost, so the attack returns the
    // least detectable misclassification it visited, not just the last one.
    // Normalized scores are squared because RLT also flags scores far below
    // the benign median.
    auto cost = [&](double rt, double lt) {
      if (calib == nullptr) return cfg.beta1 * rt + cfg.beta2 * lt;
      const ScoreRecord r = calib->normalize(rt, lt);
      return cfg.beta1 * r.rt_norm * r.rt_norm + cfg.beta2 * r.lt_norm * r.lt_norm;
    };
    std::vector<double> best_cost(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    Tensor best = b.adversarials;
    auto keep_if_better = [&](int row, const double* v, double rt, double lt) {
      const double c = cost(rt, lt);
      if (!(c < best_cost[static_cast<std::size_t>(row)])) return;
      best_cost[static_cast<std::size_t>(row)] = c;
      std::copy(v, v + d, best.ptr() + static_cast<std::ptrdiff_t>(row) * static_cast<std::ptrdiff_t>(d));
    };
    for (int step = 0; step < cfg.steps; ++step) {
      double cos_sum = 0.0;
      int cos_count = 0;
      double ortho_max = 0.0;
      int fooled = 0;
      for (int s = 0; s < n; s += kAttackChunk) {
        const int e = std::min(n, s + kAttackChunk);
        const int m = e - s;
        const std::vector<int> lab = slice(labels, s, e);
        const ad::Var xv = ad::leaf(b.adversarials.slice_rows(s, e), true);
        const auto clean = model.forward(xv);
        std::vector<int> pred;
        for (int i = 0; i < m; ++i) pred.push_back(argmax(clean.logits.value().row(i)));
        ad::Var ce = ad::sum(ad::cross_entropy_rows(clean.logits, lab));
        if (cfg.targeted) ce = ad::scale(ce, -1.0);
        const ad::Var rt_rows = rt_score_rows(detector.recovery->error_rows(clean.taps), detector.rt_terms);
        const ad::Var lt_rows = lt_graph(model, *detector.augment, xv, clean, pred, detector.lt_terms).lt;
        const ad::Var rt = ad::sum(rt_rows);
        const ad::Var lt = ad::sum(lt_rows);

        auto grad_of = [&](const ad::Var& root) {
          xv.node()->grad = Tensor();
          ad::backward(root);
          Tensor g = xv.grad();
          if (g.empty()) g = Tensor(xv.shape());
          return g;
        };
        const Tensor g_c = grad_of(ce);
        const Tensor g_rt = grad_of(rt);
        const Tensor g_lt = grad_of(lt);

        double* cur = b.adversarials.ptr() + static_cast<std::ptrdiff_t>(s) * static_cast<std::ptrdiff_t>(d);
        const double* org = b.originals.ptr() + static_cast<std::ptrdiff_t>(s) * static_cast<std::ptrdiff_t>(d);
        std::vector<double> g_d(d), dir(d);
        for (int i = 0; i < m; ++i) {
          const std::size_t off = static_cast<std::size_t>(i) * d;
          std::span<const double> gc(g_c.ptr() + off, d), grt(g_rt.ptr() + off, d), glt(g_lt.ptr() + off, d);
          const double nrt = std::sqrt(dot(grt, grt)), nlt = std::sqrt(dot(glt, glt));
          if (nrt > 0.0 && nlt > 0.0) {
            cos_sum += dot(grt, glt) / (nrt * nlt);
            ++cos_count;
          }
          for (std::size_t k = 0; k < d; ++k) g_d[k] = cfg.beta1 * grt[k] + cfg.beta2 * glt[k];
          const int yi = lab[static_cast<std::size_t>(i)];
          const bool is_fooled = cfg.targeted ? pred[static_cast<std::size_t>(i)] == yi : pred[static_cast<std::size_t>(i)] != yi;
          fooled += is_fooled;
          if (is_fooled) keep_if_better(s + i, cur + off, rt_rows.value()[static_cast<std::size_t>(i)], lt_rows.value()[static_cast<std::size_t>(i)]);

          if (cfg.mode == ProjectionMode::joint) {
            for (std::size_t k = 0; k < d; ++k) cur[off + k] = project_step(cur[off + k], org[off + k], cfg.step_size * sgn(gc[k] - g_d[k]), eps);
            continue;
          }
          // Orthogonal: the direction being followed has the other gradient removed.
          std::span<const double> keep = is_fooled ? std::span<const double>(g_d) : gc;
          std::span<const double> drop = is_fooled ? gc : std::span<const double>(g_d);
          const double sign = is_fooled ? -1.0 : 1.0;
          const double dd = dot(drop, drop);
          const double coef = dd > 0.0 ? dot(keep, drop) / dd : 0.0;
          double inf = 0.0;
          for (std::size_t k = 0; k < d; ++k) {
            dir[k] = sign * (keep[k] - coef * drop[k]);
            inf = std::max(inf, std::abs(dir[k]));
          }
          if (inf == 0.0) continue;
          const double nd = std::sqrt(dot(dir, dir));
          if (dd > 0.0 && nd > 0.0) ortho_max = std::max(ortho_max, std::abs(dot(dir, drop)) / (nd * std::sqrt(dd)));
          for (std::size_t k = 0; k < d; ++k) {
            cur[off + k] = project_step(cur[off + k], org[off + k], cfg.step_size * sgn(dir[k]), eps);
          }
        }
      }
      cos_log.push_back(cos_count > 0 ? cos_sum / cos_count : 0.0);
      ortho_log.push_back(ortho_max);
      fooled_log.push_back(static_cast<double>(fooled) / n);
    }
    const std::vector<int> final_pred = model.predict(b.adversarials);
    const ScoreBatch last = score_batch(b.adversarials, detector);
    for (int i = 0; i < n; ++i) {
      const auto r = static_cast<std::size_t>(i);
      const bool is_fooled = cfg.targeted ? final_pred[r] == labels[r] : final_pred[r] != labels[r];
      if (is_fooled) keep_if_better(i, b.adversarials.ptr() + static_cast<std::ptrdiff_t>(i) * static_cast<std::ptrdiff_t>(d), last.rt[r], last.lt[r]);
      if (std::isfinite(best_cost[r])) {
        std::copy_n(best.ptr() + static_cast<std::ptrdiff_t>(i) * static_cast<std::ptrdiff_t>(d), d,
                    b.adversarials.ptr() + static_cast<std::ptrdiff_t>(i) * static_cast<std::ptrdiff_t>(d));
      }
    }
  }
  b.log["grad_cosine_rt_lt"] = cos_log;
  b.log["orthogonality_residual"] = ortho_log;
  b.log["fooled_fraction"] = fooled_log;
  finalize(model, b);

  if (calib != nullptr) {
    check_compatible(*calib, detector);
    DetectorParts p = detector;
    p.rt_terms = calib->rt_terms;
    p.lt_terms = calib->lt_terms;
    const ScoreBatch sb = score_batch(b.adversarials, p);
    nlohmann::json det = nlohmann::json::object();
    for (Measure m : all_measures()) {
      for (const auto& [fpr, tau] : calib->thresholds.at(m)) {
        std::vector<bool> flags;
        for (int i = 0; i < sb.size(); ++i) {
          flags.push_back(calib->normalize(sb.rt[static_cast<std::size_t>(i)], sb.lt[static_cast<std::size_t>(i)]).get(m) > tau);
        }
        det[to_string(m)][fpr_key(fpr)] = flags;
      }
    }
    b.log["detected"] = det;
  }
  return b;
}

AdvBatch run_attack(const Classifier& model, const Tensor& x, const std::vector<int>& y, const AttackConfig& cfg,
                    const DetectorParts* detector, const DetectorCalibration* calib) {
  switch (cfg.kind) {
    case AttackKind::fgsm: {
      AdvBatch b = fgsm(model, x, y, cfg.epsilon);
      b.config.seed = cfg.seed;
      return b;
    }
    case AttackKind::pgd: return pgd(model, x, y, cfg);
    case AttackKind::cw: return cw(model, x, y, cfg);
    case AttackKind::adaptive:
      if (detector == nullptr) throw ConfigError("the adaptive attack needs detector artifacts (run calibrate first)");
      return orthogonal_pgd(model, x, y, *detector, calib, cfg);
  }
  throw ConfigError("unknown attack kind");
}

}  // namespace lwd
