#include "lwd/logit_probe.hpp"

#include <algorithm>
#include <cmath>

#include "lwd/errors.hpp"
#include "lwd/math.hpp"
#include "lwd/optim.hpp"
#include "lwd/recovery.hpp"

namespace lwd {

nlohmann::json ProbeConfig::to_json() const {
  return {{"G", G},           {"k_lt", k_lt},           {"lambda", lambda},
          {"init_noise", init_noise}, {"epochs", epochs}, {"batch_size", batch_size},
          {"lr", lr},         {"weight_decay", weight_decay}, {"clip_norm", clip_norm},
          {"holdout_fraction", holdout_fraction}, {"seed", seed}};
}

ProbeConfig ProbeConfig::from_json(const nlohmann::json& j) {
  ProbeConfig c;
  c.G = j.value("G", c.G);
  c.k_lt = j.value("k_lt", c.k_lt);
  c.lambda = j.value("lambda", c.lambda);
  c.init_noise = j.value("init_noise", c.init_noise);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json LtTerms::to_json() const {
  return {{"entropy", entropy}, {"decidedness", decidedness}, {"feature_drift", feature_drift}};
}

LtTerms LtTerms::from_json(const nlohmann::json& j) {
  LtTerms t;
  t.entropy = j.value("entropy", t.entropy);
  t.decidedness = j.value("decidedness", t.decidedness);
  t.feature_drift = j.value("feature_drift", t.feature_drift);
  return t;
}

namespace {

ad::Var identity_matrix(int d) {
  Tensor eye({d, d});
  for (int i = 0; i < d; ++i) eye[static_cast<std::size_t>(i) * d + i] = 1.0;
  return ad::constant(std::move(eye));
}

std::string op_name(int g) { return "W" + std::to_string(g); }

}  // namespace

AugmentationBank AugmentationBank::init(int input_dim, const ProbeConfig& cfg) {
  if (cfg.G < 1 || cfg.G > 6) throw ConfigError("G=" + std::to_string(cfg.G) + " out of range [1, 6]");
  if (cfg.k_lt < 1) throw ConfigError("k_lt must be >= 1");
  if (cfg.lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (cfg.init_noise < 0.0) throw ConfigError("init_noise must be non-negative");
  if (input_dim < 1) throw ConfigError("input_dim must be positive");
  AugmentationBank bank;
  bank.input_dim_ = input_dim;
  bank.k_lt_ = cfg.k_lt;
  bank.lambda_ = cfg.lambda;
  bank.identity_ = identity_matrix(input_dim);
  Rng rng(derive_seed(cfg.seed, 0xA46B0ULL));
  for (int g = 0; g < cfg.G; ++g) {
    Tensor w = bank.identity_.value();
    if (cfg.init_noise > 0.0) {
      for (auto& v : w.span()) v += cfg.init_noise * standard_normal(rng);
    }
    bank.ops_.push_back(ad::leaf(std::move(w), false));
  }
  bank.meta_["config"] = cfg.to_json();
  return bank;
}

ad::Var AugmentationBank::apply(int g, const ad::Var& x) const {
  const Shape shape = x.shape();
  if (shape.size() != 4 || static_cast<int>(shape_numel(shape) / static_cast<std::size_t>(shape[0])) != input_dim_) {
    throw ContractError("augmentation input " + shape_str(shape) + " does not flatten to " + std::to_string(input_dim_));
  }
  const ad::Var flat = ad::reshape(x, {shape[0], input_dim_});
  const ad::Var moved = ad::clamp(ad::linear(flat, op(g), ad::Var()), 0.0, 1.0);
  return ad::reshape(moved, shape);
}

ad::Var AugmentationBank::identity_penalty() const {
  ad::Var total;
  for (const auto& w : ops_) {
    const ad::Var d = ad::sum(ad::square(ad::sub(w, identity_)));
    total = total.defined() ? ad::add(total, d) : d;
  }
  return ad::scale(total, lambda_);
}

double AugmentationBank::distance_from_identity(int g) const {
  const Tensor& w = op(g).value();
  double s = 0.0;
  for (int i = 0; i < input_dim_; ++i) {
    for (int j = 0; j < input_dim_; ++j) {
      const double d = w[static_cast<std::size_t>(i) * input_dim_ + j] - (i == j ? 1.0 : 0.0);
      s += d * d;
    }
  }
  return std::sqrt(s);
}

std::size_t AugmentationBank::parameter_count() const {
  return ops_.size() * static_cast<std::size_t>(input_dim_) * static_cast<std::size_t>(input_dim_);
}

void AugmentationBank::set_trainable(bool on) {
  for (auto& w : ops_) {
    w.set_requires_grad(on);
    w.zero_grad();
  }
}

std::string AugmentationBank::fingerprint() const {
  std::map<std::string, Tensor> t;
  for (int g = 0; g < size(); ++g) t[op_name(g)] = op(g).value();
  t["__k_lt__"] = Tensor::scalar(k_lt_);
  return tensor_fingerprint(t);
}

Archive AugmentationBank::to_archive() const {
  Archive a("augmentation_bank");
  a.meta() = meta_;
  a.meta()["G"] = size();
  a.meta()["k_lt"] = k_lt_;
  a.meta()["lambda"] = lambda_;
  a.meta()["input_dim"] = input_dim_;
  a.meta()["fingerprint"] = fingerprint();
  for (int g = 0; g < size(); ++g) a.put(op_name(g), op(g).value());
  return a;
}

AugmentationBank AugmentationBank::from_archive(const Archive& a) {
  if (a.kind() != "augmentation_bank") throw LoadError("archive is not an augmentation bank");
  const auto& m = a.meta();
  ProbeConfig cfg;
  cfg.G = m.at("G").get<int>();
  cfg.k_lt = m.at("k_lt").get<int>();
  cfg.lambda = m.at("lambda").get<double>();
  cfg.init_noise = 0.0;
  AugmentationBank bank = init(m.at("input_dim").get<int>(), cfg);
  for (int g = 0; g < bank.size(); ++g) {
    const Tensor& t = a.get(op_name(g));
    if (t.shape() != bank.op(g).shape()) throw LoadError("augmentation operator " + op_name(g) + " has wrong shape");
    bank.op(g).mutable_value() = t;
  }
  bank.meta_ = m;
  if (m.contains("fingerprint") && m.at("fingerprint").get<std::string>() != bank.fingerprint()) {
    throw LoadError("augmentation bank fingerprint mismatch (corrupt parameters)");
  }
  return bank;
}

AugmentationBank AugmentationBank::load(const std::filesystem::path& path) {
  return from_archive(Archive::load(path, "augmentation_bank"));
}

LtGraph lt_graph(const Classifier& model, const AugmentationBank& bank, const ad::Var& x,
                 const Classifier::Forward& clean, const std::vector<int>& predicted, const LtTerms& terms) {
  const int L = model.num_layers();
  if (bank.k_lt() > L) {
    throw ConfigError("k_lt=" + std::to_string(bank.k_lt()) + " exceeds the model's " + std::to_string(L) + " layers");
  }
  if (bank.input_dim() != model.input_dim()) throw ContractError("augmentation bank does not match the model input");
  const int n = x.dim(0);
  const int classes = model.num_classes();
  if (static_cast<int>(predicted.size()) != n) throw ContractError("predicted labels do not match the batch");

  LtGraph out;
  out.entropy = terms.entropy ? ad::softmax_entropy_rows(clean.logits) : ad::constant(Tensor({n, 1}, 1.0));
  ad::Var target;
  if (terms.decidedness) {
    Tensor oh({n, classes});
    for (int i = 0; i < n; ++i) oh[static_cast<std::size_t>(i) * classes + predicted[static_cast<std::size_t>(i)]] = 1.0;
    target = ad::constant(std::move(oh));
  } else {
    target = ad::softmax_rows(clean.logits);
  }

  const double drift_scale = 1.0 / static_cast<double>(L - bank.k_lt() + 1);
  ad::Var total;
  for (int g = 0; g < bank.size(); ++g) {
    const auto aug = model.forward(bank.apply(g, x));
    ad::Var dz;
    for (int i = bank.k_lt(); i <= L; ++i) {
      const auto idx = static_cast<std::size_t>(i - 1);
      const ad::Var d = ad::row_mean(ad::square(ad::sub(clean.taps[idx], aug.taps[idx])));
      dz = dz.defined() ? ad::add(dz, d) : d;
    }
    dz = ad::scale(dz, drift_scale);
    const ad::Var dl = ad::row_sum(ad::square(ad::sub(target, ad::softmax_rows(aug.logits))));
    ad::Var s = ad::log_floor(ad::mul(out.entropy, dl), kScoreLogFloor);
    if (terms.feature_drift) s = ad::sub(s, ad::log_floor(dz, kScoreLogFloor));
    out.delta_z.push_back(dz);
    out.delta_l.push_back(dl);
    out.s.push_back(s);
    total = total.defined() ? ad::add(total, s) : s;
  }
  out.lt = ad::scale(total, 1.0 / bank.size());
  return out;
}

std::vector<LtBreakdown> lt_scores(const Tensor& x, const Classifier& model, const AugmentationBank& bank,
                                   const LtTerms& terms) {
  constexpr int kChunk = 128;
  std::vector<LtBreakdown> out;
  const int n = x.dim(0);
  out.reserve(static_cast<std::size_t>(n));
  for (int b = 0; b < n; b += kChunk) {
    const int e = std::min(n, b + kChunk);
    const ad::Var xv = ad::constant(x.slice_rows(b, e));
    const auto clean = model.forward(xv);
    std::vector<int> pred;
    for (int i = 0; i < e - b; ++i) pred.push_back(argmax(clean.logits.value().row(i)));
    const LtGraph g = lt_graph(model, bank, xv, clean, pred, terms);
    for (int i = 0; i < e - b; ++i) {
      const auto r = static_cast<std::size_t>(i);
      LtBreakdown br;
      br.entropy_weight = g.entropy.value()[r];
      for (int k = 0; k < bank.size(); ++k) {
        const auto kk = static_cast<std::size_t>(k);
        br.per_aug.push_back({g.delta_z[kk].value()[r], g.delta_l[kk].value()[r], g.s[kk].value()[r]});
      }
      br.lt = g.lt.value()[r];
      out.push_back(std::move(br));
    }
  }
  return out;
}

LtBreakdown lt_score(const Tensor& x, const Classifier& model, const AugmentationBank& bank, const LtTerms& terms) {
  if (x.rank() == 3) {
    Shape s = x.shape();
    s.insert(s.begin(), 1);
    return lt_scores(x.reshaped(s), model, bank, terms).front();
  }
  if (x.rank() != 4 || x.dim(0) != 1) throw ContractError("lt_score expects a single image");
  return lt_scores(x, model, bank, terms).front();
}

namespace {

double mean_lt(const Tensor& images, const Classifier& model, const AugmentationBank& bank, const LtTerms& terms) {
  const auto br = lt_scores(images, model, bank, terms);
  double s = 0.0;
  for (const auto& b : br) s += b.lt;
  return br.empty() ? 0.0 : s / static_cast<double>(br.size());
}

}  // namespace

AugmentationBank train_augmentations(const DatasetSplit& benign, const Classifier& model, AugmentationBank bank,
                                     const ProbeConfig& cfg, const LtTerms& terms) {
  benign.validate();
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("probe epochs/batch_size invalid");
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0)) {
    throw ConfigError("probe holdout_fraction must be in (0, 1)");
  }
  if (bank.input_dim() != model.input_dim()) throw ContractError("augmentation bank does not match the model input");
  // Copies share nodes; detach so the caller's operators stay untouched.
  for (int g = 0; g < bank.size(); ++g) bank.op(g) = ad::leaf(bank.op(g).value(), false);

  Rng rng(derive_seed(cfg.seed, 0xA467A1AULL));
  const int n = benign.size();
  const auto order = permutation(n, rng);
  const int n_hold = std::max(1, static_cast<int>(std::lround(cfg.holdout_fraction * n)));
  const int n_fit = n - n_hold;
  if (n_fit < 1) throw ConfigError("too few benign images to train augmentations");
  const std::vector<int> fit_rows(order.begin(), order.begin() + n_fit);
  const std::vector<int> hold_rows(order.begin() + n_fit, order.end());
  const Tensor fit = benign.images.gather_rows(fit_rows);
  const Tensor hold = benign.images.gather_rows(hold_rows);

  const double hold_initial = mean_lt(hold, model, bank, terms);
  double hold_best = hold_initial;
  std::vector<Tensor> best;
  for (int g = 0; g < bank.size(); ++g) best.push_back(bank.op(g).value());
  int best_epoch = 0;

  bank.set_trainable(true);
  AdamW opt(bank.parameters(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay, .clip_norm = cfg.clip_norm});
  nlohmann::json curve = nlohmann::json::array();
  nlohmann::json hold_curve = nlohmann::json::array({hold_initial});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = permutation(n_fit, rng);
    double total = 0.0;
    for (int b = 0; b < n_fit; b += cfg.batch_size) {
      const int e = std::min(n_fit, b + cfg.batch_size);
      const std::vector<int> rows(perm.begin() + b, perm.begin() + e);
      const ad::Var xb = ad::constant(fit.gather_rows(rows));
      const auto clean = model.forward(xb);
      std::vector<int> pred;
      for (int i = 0; i < e - b; ++i) pred.push_back(argmax(clean.logits.value().row(i)));

      opt.zero_grad();
      const LtGraph g = lt_graph(model, bank, xb, clean, pred, terms);
      const ad::Var loss = ad::add(ad::mean(g.lt), bank.identity_penalty());
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw TrainingError("augmentation loss became non-finite at epoch " + std::to_string(epoch));
      }
      ad::backward(loss);
      opt.step();
      total += lv * (e - b);
    }
    curve.push_back(total / n_fit);

    bank.set_trainable(false);
    const double h = mean_lt(hold, model, bank, terms);
    bank.set_trainable(true);
    hold_curve.push_back(h);
    if (!std::isfinite(h)) throw TrainingError("augmentation held-out LT became non-finite");
    if (h <= hold_best) {
      hold_best = h;
      best_epoch = epoch + 1;
      for (int g = 0; g < bank.size(); ++g) best[static_cast<std::size_t>(g)] = bank.op(g).value();
    }
  }
  bank.set_trainable(false);
  for (int g = 0; g < bank.size(); ++g) bank.op(g).mutable_value() = best[static_cast<std::size_t>(g)];

  auto& meta = bank.metadata();
  meta["config"] = cfg.to_json();
  meta["terms"] = terms.to_json();
  meta["loss_curve"] = curve;
  meta["holdout_lt_curve"] = hold_curve;
  meta["holdout_lt_initial"] = hold_initial;
  meta["holdout_lt_final"] = hold_best;
  meta["selected_epoch"] = best_epoch;
  meta["final_loss"] = curve.empty() ? hold_best : curve.back().get<double>();
  return bank;
}

}  // namespace lwd
