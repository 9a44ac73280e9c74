#include "lwd/recovery.hpp"

#include <algorithm>
#include <cmath>

#include "lwd/errors.hpp"
#include "lwd/optim.hpp"

namespace lwd {

nlohmann::json RecoveryConfig::to_json() const {
  return {{"k_rt", k_rt},   {"depth", depth},         {"hidden_dim", hidden_dim},
          {"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},
          {"weight_decay", weight_decay}, {"holdout_fraction", holdout_fraction}, {"error_units", error_units}, {"seed", seed}};
}

RecoveryConfig RecoveryConfig::from_json(const nlohmann::json& j) {
  RecoveryConfig c;
  c.k_rt = j.value("k_rt", c.k_rt);
  c.depth = j.value("depth", c.depth);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.holdout_fraction = j.value("holdout_fraction", c.holdout_fraction);
  c.error_units = j.value("error_units", c.error_units);
  if (c.error_units != "benign" && c.error_units != "raw") {
    throw ConfigError("recovery error_units must be 'benign' or 'raw', got '" + c.error_units + "'");
  }
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json RtTerms::to_json() const { return {{"inverse_entropy", inverse_entropy}, {"log_error", log_error}}; }

RtTerms RtTerms::from_json(const nlohmann::json& j) {
  RtTerms t;
  t.inverse_entropy = j.value("inverse_entropy", t.inverse_entropy);
  t.log_error = j.value("log_error", t.log_error);
  return t;
}

MlpHead::MlpHead(int in_dim, int hidden_dim, int depth, int out_dim, Rng& rng) : in_dim_(in_dim), out_dim_(out_dim) {
  int fan_in = in_dim;
  for (int l = 0; l <= depth; ++l) {
    const bool last = l == depth;
    const int fan_out = last ? out_dim : hidden_dim;
    const double sd = std::sqrt((last ? 1.0 : 2.0) / fan_in);
    Tensor w({fan_out, fan_in});
    for (auto& v : w.span()) v = sd * standard_normal(rng);
    layers_.push_back(ad::leaf(std::move(w), false));
    layers_.push_back(ad::leaf(Tensor({fan_out}), false));
    fan_in = fan_out;
  }
}

ad::Var MlpHead::forward(const ad::Var& x) const {
  ad::Var h = x;
  const std::size_t n = layers_.size() / 2;
  for (std::size_t l = 0; l < n; ++l) {
    h = ad::linear(h, layers_[2 * l], layers_[2 * l + 1]);
    if (l + 1 < n) h = ad::gelu(h);
  }
  return h;
}

std::size_t MlpHead::parameter_count() const {
  std::size_t n = 0;
  for (const auto& v : layers_) n += v.value().size();
  return n;
}

RecoveryBank RecoveryBank::create(const std::vector<int>& layer_dims, const RecoveryConfig& cfg) {
  const int L = static_cast<int>(layer_dims.size());
  if (L < 3) throw ConfigError("recovery needs at least 3 layers");
  if (cfg.k_rt < 1 || cfg.k_rt > L - 1) {
    throw ConfigError("k_rt=" + std::to_string(cfg.k_rt) + " out of range [1, " + std::to_string(L - 1) + "]");
  }
  if (cfg.depth < 1) throw ConfigError("recovery depth must be >= 1");
  if (cfg.hidden_dim < 1) throw ConfigError("recovery hidden_dim must be >= 1");
  RecoveryBank bank;
  bank.layer_dims_ = layer_dims;
  bank.k_rt_ = cfg.k_rt;
  bank.depth_ = cfg.depth;
  bank.hidden_dim_ = cfg.hidden_dim;
  Rng rng(derive_seed(cfg.seed, 0x4EC0BE4ULL));
  const int d_last = layer_dims.back();
  for (int k = cfg.k_rt; k <= L - 1; ++k) {
    bank.heads_.emplace(k, MlpHead(d_last, cfg.hidden_dim, cfg.depth, layer_dims[static_cast<std::size_t>(k - 1)], rng));
  }
  bank.error_scale_.assign(bank.heads_.size(), 1.0);
  bank.meta_["config"] = cfg.to_json();
  return bank;
}

void RecoveryBank::set_error_scale(std::vector<double> scale) {
  if (scale.size() != heads_.size()) throw ContractError("error scale needs one entry per recovery head");
  for (double s : scale) {
    if (!(s > 0.0) || !std::isfinite(s)) throw ValidationError("error scale entries must be positive and finite");
  }
  error_scale_ = std::move(scale);
}

ad::Var RecoveryBank::error_rows(const std::vector<ad::Var>& taps) const {
  if (static_cast<int>(taps.size()) != num_layers()) {
    throw ContractError("expected " + std::to_string(num_layers()) + " taps, got " + std::to_string(taps.size()));
  }
  const ad::Var& z_last = taps.back();
  std::vector<ad::Var> cols;
  std::size_t slot = 0;
  for (const auto& [k, head] : heads_) {
    const ad::Var& z_k = taps[static_cast<std::size_t>(k - 1)];
    if (z_k.shape().size() != 2 || z_k.dim(1) != head.out_dim() || z_last.dim(1) != head.in_dim()) {
      throw ContractError("tap dimensions do not match recovery head for layer " + std::to_string(k));
    }
    ad::Var e = ad::row_mean(ad::square(ad::sub(z_k, head.forward(z_last))));
    const double s = error_scale_[slot++];
    cols.push_back(s == 1.0 ? e : ad::scale(e, 1.0 / s));
  }
  return ad::concat_cols(cols);
}

void RecoveryBank::check_trace(const LayerTrace& t) const {
  if (t.num_layers() != num_layers()) throw ContractError("trace layer count does not match recovery bank");
  for (int i = 0; i < num_layers(); ++i) {
    if (static_cast<int>(t.z[static_cast<std::size_t>(i)].size()) != layer_dims_[static_cast<std::size_t>(i)]) {
      throw ContractError("trace layer " + std::to_string(i + 1) + " has dimension " +
                          std::to_string(t.z[static_cast<std::size_t>(i)].size()) + ", bank expects " +
                          std::to_string(layer_dims_[static_cast<std::size_t>(i)]));
    }
  }
}

std::vector<ad::Var> RecoveryBank::taps_from(const std::vector<LayerTrace>& traces, std::size_t begin,
                                             std::size_t end) const {
  std::vector<ad::Var> taps;
  const int n = static_cast<int>(end - begin);
  for (int i = 0; i < num_layers(); ++i) {
    const int d = layer_dims_[static_cast<std::size_t>(i)];
    Tensor t({n, d});
    for (int r = 0; r < n; ++r) {
      const auto& z = traces[begin + static_cast<std::size_t>(r)].z[static_cast<std::size_t>(i)];
      std::copy(z.begin(), z.end(), t.row(r).begin());
    }
    taps.push_back(ad::constant(std::move(t)));
  }
  return taps;
}

ErrorVector RecoveryBank::layer_errors(const LayerTrace& trace) const {
  return layer_errors(std::vector<LayerTrace>{trace}).front();
}

std::vector<ErrorVector> RecoveryBank::layer_errors(const std::vector<LayerTrace>& traces) const {
  for (const auto& t : traces) check_trace(t);
  std::vector<ErrorVector> out;
  out.reserve(traces.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t b = 0; b < traces.size(); b += kChunk) {
    const std::size_t e = std::min(traces.size(), b + kChunk);
    const Tensor errs = error_rows(taps_from(traces, b, e)).value();
    for (int r = 0; r < errs.dim(0); ++r) {
      auto row = errs.row(r);
      out.push_back({std::vector<double>(row.begin(), row.end()), k_rt_});
    }
  }
  return out;
}

double RecoveryBank::loss(const std::vector<LayerTrace>& traces) const {
  if (traces.empty()) return 0.0;
  double total = 0.0;
  for (const auto& ev : layer_errors(traces)) {
    for (double v : ev.e) total += v;
  }
  return total / static_cast<double>(traces.size());
}

std::vector<ad::Var> RecoveryBank::parameters() const {
  std::vector<ad::Var> out;
  for (const auto& [k, head] : heads_) out.insert(out.end(), head.layers().begin(), head.layers().end());
  return out;
}

std::size_t RecoveryBank::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [k, head] : heads_) n += head.parameter_count();
  return n;
}

void RecoveryBank::set_trainable(bool on) {
  for (auto& [k, head] : heads_) {
    for (auto& v : head.layers()) {
      v.set_requires_grad(on);
      v.zero_grad();
    }
  }
}

namespace {

std::string head_tensor_name(int k, std::size_t idx) {
  return "h" + std::to_string(k) + "." + std::to_string(idx / 2) + (idx % 2 == 0 ? ".w" : ".b");
}

}  // namespace

std::string RecoveryBank::fingerprint() const {
  std::map<std::string, Tensor> t;
  for (const auto& [k, head] : heads_) {
    for (std::size_t i = 0; i < head.layers().size(); ++i) t[head_tensor_name(k, i)] = head.layers()[i].value();
  }
  t["__dims__"] = Tensor({num_layers()}, std::vector<double>(layer_dims_.begin(), layer_dims_.end()));
  t["__error_scale__"] = Tensor({static_cast<int>(error_scale_.size())}, error_scale_);
  return tensor_fingerprint(t);
}

Archive RecoveryBank::to_archive() const {
  Archive a("recovery_bank");
  a.meta() = meta_;
  a.meta()["k_rt"] = k_rt_;
  a.meta()["depth"] = depth_;
  a.meta()["hidden_dim"] = hidden_dim_;
  a.meta()["layer_dims"] = layer_dims_;
  a.meta()["fingerprint"] = fingerprint();
  for (const auto& [k, head] : heads_) {
    for (std::size_t i = 0; i < head.layers().size(); ++i) a.put(head_tensor_name(k, i), head.layers()[i].value());
  }
  a.put("error_scale", Tensor({static_cast<int>(error_scale_.size())}, error_scale_));
  return a;
}

RecoveryBank RecoveryBank::from_archive(const Archive& a) {
  if (a.kind() != "recovery_bank") throw LoadError("archive is not a recovery bank");
  const auto& m = a.meta();
  RecoveryConfig cfg;
  cfg.k_rt = m.at("k_rt").get<int>();
  cfg.depth = m.at("depth").get<int>();
  cfg.hidden_dim = m.at("hidden_dim").get<int>();
  RecoveryBank bank = create(m.at("layer_dims").get<std::vector<int>>(), cfg);
  for (auto& [k, head] : bank.heads_) {
    for (std::size_t i = 0; i < head.layers().size(); ++i) {
      const Tensor& t = a.get(head_tensor_name(k, i));
      if (t.shape() != head.layers()[i].shape()) {
        throw LoadError("recovery tensor '" + head_tensor_name(k, i) + "' has wrong shape");
      }
      head.layers()[i].mutable_value() = t;
    }
  }
  if (a.has("error_scale")) {
    const auto sc = a.get("error_scale").vec();
    try {
      bank.set_error_scale(std::vector<double>(sc.begin(), sc.end()));
    } catch (const Error& e) {
      throw LoadError(std::string("recovery error scale: ") + e.what());
    }
  }
  bank.meta_ = m;
  if (m.contains("fingerprint") && m.at("fingerprint").get<std::string>() != bank.fingerprint()) {
    throw LoadError("recovery bank fingerprint mismatch (corrupt parameters)");
  }
  return bank;
}

RecoveryBank RecoveryBank::load(const std::filesystem::path& path) {
  return from_archive(Archive::load(path, "recovery_bank"));
}

RecoveryBank train_recovery_bank(const std::vector<LayerTrace>& traces, const RecoveryConfig& cfg) {
  if (traces.empty()) throw ConfigError("no traces to train the recovery bank on");
  std::vector<int> dims;
  for (const auto& z : traces.front().z) dims.push_back(static_cast<int>(z.size()));
  RecoveryBank bank = RecoveryBank::create(dims, cfg);
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw ConfigError("recovery epochs/batch_size invalid");
  if (!(cfg.holdout_fraction > 0.0 && cfg.holdout_fraction < 1.0)) {
    throw ConfigError("recovery holdout_fraction must be in (0, 1)");
  }

  Rng rng(derive_seed(cfg.seed, 0x4EC0DA7AULL));
  const auto order = permutation(static_cast<int>(traces.size()), rng);
  const int n_hold = std::max(1, static_cast<int>(std::lround(cfg.holdout_fraction * static_cast<double>(traces.size()))));
  const int n_fit = static_cast<int>(traces.size()) - n_hold;
  if (n_fit < 1) throw ConfigError("too few traces to train the recovery bank");
  std::vector<LayerTrace> fit, hold;
  for (int i = 0; i < static_cast<int>(order.size()); ++i) {
    (i < n_fit ? fit : hold).push_back(traces[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  }

  const double hold_before = bank.loss(hold);
  bank.set_trainable(true);
  AdamW opt(bank.parameters(), {.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  nlohmann::json curve = nlohmann::json::array();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = permutation(n_fit, rng);
    std::vector<LayerTrace> shuffled;
    shuffled.reserve(fit.size());
    for (int p : perm) shuffled.push_back(fit[static_cast<std::size_t>(p)]);
    double total = 0.0;
    for (int b = 0; b < n_fit; b += cfg.batch_size) {
      const int e = std::min(n_fit, b + cfg.batch_size);
      opt.zero_grad();
      const ad::Var errs = bank.error_rows(bank.taps_from(shuffled, static_cast<std::size_t>(b), static_cast<std::size_t>(e)));
      const ad::Var loss = ad::mean(ad::row_sum(errs));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw TrainingError("recovery loss became non-finite at epoch " + std::to_string(epoch));
      }
      ad::backward(loss);
      opt.step();
      total += lv * (e - b);
    }
    curve.push_back(total / n_fit);
  }
  bank.set_trainable(false);
  const double hold_after = bank.loss(hold);
  if (!std::isfinite(hold_after)) throw TrainingError("recovery held-out loss is non-finite");
  if (hold_after > hold_before) {
    throw TrainingError("recovery held-out loss rose from " + std::to_string(hold_before) + " to " +
                        std::to_string(hold_after));
  }
  if (cfg.error_units == "benign") {
    std::vector<double> scale(bank.heads_.size(), 0.0);
    for (const auto& ev : bank.layer_errors(hold)) {
      for (std::size_t k = 0; k < scale.size(); ++k) scale[k] += ev.e[k];
    }
    for (double& s : scale) s = std::max(kScoreLogFloor, s / static_cast<double>(hold.size()));
    bank.set_error_scale(scale);
    bank.meta_["error_scale"] = scale;
  }
  bank.meta_["config"] = cfg.to_json();
  bank.meta_["loss_curve"] = curve;
  bank.meta_["holdout_loss_initial"] = hold_before;
  bank.meta_["holdout_loss_final"] = hold_after;
  bank.meta_["final_loss"] = curve.empty() ? hold_after : curve.back().get<double>();
  bank.meta_["optimizer"] = {{"name", "adamw"}, {"lr", cfg.lr}, {"weight_decay", cfg.weight_decay},
                             {"batch_size", cfg.batch_size}};
  return bank;
}

double rt_score(std::span<const double> e, const RtTerms& terms) {
  if (e.size() < 2) throw ContractError("RT needs at least two layer errors");
  double factor = 1.0;
  if (terms.inverse_entropy) {
    // Equal errors have exactly maximal entropy; rounding would leave a
    // residue of either sign.
    const bool uniform = std::all_of(e.begin(), e.end(), [&](double v) { return v == e.front(); });
    factor = uniform ? 0.0 : std::max(0.0, std::log(static_cast<double>(e.size())) - shannon_entropy(softmax(e)));
  }
  double magnitude = 1.0;
  if (terms.log_error) magnitude = std::log(std::max(kScoreLogFloor, mean_of(e)));
  return factor * magnitude;
}

ad::Var rt_score_rows(const ad::Var& errors, const RtTerms& terms) {
  if (errors.shape().size() != 2 || errors.dim(1) < 2) throw ContractError("RT needs at least two layer errors");
  const int n = errors.dim(0);
  ad::Var factor = ad::constant(Tensor({n, 1}, 1.0));
  if (terms.inverse_entropy) {
    factor = ad::add_scalar(ad::scale(ad::softmax_entropy_rows(errors), -1.0), std::log(static_cast<double>(errors.dim(1))));
  }
  if (!terms.log_error) return factor;
  const ad::Var magnitude = ad::log_floor(ad::row_mean(errors), kScoreLogFloor);
  return terms.inverse_entropy ? ad::mul(factor, magnitude) : magnitude;
}

}  // namespace lwd
