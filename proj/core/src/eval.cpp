#include "lwd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "lwd/archive.hpp"
#include "lwd/errors.hpp"
#include "lwd/math.hpp"
#include "lwd/plot.hpp"

namespace lwd {

namespace {

nlohmann::json finite_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

std::string provenance_id(const nlohmann::json& provenance) { return sha256_hex(provenance.dump()).substr(0, 16); }

}  // namespace

double roc_auc(std::span<const double> benign, std::span<const double> adversarial) {
  if (benign.empty() || adversarial.empty()) throw ContractError("AUC needs non-empty benign and adversarial scores");
  std::vector<double> b(benign.begin(), benign.end());
  for (double v : b) {
    if (!std::isfinite(v)) throw ValidationError("non-finite benign score in AUC");
  }
  std::sort(b.begin(), b.end());
  double wins = 0.0;
  for (double a : adversarial) {
    if (!std::isfinite(a)) throw ValidationError("non-finite adversarial score in AUC");
    const auto lo = std::lower_bound(b.begin(), b.end(), a);
    const auto hi = std::upper_bound(lo, b.end(), a);
    wins += static_cast<double>(lo - b.begin()) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(b.size()) * static_cast<double>(adversarial.size()));
}

std::vector<RocPoint> roc_curve(std::span<const double> benign, std::span<const double> adversarial) {
  if (benign.empty() || adversarial.empty()) throw ContractError("ROC needs non-empty benign and adversarial scores");
  std::vector<double> cuts(benign.begin(), benign.end());
  cuts.insert(cuts.end(), adversarial.begin(), adversarial.end());
  std::sort(cuts.begin(), cuts.end(), std::greater<>());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  std::vector<double> b(benign.begin(), benign.end()), a(adversarial.begin(), adversarial.end());
  std::sort(b.begin(), b.end());
  std::sort(a.begin(), a.end());
  auto above = [](const std::vector<double>& v, double t) {
    return static_cast<double>(v.end() - std::lower_bound(v.begin(), v.end(), t));
  };
  std::vector<RocPoint> out{{0.0, 0.0}};
  for (double t : cuts) out.push_back({above(b, t) / static_cast<double>(b.size()), above(a, t) / static_cast<double>(a.size())});
  return out;
}

double robust_accuracy(const std::vector<bool>& correct, const std::vector<bool>& flagged) {
  if (correct.size() != flagged.size()) throw ContractError("robust accuracy masks differ in length");
  if (correct.empty()) return 0.0;
  std::size_t ok = 0;
  for (std::size_t i = 0; i < correct.size(); ++i) ok += correct[i] || flagged[i];
  return static_cast<double>(ok) / static_cast<double>(correct.size());
}

RobustAccuracy robust_accuracy_at_fpr(const AdvBatch& batch, const DetectorParts& parts, const DetectorCalibration& calib,
                                      Measure measure, double fpr) {
  const auto det = detect(batch.adversarials, parts, calib, measure, fpr);
  const auto pred = parts.model->predict(batch.adversarials);
  std::vector<bool> correct, flagged;
  for (int i = 0; i < batch.size(); ++i) {
    correct.push_back(pred[static_cast<std::size_t>(i)] == batch.labels[static_cast<std::size_t>(i)]);
    flagged.push_back(det[static_cast<std::size_t>(i)].flag);
  }
  RobustAccuracy r;
  r.ra = robust_accuracy(correct, flagged);
  r.n = batch.size();
  r.flagged_rate = r.n ? static_cast<double>(std::count(flagged.begin(), flagged.end(), true)) / r.n : 0.0;
  return r;
}

nlohmann::json ShiftProfile::to_json() const {
  return {{"population", population}, {"mean_profile", mean_profile}, {"dispersion", dispersion},
          {"peak_layers", peak_layers}, {"flatness", flatness},        {"peak_factor", peak_factor},
          {"k_rt", k_rt},               {"count", count}};
}

ShiftProfile shift_profile(const std::vector<ErrorVector>& errors, const std::string& population, double peak_factor) {
  ShiftProfile p;
  p.population = population;
  p.peak_factor = peak_factor;
  p.count = static_cast<int>(errors.size());
  if (errors.empty()) return p;
  const std::size_t m = errors.front().e.size();
  p.k_rt = errors.front().k_rt;
  std::vector<double> sum(m, 0.0), sumsq(m, 0.0);
  for (const auto& ev : errors) {
    if (ev.e.size() != m) throw ContractError("error vectors of different lengths in one profile");
    const auto s = softmax(ev.e);
    for (std::size_t k = 0; k < m; ++k) {
      sum[k] += s[k];
      sumsq[k] += s[k] * s[k];
    }
  }
  const double n = static_cast<double>(errors.size());
  for (std::size_t k = 0; k < m; ++k) {
    const double mu = sum[k] / n;
    p.mean_profile.push_back(mu);
    p.dispersion.push_back(std::max(0.0, sumsq[k] / n - mu * mu));
    if (mu > peak_factor / static_cast<double>(m)) p.peak_layers.push_back(p.k_rt + static_cast<int>(k));
  }
  p.flatness = *std::max_element(p.mean_profile.begin(), p.mean_profile.end());
  return p;
}

std::pair<ShiftProfile, ShiftProfile> layer_shift_profile(const std::vector<LayerTrace>& benign,
                                                          const std::vector<LayerTrace>& adversarial,
                                                          const RecoveryBank& bank, const std::string& attack_name,
                                                          double peak_factor) {
  return {shift_profile(bank.layer_errors(benign), "benign", peak_factor),
          shift_profile(bank.layer_errors(adversarial), attack_name, peak_factor)};
}

double ParameterCounts::overhead_ratio() const {
  return classifier ? static_cast<double>(detector()) / static_cast<double>(classifier) : 0.0;
}

nlohmann::json ParameterCounts::to_json() const {
  return {{"classifier", classifier},
          {"recovery", recovery},
          {"augmentation", augmentation},
          {"detector", detector()},
          {"overhead_ratio", overhead_ratio()}};
}

ParameterCounts parameter_count(const Classifier& model, const RecoveryBank* recovery, const AugmentationBank* augment) {
  ParameterCounts c;
  c.classifier = model.parameter_count();
  if (recovery != nullptr) c.recovery = recovery->parameter_count();
  if (augment != nullptr) c.augmentation = augment->parameter_count();
  return c;
}

std::size_t mlp_parameter_count(int in_dim, int hidden_dim, int depth, int out_dim) {
  const auto in = static_cast<std::size_t>(in_dim), h = static_cast<std::size_t>(hidden_dim),
             out = static_cast<std::size_t>(out_dim);
  return in * h + h + static_cast<std::size_t>(depth - 1) * (h * h + h) + h * out + out;
}

ScoreStats ScoreStats::of(std::span<const double> v) {
  ScoreStats s;
  s.n = static_cast<int>(v.size());
  if (v.empty()) return s;
  s.mean = mean_of(v);
  s.sd = std::sqrt(variance_of(v));
  return s;
}

nlohmann::json ScoreStats::to_json() const { return {{"mean", mean}, {"sd", sd}, {"n", n}}; }

nlohmann::json AttackEvaluation::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["config"] = config.to_json();
  j["attempted"] = attempted;
  j["evaluated"] = evaluated;
  j["success_rate"] = success_rate;
  for (const auto& [m, v] : auc) j["auc"][to_string(m)] = finite_or_null(v);
  for (const auto& [m, levels] : ra) {
    for (const auto& [fpr, r] : levels) {
      j["robust_accuracy"][to_string(m)][fpr_key(fpr)] = {{"ra", r.ra}, {"flagged_rate", r.flagged_rate}, {"n", r.n}};
    }
  }
  for (const auto& [m, s] : adversarial_stats) j["adversarial_stats"][to_string(m)] = s.to_json();
  j["shift_profile"] = profile.to_json();
  j["components"] = components;
  j["log"] = log;
  return j;
}

const AttackEvaluation& EvalReport::attack(const std::string& name) const {
  for (const auto& a : attacks) {
    if (a.name == name) return a;
  }
  throw ConfigError("report has no attack named '" + name + "'");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["provenance"] = provenance;
  const std::string pid = provenance_id(provenance);
  j["provenance_id"] = pid;
  j["clean_accuracy"] = clean_accuracy;
  j["benign_evaluated"] = benign_evaluated;
  for (const auto& [m, s] : benign_stats) j["benign_stats"][to_string(m)] = s.to_json();
  for (const auto& [m, levels] : benign_fpr) {
    for (const auto& [fpr, v] : levels) j["benign_fpr"][to_string(m)][fpr_key(fpr)] = v;
  }
  j["benign_profile"] = benign_profile.to_json();
  j["benign_components"] = benign_components;
  j["attacks"] = nlohmann::json::array();
  for (const auto& a : attacks) {
    auto aj = a.to_json();
    aj["provenance_id"] = pid;
    j["attacks"].push_back(aj);
  }
  j["parameters"] = params.to_json();
  return j;
}

nlohmann::json score_components(const ScoreBatch& sb, const std::vector<bool>& keep) {
  std::map<std::string, std::vector<double>> cols;
  for (int i = 0; i < sb.size(); ++i) {
    const auto r = static_cast<std::size_t>(i);
    if (!keep[r]) continue;
    const auto& e = sb.errors[r].e;
    cols["rt_log_mean_error"].push_back(std::log(std::max(kScoreLogFloor, mean_of(e))));
    cols["rt_inverse_entropy"].push_back(std::log(static_cast<double>(e.size())) - shannon_entropy(softmax(e)));
    const auto& lt = sb.lt_parts[r];
    cols["lt_log_entropy"].push_back(std::log(std::max(kScoreLogFloor, lt.entropy_weight)));
    double dl = 0.0, dz = 0.0;
    for (const auto& g : lt.per_aug) {
      dl += std::log(std::max(kScoreLogFloor, g.delta_l));
      dz += std::log(std::max(kScoreLogFloor, g.delta_z));
    }
    const double n = std::max<std::size_t>(1, lt.per_aug.size());
    cols["lt_log_decidedness"].push_back(dl / n);
    cols["lt_log_drift"].push_back(dz / n);
  }
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [k, v] : cols) out[k] = ScoreStats::of(v).to_json();
  return out;
}

EvalReport evaluate_detector(const DetectorParts& parts, const DetectorCalibration& calib, const DatasetSplit& benign,
                             const std::vector<std::pair<std::string, AdvBatch>>& batches, const EvalOptions& opts) {
  check_compatible(calib, parts);
  for (double fpr : opts.fpr_levels) {
    for (Measure m : all_measures()) (void)calib.threshold(m, fpr);
  }
  DetectorParts p = parts;
  p.rt_terms = calib.rt_terms;
  p.lt_terms = calib.lt_terms;

  EvalReport report;
  report.provenance = {{"model_fingerprint", calib.model_fingerprint},
                       {"recovery_fingerprint", calib.recovery_fingerprint},
                       {"augmentation_fingerprint", calib.augmentation_fingerprint},
                       {"calibration_sha256", sha256_hex(calib.to_json().dump())},
                       {"fpr_levels", opts.fpr_levels},
                       {"peak_factor", opts.peak_factor}};
  report.params = parameter_count(*parts.model, parts.recovery, parts.augment);

  auto population = [&](const ScoreBatch& sb, const std::vector<bool>& keep, std::map<Measure, std::vector<double>>& out,
                        std::vector<ErrorVector>& errors) {
    for (int i = 0; i < sb.size(); ++i) {
      const auto r = static_cast<std::size_t>(i);
      if (!keep[r]) continue;
      const ScoreRecord s = calib.normalize(sb.rt[r], sb.lt[r]);
      for (Measure m : all_measures()) out[m].push_back(s.get(m));
      errors.push_back(sb.errors[r]);
    }
  };

  const ScoreBatch benign_sb = score_batch(benign.images, p);
  std::vector<bool> benign_ok;
  for (int i = 0; i < benign.size(); ++i) {
    benign_ok.push_back(benign_sb.predicted[static_cast<std::size_t>(i)] == benign.labels[static_cast<std::size_t>(i)]);
  }
  std::vector<ErrorVector> benign_errors;
  population(benign_sb, benign_ok, report.benign_scores, benign_errors);
  report.benign_evaluated = static_cast<int>(benign_errors.size());
  report.clean_accuracy = benign.size() ? static_cast<double>(report.benign_evaluated) / benign.size() : 0.0;
  if (report.benign_evaluated == 0) throw ValidationError("no correctly classified benign inputs to evaluate");
  for (Measure m : all_measures()) {
    const auto& v = report.benign_scores[m];
    report.benign_stats[m] = ScoreStats::of(v);
    for (double fpr : opts.fpr_levels) {
      const double tau = calib.threshold(m, fpr);
      report.benign_fpr[m][fpr] =
          static_cast<double>(std::count_if(v.begin(), v.end(), [tau](double s) { return s > tau; })) / static_cast<double>(v.size());
    }
  }
  report.benign_profile = shift_profile(benign_errors, "benign", opts.peak_factor);
  report.benign_components = score_components(benign_sb, benign_ok);

  for (const auto& [name, batch] : batches) {
    if (batch.originals.rank() != 4 || Shape(batch.originals.shape().begin() + 1, batch.originals.shape().end()) != parts.model->input_shape()) {
      throw ConfigError("adversarial batch '" + name + "' does not match the model input shape");
    }
    AttackEvaluation ae;
    ae.name = name;
    ae.config = batch.config;
    ae.log = batch.log;
    ae.attempted = batch.size();
    const auto orig_pred = parts.model->predict(batch.originals);
    const ScoreBatch sb = score_batch(batch.adversarials, p);
    std::vector<bool> keep, correct;
    int orig_ok = 0, fooled = 0;
    for (int i = 0; i < batch.size(); ++i) {
      const auto r = static_cast<std::size_t>(i);
      const bool was_ok = orig_pred[r] == batch.labels[r];
      const bool now_ok = sb.predicted[r] == batch.labels[r];
      const bool hit = batch.targets.empty() ? !now_ok : sb.predicted[r] == batch.targets[r];
      orig_ok += was_ok;
      fooled += was_ok && hit;
      keep.push_back(was_ok && hit);
      correct.push_back(now_ok);
    }
    ae.success_rate = orig_ok ? static_cast<double>(fooled) / orig_ok : 0.0;
    std::vector<ErrorVector> adv_errors;
    population(sb, keep, ae.scores, adv_errors);
    ae.evaluated = static_cast<int>(adv_errors.size());
    for (Measure m : all_measures()) {
      ae.adversarial_stats[m] = ScoreStats::of(ae.scores[m]);
      ae.auc[m] = ae.evaluated ? roc_auc(report.benign_scores[m], ae.scores[m]) : std::numeric_limits<double>::quiet_NaN();
      for (double fpr : opts.fpr_levels) {
        const double tau = calib.threshold(m, fpr);
        std::vector<bool> flagged;
        for (int i = 0; i < sb.size(); ++i) {
          const auto r = static_cast<std::size_t>(i);
          flagged.push_back(calib.normalize(sb.rt[r], sb.lt[r]).get(m) > tau);
        }
        RobustAccuracy ra;
        ra.n = batch.size();
        ra.ra = robust_accuracy(correct, flagged);
        ra.flagged_rate = ra.n ? static_cast<double>(std::count(flagged.begin(), flagged.end(), true)) / ra.n : 0.0;
        ae.ra[m][fpr] = ra;
      }
    }
    ae.profile = shift_profile(adv_errors, name, opts.peak_factor);
    ae.components = score_components(sb, keep);
    report.attacks.push_back(std::move(ae));
  }
  return report;
}

std::vector<std::filesystem::path> write_report_figures(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  auto emit = [&](const std::string& stem, const PlotSpec& spec, const std::vector<Series>& series) {
    const auto svg = dir / (stem + ".svg");
    const auto csv = dir / (stem + ".csv");
    write_file_atomic(svg, render_line_svg(spec, series));
    write_file_atomic(csv, series_csv(series));
    written.push_back(svg);
    written.push_back(csv);
  };

  auto profile_series = [](const ShiftProfile& p) {
    Series s{p.population, {}, p.mean_profile};
    for (std::size_t k = 0; k < p.mean_profile.size(); ++k) s.x.push_back(p.k_rt + static_cast<double>(k));
    return s;
  };
  std::vector<Series> profiles{profile_series(report.benign_profile)};
  for (const auto& a : report.attacks) {
    if (a.profile.count > 0) profiles.push_back(profile_series(a.profile));
  }
  emit("shift_profiles", {"Mean softmax error mass per layer", "layer k", "mean softmax(e)_k", true, false}, profiles);

  for (const auto& a : report.attacks) {
    if (a.evaluated == 0) continue;
    std::vector<Series> curves;
    for (Measure m : all_measures()) {
      Series s{to_string(m), {}, {}};
      for (const auto& pt : roc_curve(report.benign_scores.at(m), a.scores.at(m))) {
        s.x.push_back(pt.fpr);
        s.y.push_back(pt.tpr);
      }
      curves.push_back(std::move(s));
    }
    emit("roc_" + a.name, {"ROC, " + a.name, "false positive rate", "true positive rate", false, true}, curves);
  }
  return written;
}

// ----------------------------------------------------------------- ablation

const std::vector<std::string>& sweep_keys() {
  static const std::vector<std::string> keys = {"depth", "hidden_dim", "G", "k", "epsilon", "terms"};
  return keys;
}

nlohmann::json sweep_override(const std::string& key, const nlohmann::json& value) {
  if (key == "depth") return {{"recovery", {{"depth", value.get<int>()}}}};
  if (key == "hidden_dim") return {{"recovery", {{"hidden_dim", value.get<int>()}}}};
  if (key == "G") return {{"probe", {{"G", value.get<int>()}}}};
  if (key == "k") return {{"recovery", {{"k_rt", value.get<int>()}}}, {"probe", {{"k_lt", value.get<int>()}}}};
  if (key == "epsilon") {
    const double e = value.get<double>();
    return {{"attacks",
             {{"fgsm", {{"epsilon", e}, {"step_size", e}}},
              {"pgd", {{"epsilon", e}, {"step_size", e / 10.0}}},
              {"adaptive", {{"epsilon", e}, {"step_size", e / 10.0}}}}}};
  }
  if (key == "terms") {
    const std::string t = value.get<std::string>();
    if (t == "none") return nlohmann::json::object();
    static const std::vector<std::string> rt = {"inverse_entropy", "log_error"};
    static const std::vector<std::string> lt = {"entropy", "decidedness", "feature_drift"};
    const auto dot = t.find('.');
    const std::string group = t.substr(0, dot);
    const std::string term = dot == std::string::npos ? "" : t.substr(dot + 1);
    const auto& allowed = group == "rt" ? rt : lt;
    if ((group != "rt" && group != "lt") || std::find(allowed.begin(), allowed.end(), term) == allowed.end()) {
      throw ConfigError("unknown term '" + t + "' (expected none, rt.inverse_entropy, rt.log_error, lt.entropy, "
                        "lt.decidedness or lt.feature_drift)");
    }
    return {{"terms", {{group, {{term, false}}}}}};
  }
  throw ConfigError("invalid sweep key '" + key + "'");
}

SweepSpec SweepSpec::from_json(const nlohmann::json& j) {
  SweepSpec s;
  s.key = j.at("key").get<std::string>();
  s.values = j.at("values");
  s.seed = j.value("seed", s.seed);
  if (std::find(sweep_keys().begin(), sweep_keys().end(), s.key) == sweep_keys().end()) {
    throw ConfigError("invalid sweep key '" + s.key + "'");
  }
  if (!s.values.is_array() || s.values.empty()) throw ConfigError("sweep values must be a non-empty array");
  return s;
}

nlohmann::json SweepSpec::to_json() const { return {{"key", key}, {"values", values}, {"seed", seed}}; }

nlohmann::json AblationReport::to_json() const {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["sweep"] = sweep.to_json();
  j["cells"] = nlohmann::json::array();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    j["cells"].push_back({{"value", sweep.values[i]}, {"overrides", overrides[i]}, {"report", cells[i].to_json()}});
  }
  return j;
}

AblationReport run_ablation(const SweepSpec& sweep, const CellRunner& runner) {
  if (std::find(sweep_keys().begin(), sweep_keys().end(), sweep.key) == sweep_keys().end()) {
    throw ConfigError("invalid sweep key '" + sweep.key + "'");
  }
  AblationReport out;
  out.sweep = sweep;
  for (const auto& v : sweep.values) out.overrides.push_back(sweep_override(sweep.key, v));
  for (const auto& o : out.overrides) out.cells.push_back(runner(o, sweep.seed));
  return out;
}

}  // namespace lwd
