#include "lwd/fusion.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>

#include "lwd/archive.hpp"
#include "lwd/errors.hpp"
#include "lwd/math.hpp"

namespace lwd {

EmpiricalCDF EmpiricalCDF::fit(std::span<const double> scores) {
  if (static_cast<int>(scores.size()) < kMinCalibrationScores) {
    throw CalibrationError("need at least " + std::to_string(kMinCalibrationScores) + " benign scores, got " +
                           std::to_string(scores.size()));
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw ValidationError("non-finite benign score in CDF calibration");
  }
  EmpiricalCDF cdf;
  cdf.sorted_.assign(scores.begin(), scores.end());
  std::sort(cdf.sorted_.begin(), cdf.sorted_.end());
  return cdf;
}

double EmpiricalCDF::operator()(double s) const {
  if (sorted_.empty()) throw ContractError("empirical CDF is not fitted");
  const double n = static_cast<double>(sorted_.size());
  const auto lo = std::lower_bound(sorted_.begin(), sorted_.end(), s);
  const auto hi = std::upper_bound(lo, sorted_.end(), s);
  const double below = static_cast<double>(lo - sorted_.begin());
  const double equal = static_cast<double>(hi - lo);
  const double f = (below + 0.5 * equal + 0.5) / (n + 1.0);
  return std::clamp(f, 1.0 / (n + 1.0), n / (n + 1.0));
}

nlohmann::json EmpiricalCDF::to_json() const { return {{"sorted_scores", sorted_}}; }

EmpiricalCDF EmpiricalCDF::from_json(const nlohmann::json& j) {
  const auto v = j.at("sorted_scores").get<std::vector<double>>();
  if (!std::is_sorted(v.begin(), v.end())) throw ValidationError("CDF scores are not sorted");
  return fit(v);
}

double quantile_normalize(double score, const EmpiricalCDF& cdf) { return normal_quantile(cdf(score)); }

double rlt_score(double rt_norm, double lt_norm) { return rt_norm * rt_norm + lt_norm * lt_norm; }

std::string to_string(Measure m) {
  switch (m) {
    case Measure::rt: return "RT";
    case Measure::lt: return "LT";
    case Measure::rlt: return "RLT";
  }
  return "?";
}

Measure measure_from_string(const std::string& s) {
  std::string u;
  for (char c : s) u.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (u == "RT") return Measure::rt;
  if (u == "LT") return Measure::lt;
  if (u == "RLT") return Measure::rlt;
  throw ConfigError("unknown measure '" + s + "' (expected RT, LT or RLT)");
}

double empirical_quantile(std::span<const double> values, double q) {
  if (values.empty()) throw ContractError("quantile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw ContractError("quantile level must be in [0, 1]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::map<double, double> calibrate_thresholds(std::span<const double> benign_scores,
                                              const std::vector<double>& fpr_levels) {
  if (static_cast<int>(benign_scores.size()) < kMinCalibrationScores) {
    throw CalibrationError("need at least " + std::to_string(kMinCalibrationScores) +
                           " benign scores for thresholds, got " + std::to_string(benign_scores.size()));
  }
  for (double s : benign_scores) {
    if (!std::isfinite(s)) throw ValidationError("non-finite benign score in threshold calibration");
  }
  std::map<double, double> out;
  for (double a : fpr_levels) {
    if (!(a > 0.0 && a < 1.0)) throw ConfigError("FPR level " + std::to_string(a) + " not in (0, 1)");
    out[a] = empirical_quantile(benign_scores, 1.0 - a);
  }
  return out;
}

std::string fpr_key(double fpr) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", fpr);
  return buf;
}

double ScoreRecord::get(Measure m) const {
  switch (m) {
    case Measure::rt: return rt;
    case Measure::lt: return lt;
    case Measure::rlt: return rlt;
  }
  return rlt;
}

nlohmann::json ScoreRecord::to_json() const {
  return {{"rt", rt}, {"lt", lt}, {"rt_norm", rt_norm}, {"lt_norm", lt_norm}, {"rlt", rlt}};
}

double DetectorCalibration::threshold(Measure m, double fpr) const {
  const auto it = thresholds.find(m);
  if (it != thresholds.end()) {
    for (const auto& [level, tau] : it->second) {
      if (std::abs(level - fpr) < 1e-12) return tau;
    }
  }
  throw ConfigError("no " + to_string(m) + " threshold calibrated at FPR " + fpr_key(fpr));
}

ScoreRecord DetectorCalibration::normalize(double rt, double lt) const {
  ScoreRecord r;
  r.rt = rt;
  r.lt = lt;
  r.rt_norm = quantile_normalize(rt, cdf_rt);
  r.lt_norm = quantile_normalize(lt, cdf_lt);
  r.rlt = rlt_score(r.rt_norm, r.lt_norm);
  return r;
}

nlohmann::json DetectorCalibration::to_json() const {
  nlohmann::json th = nlohmann::json::object();
  for (const auto& [m, levels] : thresholds) {
    for (const auto& [a, tau] : levels) th[to_string(m)][fpr_key(a)] = tau;
  }
  return {{"schema_version", 1},
          {"cdf_rt", cdf_rt.to_json()},
          {"cdf_lt", cdf_lt.to_json()},
          {"thresholds", th},
          {"model_fingerprint", model_fingerprint},
          {"recovery_fingerprint", recovery_fingerprint},
          {"augmentation_fingerprint", augmentation_fingerprint},
          {"rt_terms", rt_terms.to_json()},
          {"lt_terms", lt_terms.to_json()},
          {"provenance", provenance}};
}

DetectorCalibration DetectorCalibration::from_json(const nlohmann::json& j) {
  DetectorCalibration c;
  c.cdf_rt = EmpiricalCDF::from_json(j.at("cdf_rt"));
  c.cdf_lt = EmpiricalCDF::from_json(j.at("cdf_lt"));
  for (const auto& [name, levels] : j.at("thresholds").items()) {
    const Measure m = measure_from_string(name);
    for (const auto& [key, tau] : levels.items()) c.thresholds[m][std::stod(key)] = tau.get<double>();
  }
  c.model_fingerprint = j.at("model_fingerprint").get<std::string>();
  c.recovery_fingerprint = j.at("recovery_fingerprint").get<std::string>();
  c.augmentation_fingerprint = j.at("augmentation_fingerprint").get<std::string>();
  c.rt_terms = RtTerms::from_json(j.value("rt_terms", nlohmann::json::object()));
  c.lt_terms = LtTerms::from_json(j.value("lt_terms", nlohmann::json::object()));
  c.provenance = j.value("provenance", nlohmann::json::object());
  return c;
}

void DetectorCalibration::save(const std::filesystem::path& path) const {
  write_file_atomic(path, to_json().dump(2) + "\n");
}

DetectorCalibration DetectorCalibration::load(const std::filesystem::path& path) {
  try {
    return from_json(nlohmann::json::parse(read_text_file(path)));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("cannot parse calibration " + path.string() + ": " + e.what());
  }
}

ScoreBatch score_batch(const Tensor& x, const DetectorParts& parts) {
  if (parts.model == nullptr || parts.recovery == nullptr || parts.augment == nullptr) {
    throw ContractError("detector parts are incomplete");
  }
  constexpr int kChunk = 128;
  ScoreBatch out;
  const int n = x.dim(0);
  for (int b = 0; b < n; b += kChunk) {
    const int e = std::min(n, b + kChunk);
    const ad::Var xv = ad::constant(x.slice_rows(b, e));
    const auto clean = parts.model->forward(xv);
    std::vector<int> pred;
    for (int i = 0; i < e - b; ++i) pred.push_back(argmax(clean.logits.value().row(i)));
    const Tensor errs = parts.recovery->error_rows(clean.taps).value();
    const LtGraph g = lt_graph(*parts.model, *parts.augment, xv, clean, pred, parts.lt_terms);
    for (int i = 0; i < e - b; ++i) {
      const auto r = static_cast<std::size_t>(i);
      auto row = errs.row(i);
      ErrorVector ev{std::vector<double>(row.begin(), row.end()), parts.recovery->k_rt()};
      out.rt.push_back(rt_score(ev.e, parts.rt_terms));
      out.errors.push_back(std::move(ev));
      LtBreakdown br;
      br.entropy_weight = g.entropy.value()[r];
      for (std::size_t k = 0; k < g.s.size(); ++k) {
        br.per_aug.push_back({g.delta_z[k].value()[r], g.delta_l[k].value()[r], g.s[k].value()[r]});
      }
      br.lt = g.lt.value()[r];
      out.lt.push_back(br.lt);
      out.lt_parts.push_back(std::move(br));
      out.predicted.push_back(pred[r]);
    }
  }
  for (std::size_t i = 0; i < out.rt.size(); ++i) {
    if (!std::isfinite(out.rt[i]) || !std::isfinite(out.lt[i])) {
      throw ValidationError("non-finite detector score for input " + std::to_string(i));
    }
  }
  return out;
}

DetectorCalibration fit_calibration(const ScoreBatch& cdf_slice, const ScoreBatch& threshold_slice,
                                    const std::vector<double>& fpr_levels) {
  DetectorCalibration c;
  c.cdf_rt = EmpiricalCDF::fit(cdf_slice.rt);
  c.cdf_lt = EmpiricalCDF::fit(cdf_slice.lt);
  std::vector<double> rlt;
  for (int i = 0; i < threshold_slice.size(); ++i) {
    rlt.push_back(c.normalize(threshold_slice.rt[static_cast<std::size_t>(i)], threshold_slice.lt[static_cast<std::size_t>(i)]).rlt);
  }
  c.thresholds[Measure::rt] = calibrate_thresholds(threshold_slice.rt, fpr_levels);
  c.thresholds[Measure::lt] = calibrate_thresholds(threshold_slice.lt, fpr_levels);
  c.thresholds[Measure::rlt] = calibrate_thresholds(rlt, fpr_levels);
  return c;
}

void check_compatible(const DetectorCalibration& calib, const DetectorParts& parts) {
  auto mismatch = [](const char* what, const std::string& want, const std::string& got) {
    if (want != got) {
      throw ConfigError(std::string(what) + " fingerprint mismatch: calibration expects " + want + ", got " + got);
    }
  };
  mismatch("classifier", calib.model_fingerprint, parts.model->fingerprint());
  mismatch("recovery bank", calib.recovery_fingerprint, parts.recovery->fingerprint());
  mismatch("augmentation bank", calib.augmentation_fingerprint, parts.augment->fingerprint());
}

std::vector<Detection> detect(const Tensor& x, const DetectorParts& parts, const DetectorCalibration& calib,
                              Measure measure, double fpr) {
  check_compatible(calib, parts);
  const double tau = calib.threshold(measure, fpr);
  DetectorParts p = parts;
  p.rt_terms = calib.rt_terms;
  p.lt_terms = calib.lt_terms;
  const ScoreBatch sb = score_batch(x, p);
  std::vector<Detection> out;
  for (int i = 0; i < sb.size(); ++i) {
    Detection d;
    d.scores = calib.normalize(sb.rt[static_cast<std::size_t>(i)], sb.lt[static_cast<std::size_t>(i)]);
    d.flag = d.scores.get(measure) > tau;
    out.push_back(d);
  }
  return out;
}

}  // namespace lwd
