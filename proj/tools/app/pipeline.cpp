#include "pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include "lwd/archive.hpp"
#include "lwd/errors.hpp"
#include "lwd/math.hpp"

namespace lwd::app {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

const Clock::time_point kStart = Clock::now();

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw LoadError("cannot parse " + path.string() + ": " + e.what());
  }
}

json file_entry(const ArtifactStore& store, const fs::path& path) {
  return {{"path", fs::relative(path, store.root()).generic_string()}, {"sha256", file_sha256(path)}};
}

json mean_var(const std::vector<double>& v) { return {{"mean", mean_of(v)}, {"variance", variance_of(v)}, {"n", v.size()}}; }

void check_model_matches(const Classifier& model, const Datasets& data) {
  if (model.input_shape() != data.train.image_shape() || model.num_classes() != data.train.num_classes) {
    throw ConfigError("classifier input shape or class count does not match the dataset");
  }
}

Classifier obtain_classifier(const RunConfig& cfg, const ArtifactStore& store, const Datasets& data, bool reuse) {
  if (!cfg.checkpoint.empty()) {
    progress("loading classifier checkpoint " + cfg.checkpoint);
    Classifier model = Classifier::load(cfg.checkpoint);
    check_model_matches(model, data);
    return model;
  }
  const fs::path dir = store.classifier_dir(cfg);
  const fs::path path = dir / "classifier.lwd";
  if (reuse && fs::exists(path)) {
    progress("reusing classifier " + path.string());
    Classifier model = Classifier::load(path);
    check_model_matches(model, data);
    return model;
  }
  progress("training classifier on " + std::to_string(data.train.size()) + " images");
  const auto t = Clock::now();
  Classifier model = train_classifier(data.train, cfg.arch, cfg.train, &data.test);
  record_timing(dir, "train_classifier", seconds_since(t));
  model.save(path);
  write_json(dir / "classifier.json", {{"key", cfg.classifier_key()}, {"metadata", model.metadata()},
                                       {"fingerprint", model.fingerprint()}});
  progress("classifier clean accuracy " + std::to_string(model.metadata().value("clean_accuracy", 0.0)));
  return model;
}

std::vector<ScoreRecord> normalize_all(const ScoreBatch& sb, const DetectorCalibration& calib) {
  std::vector<ScoreRecord> out;
  for (int i = 0; i < sb.size(); ++i) out.push_back(calib.normalize(sb.rt[static_cast<std::size_t>(i)], sb.lt[static_cast<std::size_t>(i)]));
  return out;
}

json heldout_summary(const std::vector<ScoreRecord>& recs) {
  std::vector<double> rt, lt, rn, ln, rlt;
  for (const auto& r : recs) {
    rt.push_back(r.rt);
    lt.push_back(r.lt);
    rn.push_back(r.rt_norm);
    ln.push_back(r.lt_norm);
    rlt.push_back(r.rlt);
  }
  return {{"n", recs.size()},          {"rt", mean_var(rt)},     {"lt", mean_var(lt)},
          {"rt_norm", mean_var(rn)},   {"lt_norm", mean_var(ln)}, {"rlt", mean_var(rlt)}};
}

json records_to_json(const std::vector<ScoreRecord>& recs) {
  json a = json::array();
  for (const auto& r : recs) a.push_back(r.to_json());
  return a;
}

std::vector<ScoreRecord> records_from_json(const json& a) {
  std::vector<ScoreRecord> out;
  for (const auto& r : a) {
    out.push_back({r.at("rt").get<double>(), r.at("lt").get<double>(), r.at("rt_norm").get<double>(),
                   r.at("lt_norm").get<double>(), r.at("rlt").get<double>()});
  }
  return out;
}

bool manifest_intact(const ArtifactStore& store, const fs::path& manifest_path) {
  if (!fs::exists(manifest_path)) return false;
  const json m = read_json(manifest_path);
  for (const auto& [name, entry] : m.at("files").items()) {
    const fs::path p = store.root() / entry.at("path").get<std::string>();
    if (!fs::exists(p) || file_sha256(p) != entry.at("sha256").get<std::string>()) return false;
  }
  return true;
}

std::string run_id(const RunConfig& cfg) { return key_hash(cfg.detector_key()); }

}  // namespace

// ------------------------------------------------------------------ store

fs::path ArtifactStore::default_root(const std::string& out) {
  if (!out.empty()) return out;
  if (const char* env = std::getenv(kArtifactRootEnv); env != nullptr && *env != '\0') return env;
  return "artifacts";
}

fs::path ArtifactStore::classifier_dir(const RunConfig& cfg) const {
  if (!cfg.checkpoint.empty()) return root_ / "classifiers" / ("ckpt-" + file_sha256(cfg.checkpoint).substr(0, 16));
  return root_ / "classifiers" / key_hash(cfg.classifier_key());
}

fs::path ArtifactStore::run_dir(const RunConfig& cfg) const { return root_ / "runs" / run_id(cfg); }

fs::path ArtifactStore::ablation_dir(const json& key) const { return root_ / "ablations" / key_hash(key); }

std::string key_hash(const json& key) { return sha256_hex(key.dump()).substr(0, 16); }

void record_timing(const fs::path& dir, const std::string& stage, double seconds) {
  fs::create_directories(dir);
  const fs::path path = dir / "timing.json";
  json t = fs::exists(path) ? read_json(path) : json::object();
  t[stage] = seconds;
  write_json(path, t);
}

void progress(const std::string& message) {
  std::fprintf(stderr, "[%8.1fs] %s\n", seconds_since(kStart), message.c_str());
}

// ------------------------------------------------------------------- data

Datasets load_data(const RunConfig& cfg) {
  auto spec = [&](SplitName s, int limit) {
    SplitSpec sp;
    sp.split = s;
    sp.limit = limit;
    sp.train_fraction = cfg.data.train_fraction;
    sp.calibration_fraction = cfg.data.calibration_fraction;
    sp.seed = cfg.data.split_seed;
    return sp;
  };
  Datasets d;
  if (!cfg.data.source.empty()) {
    const fs::path src = cfg.data.source;
    d.train = load_dataset(src, spec(SplitName::train, cfg.data.limit_train));
    d.calibration = load_dataset(src, spec(SplitName::calibration, cfg.data.limit_calibration));
    d.test = load_dataset(src, spec(SplitName::test, cfg.data.limit_test));
  } else {
    const DatasetSplit pool = generate_synthetic(*cfg.data.synthetic);
    d.train = partition_pool(pool, spec(SplitName::train, cfg.data.limit_train));
    d.calibration = partition_pool(pool, spec(SplitName::calibration, cfg.data.limit_calibration));
    d.test = partition_pool(pool, spec(SplitName::test, cfg.data.limit_test));
  }
  return d;
}

// -------------------------------------------------------------- calibrate

CalibrateResult cmd_calibrate(const RunConfig& cfg, const ArtifactStore& store, bool reuse) {
  const fs::path dir = store.run_dir(cfg);
  const fs::path manifest_path = dir / "manifest.json";
  if (reuse && manifest_intact(store, manifest_path)) {
    progress("reusing detector artifacts in " + dir.string());
    CalibrateResult r{load_detector(cfg, store), dir, read_json(dir / "summary.json"), {}};
    r.heldout = records_from_json(read_json(dir / "heldout_scores.json"));
    return r;
  }

  const auto t_all = Clock::now();
  const Datasets data = load_data(cfg);
  progress("data: train " + std::to_string(data.train.size()) + ", calibration " +
           std::to_string(data.calibration.size()) + ", test " + std::to_string(data.test.size()));
  Classifier model = obtain_classifier(cfg, store, data, reuse);

  auto t = Clock::now();
  progress("tracing " + std::to_string(data.train.size()) + " benign training images");
  const auto traces = model.forward_trace(data.train.images);
  progress("training recovery heads");
  RecoveryBank recovery = [&] {
    try {
      return train_recovery_bank(traces, cfg.recovery);
    } catch (const Error& e) {
      throw TrainingError(std::string("recovery stage: ") + e.what());
    }
  }();
  record_timing(dir, "train_recovery", seconds_since(t));

  t = Clock::now();
  const DatasetSplit probe_data = cfg.probe_limit > 0 ? data.train.head(cfg.probe_limit) : data.train;
  progress("training " + std::to_string(cfg.probe.G) + " augmentation operators on " + std::to_string(probe_data.size()) +
           " images");
  AugmentationBank augment = train_augmentations(probe_data, model, AugmentationBank::init(model.input_dim(), cfg.probe),
                                                 cfg.probe, cfg.lt_terms);
  record_timing(dir, "train_augmentations", seconds_since(t));

  t = Clock::now();
  DetectorParts parts{&model, &recovery, &augment, cfg.rt_terms, cfg.lt_terms};
  const int n_cal = data.calibration.size();
  const int n_cdf = static_cast<int>(std::lround(cfg.cdf_fraction * n_cal));
  progress("calibrating on " + std::to_string(n_cdf) + " + " + std::to_string(n_cal - n_cdf) + " benign images");
  DetectorCalibration calib = [&] {
    try {
      const ScoreBatch cdf_slice = score_batch(data.calibration.images.slice_rows(0, n_cdf), parts);
      const ScoreBatch thr_slice = score_batch(data.calibration.images.slice_rows(n_cdf, n_cal), parts);
      return fit_calibration(cdf_slice, thr_slice, cfg.fpr_levels);
    } catch (const CalibrationError& e) {
      throw CalibrationError(std::string("calibration stage: ") + e.what());
    }
  }();
  calib.model_fingerprint = model.fingerprint();
  calib.recovery_fingerprint = recovery.fingerprint();
  calib.augmentation_fingerprint = augment.fingerprint();
  calib.rt_terms = cfg.rt_terms;
  calib.lt_terms = cfg.lt_terms;
  calib.provenance = {{"run_id", run_id(cfg)}, {"profile", cfg.profile}, {"seed", cfg.seed},
                      {"cdf_size", n_cdf},     {"threshold_size", n_cal - n_cdf}};
  record_timing(dir, "calibrate", seconds_since(t));

  t = Clock::now();
  progress("scoring " + std::to_string(data.test.size()) + " held-out benign images");
  const std::vector<ScoreRecord> heldout = normalize_all(score_batch(data.test.images, parts), calib);
  record_timing(dir, "score_heldout", seconds_since(t));

  json summary = {
      {"run_id", run_id(cfg)},
      {"profile", cfg.profile},
      {"seed", cfg.seed},
      {"classifier",
       {{"fingerprint", model.fingerprint()},
        {"clean_accuracy", accuracy(model, data.test)},
        {"train_accuracy", model.metadata().value("train_accuracy", json(nullptr))},
        {"parameters", model.parameter_count()}}},
      {"recovery", recovery.metadata()},
      {"augmentation", augment.metadata()},
      {"parameters", parameter_count(model, &recovery, &augment).to_json()},
      {"heldout_benign", heldout_summary(heldout)},
  };

  fs::create_directories(dir);
  recovery.save(dir / "recovery.lwd");
  augment.save(dir / "augment.lwd");
  calib.save(dir / "calibration.json");
  write_json(dir / "heldout_scores.json", records_to_json(heldout));
  write_json(dir / "summary.json", summary);
  write_json(dir / "config.json", cfg.resolved);

  fs::path classifier_path = cfg.checkpoint.empty() ? store.classifier_dir(cfg) / "classifier.lwd" : fs::path(cfg.checkpoint);
  json files = {{"recovery", file_entry(store, dir / "recovery.lwd")},
                {"augmentation", file_entry(store, dir / "augment.lwd")},
                {"calibration", file_entry(store, dir / "calibration.json")},
                {"heldout_scores", file_entry(store, dir / "heldout_scores.json")},
                {"summary", file_entry(store, dir / "summary.json")},
                {"config", file_entry(store, dir / "config.json")}};
  if (cfg.checkpoint.empty()) {
    files["classifier"] = file_entry(store, classifier_path);
  } else {
    files["classifier"] = {{"path", fs::absolute(classifier_path).string()}, {"sha256", file_sha256(classifier_path)}};
  }
  const json manifest = {{"run_id", run_id(cfg)},
                         {"profile", cfg.profile},
                         {"seed", cfg.seed},
                         {"fingerprints",
                          {{"classifier", calib.model_fingerprint},
                           {"recovery", calib.recovery_fingerprint},
                           {"augmentation", calib.augmentation_fingerprint}}},
                         {"files", files}};
  write_json(manifest_path, manifest);
  record_timing(dir, "calibrate_total", seconds_since(t_all));
  progress("calibration written to " + dir.string());

  Detector det{std::move(model), std::move(recovery), std::move(augment), std::move(calib)};
  return {std::move(det), dir, summary, heldout};
}

Classifier load_classifier(const RunConfig& cfg, const ArtifactStore& store) {
  const fs::path path = cfg.checkpoint.empty() ? store.classifier_dir(cfg) / "classifier.lwd" : fs::path(cfg.checkpoint);
  if (!fs::exists(path)) {
    throw ConfigError("no trained classifier at " + path.string() + "; run `lwd calibrate` with this config first");
  }
  return Classifier::load(path);
}

Detector load_detector(const RunConfig& cfg, const ArtifactStore& store) {
  const fs::path dir = store.run_dir(cfg);
  if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError("no detector artifacts in " + dir.string() + "; run `lwd calibrate` with this config first");
  }
  const json m = read_json(dir / "manifest.json");
  const auto path_of = [&](const char* name) {
    const fs::path p = m.at("files").at(name).at("path").get<std::string>();
    return p.is_absolute() ? p : store.root() / p;
  };
  Detector d{Classifier::load(path_of("classifier")), RecoveryBank::load(path_of("recovery")),
             AugmentationBank::load(path_of("augmentation")), DetectorCalibration::load(path_of("calibration"))};
  check_compatible(d.calib, d.parts());
  return d;
}

// ----------------------------------------------------------------- attack

std::string batch_name(const fs::path& path) {
  const std::string stem = path.stem().string();
  const auto dash = stem.rfind('-');
  if (dash != std::string::npos && stem.size() - dash - 1 == 8) return stem.substr(0, dash);
  return stem;
}

std::vector<AttackOutput> cmd_attack(const RunConfig& cfg, const ArtifactStore& store, const std::vector<std::string>& names,
                                     bool reuse) {
  if (names.empty()) throw ConfigError("no attacks requested");
  for (const auto& n : names) (void)cfg.attack(n);

  std::optional<Datasets> data;
  std::optional<Classifier> model;
  std::optional<Detector> det;
  std::vector<AttackOutput> out;
  for (const auto& name : names) {
    const AttackConfig& acfg = cfg.attack(name);
    const bool adaptive = acfg.kind == AttackKind::adaptive;
    if (adaptive && !det) det = load_detector(cfg, store);
    json key = {{"classifier", cfg.classifier_key()}, {"attack", acfg.to_json()}, {"limit", cfg.attack_limit},
                {"limit_test", cfg.data.limit_test}};
    fs::path dir = store.classifier_dir(cfg) / "attacks";
    if (adaptive) {
      key["detector"] = cfg.detector_key();
      dir = store.run_dir(cfg) / "attacks";
    }
    const fs::path path = dir / (name + "-" + key_hash(key).substr(0, 8) + ".lwd");
    const fs::path sidecar = fs::path(path).replace_extension(".json");
    if (reuse && fs::exists(path) && fs::exists(sidecar)) {
      progress("reusing " + name + " batch " + path.string());
      out.push_back({name, path, read_json(sidecar)});
      continue;
    }
    if (!model) model = det ? det->model : load_classifier(cfg, store);
    if (!data) data = load_data(cfg);
    const DatasetSplit inputs = cfg.attack_limit > 0 ? data->test.head(cfg.attack_limit) : data->test;
    progress("running " + name + " on " + std::to_string(inputs.size()) + " inputs");
    const auto t = Clock::now();
    AdvBatch batch = adaptive ? [&] {
      const DetectorParts parts = det->parts();
      return run_attack(det->model, inputs.images, inputs.labels, acfg, &parts, &det->calib);
    }()
                              : run_attack(*model, inputs.images, inputs.labels, acfg);
    const double secs = seconds_since(t);
    batch.validate();
    fs::create_directories(dir);
    batch.save(path);

    const auto orig = (det ? det->model : *model).predict(batch.originals);
    int ok = 0, fooled = 0;
    for (int i = 0; i < batch.size(); ++i) {
      const auto r = static_cast<std::size_t>(i);
      ok += orig[r] == batch.labels[r];
      fooled += orig[r] == batch.labels[r] && batch.success[r];
    }
    json stats = {{"name", name},
                  {"kind", to_string(acfg.kind)},
                  {"config", acfg.to_json()},
                  {"n", batch.size()},
                  {"originally_correct", ok},
                  {"success_rate", ok ? static_cast<double>(fooled) / ok : 0.0},
                  {"mean_linf", mean_of(batch.linf)},
                  {"mean_l2", mean_of(batch.l2)},
                  {"archive", file_entry(store, path)}};
    write_json(sidecar, stats);
    record_timing(dir, "attack:" + path.stem().string(), secs);
    progress(name + " success rate " + std::to_string(stats["success_rate"].get<double>()));
    out.push_back({name, path, stats});
  }
  return out;
}

// --------------------------------------------------------------- evaluate

EvaluateResult cmd_evaluate(const RunConfig& cfg, const ArtifactStore& store, const std::vector<fs::path>& adv_paths) {
  const Detector det = load_detector(cfg, store);
  std::vector<fs::path> paths = adv_paths;
  if (paths.empty()) {
    for (const auto& o : cmd_attack(cfg, store, cfg.attack_kinds)) paths.push_back(o.path);
  }
  std::vector<std::pair<std::string, AdvBatch>> batches;
  json adv_hashes = json::object();
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw LoadError("adversarial batch not found: " + p.string());
    const std::string name = batch_name(p);
    for (const auto& [n, b] : batches) {
      if (n == name) throw ConfigError("two adversarial batches share the name '" + name + "'");
    }
    batches.emplace_back(name, AdvBatch::load(p));
    adv_hashes[name] = file_sha256(p);
  }
  const Datasets data = load_data(cfg);
  const DatasetSplit benign = cfg.eval_limit > 0 ? data.test.head(cfg.eval_limit) : data.test;

  progress("evaluating " + std::to_string(batches.size()) + " batches against " + std::to_string(benign.size()) +
           " benign inputs");
  const auto t = Clock::now();
  EvalReport report = evaluate_detector(det.parts(), det.calib, benign, batches, cfg.eval);
  report.provenance["run_id"] = run_id(cfg);
  report.provenance["profile"] = cfg.profile;
  report.provenance["seed"] = cfg.seed;
  report.provenance["adversarial_sha256"] = adv_hashes;
  report.provenance["benign_inputs"] = benign.size();

  const json key = {{"run", run_id(cfg)}, {"adv", adv_hashes}, {"eval_limit", cfg.eval_limit},
                    {"fpr", cfg.eval.fpr_levels}, {"peak_factor", cfg.eval.peak_factor}};
  const fs::path dir = store.run_dir(cfg) / "reports" / key_hash(key);
  fs::create_directories(dir);
  const json j = report.to_json();
  write_json(dir / "report.json", j);
  write_report_figures(report, dir / "figures");
  record_timing(dir, "evaluate", seconds_since(t));
  progress("report written to " + (dir / "report.json").string());
  return {std::move(report), dir, j};
}

json cmd_validate_assumption(const RunConfig& cfg, const ArtifactStore& store, const std::vector<fs::path>& adv_paths) {
  const EvaluateResult ev = cmd_evaluate(cfg, store, adv_paths);
  const EvalReport& r = ev.report;
  auto row = [&](const ShiftProfile& p) {
    double sum = 0.0;
    for (double v : p.mean_profile) sum += v;
    return json{{"population", p.population},
                {"count", p.count},
                {"flatness", p.flatness},
                {"flatness_ratio_to_benign", r.benign_profile.flatness > 0 ? p.flatness / r.benign_profile.flatness : 0.0},
                {"peak_layers", p.peak_layers},
                {"profile_sum", sum},
                {"mean_profile", p.mean_profile}};
  };
  json table = json::array({row(r.benign_profile)});
  json checks = json::object();
  for (const auto& a : r.attacks) {
    if (a.profile.count == 0) continue;
    table.push_back(row(a.profile));
    checks[a.name] = {{"flatness_above_benign", a.profile.flatness > r.benign_profile.flatness},
                      {"flatness_within_2x_benign", a.profile.flatness <= 2.0 * r.benign_profile.flatness},
                      {"lt_auc_above_rt_auc", a.auc.at(Measure::lt) > a.auc.at(Measure::rt)}};
  }
  const json out = {{"provenance", ev.json.at("provenance")}, {"profiles", table}, {"checks", checks}};
  write_json(ev.dir / "assumption.json", out);
  std::ostringstream csv;
  csv << "population,count,flatness,flatness_ratio_to_benign,peak_layers\n";
  for (const auto& t : table) {
    std::string peaks;
    for (const auto& k : t["peak_layers"]) peaks += (peaks.empty() ? "" : " ") + std::to_string(k.get<int>());
    csv << t["population"].get<std::string>() << ',' << t["count"] << ',' << t["flatness"].dump() << ','
        << t["flatness_ratio_to_benign"].dump() << ',' << peaks << '\n';
  }
  write_file_atomic(ev.dir / "assumption.csv", csv.str());
  return out;
}

// ----------------------------------------------------------------- ablate

AblationResult cmd_ablate(const RunConfig& cfg, const ArtifactStore& store, const SweepSpec& sweep) {
  const CellRunner runner = [&](const json& overrides, std::uint64_t seed) {
    json j = cfg.resolved;
    j.merge_patch(overrides);
    j["seed"] = seed;
    const RunConfig cell = RunConfig::from_json(j);
    progress("ablation cell " + overrides.dump());
    cmd_calibrate(cell, store);
    return cmd_evaluate(cell, store, {}).report;
  };
  AblationResult res{run_ablation(sweep, runner), {}};
  res.dir = store.ablation_dir({{"base", cfg.resolved}, {"sweep", sweep.to_json()}});
  fs::create_directories(res.dir);
  write_json(res.dir / "ablation.json", res.report.to_json());

  std::ostringstream csv;
  csv << "key,value,attack,measure,auc";
  for (double a : cfg.eval.fpr_levels) csv << ",ra@" << fpr_key(a);
  csv << '\n';
  for (std::size_t i = 0; i < res.report.cells.size(); ++i) {
    for (const auto& a : res.report.cells[i].attacks) {
      for (Measure m : all_measures()) {
        csv << sweep.key << ',' << sweep.values[i].dump() << ',' << a.name << ',' << to_string(m) << ','
            << json(a.auc.at(m)).dump();
        for (double fpr : cfg.eval.fpr_levels) csv << ',' << json(a.ra.at(m).at(fpr).ra).dump();
        csv << '\n';
      }
    }
  }
  write_file_atomic(res.dir / "ablation.csv", csv.str());
  progress("ablation written to " + res.dir.string());
  return res;
}

}  // namespace lwd::app
