#include "run_config.hpp"

#include <algorithm>

#include "lwd/archive.hpp"
#include "lwd/errors.hpp"
#include "lwd/math.hpp"

namespace lwd::app {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json common_defaults() {
  return {
      {"seed", 0},
      {"data", {{"train_fraction", 0.6}, {"calibration_fraction", 0.5}, {"split_seed", 0}}},
      {"terms", {{"rt", RtTerms{}.to_json()}, {"lt", LtTerms{}.to_json()}}},
      {"calibration", {{"cdf_fraction", 0.7}, {"fpr_levels", {0.05, 0.5}}}},
      {"attacks",
       {{"kinds", {"fgsm", "pgd", "cw"}},
        {"fgsm", AttackConfig::defaults(AttackKind::fgsm).to_json()},
        {"pgd", AttackConfig::defaults(AttackKind::pgd).to_json()},
        {"cw", AttackConfig::defaults(AttackKind::cw).to_json()},
        {"adaptive", AttackConfig::defaults(AttackKind::adaptive).to_json()}}},
      {"eval", {{"peak_factor", 2.0}}},
  };
}

json ci_defaults() {
  return {
      {"profile", "ci"},
      {"data",
       {{"synthetic", {{"n", 6000}, {"classes", 10}, {"c", 3}, {"h", 16}, {"w", 16}, {"seed", 7}, {"difficulty", 0.5}}},
        {"limit_test", 600}}},
      {"model",
       {{"architecture", {{"id", "plain_cnn"}, {"widths", {8, 8, 16, 16, 32, 32, 32, 32}}, {"pool_after", {1, 3, 5}}}},
        {"train", {{"epochs", 6}, {"batch_size", 32}, {"lr", 2e-3}, {"weight_decay", 1e-4}, {"augment", true}}}}},
      {"recovery", {{"k_rt", 1}, {"depth", 2}, {"hidden_dim", 128}, {"epochs", 15}, {"batch_size", 32}, {"lr", 1e-3}, {"weight_decay", 0.01}}},
      {"probe", {{"G", 4}, {"k_lt", 1}, {"lambda", 0.1}, {"init_noise", 0.01}, {"epochs", 2}, {"batch_size", 32}, {"lr", 1e-4}, {"limit", 600}}},
      {"attacks", {{"limit", 200}, {"pgd", {{"steps", 20}}}, {"cw", {{"steps", 50}}}, {"adaptive", {{"steps", 20}}}}},
  };
}

json desk_defaults() {
  return {
      {"profile", "desk"},
      {"data",
       {{"synthetic", {{"n", 20000}, {"classes", 10}, {"c", 3}, {"h", 32}, {"w", 32}, {"seed", 7}, {"difficulty", 0.5}}},
        {"limit_test", 1500}}},
      {"model",
       {{"architecture", {{"id", "plain_cnn"}, {"widths", {16, 16, 32, 32, 64, 64, 64, 64}}, {"pool_after", {1, 3, 5}}}},
        {"train", {{"epochs", 10}, {"batch_size", 32}, {"lr", 1e-3}, {"weight_decay", 1e-4}, {"augment", true}}}}},
      {"recovery", {{"k_rt", 1}, {"depth", 3}, {"hidden_dim", 512}, {"epochs", 30}, {"batch_size", 32}, {"lr", 1e-4}, {"weight_decay", 0.01}}},
      {"probe", {{"G", 4}, {"k_lt", 1}, {"lambda", 0.1}, {"init_noise", 0.01}, {"epochs", 3}, {"batch_size", 32}, {"lr", 1e-4}, {"limit", 2000}}},
      {"attacks", {{"limit", 500}}},
  };
}

}  // namespace

std::vector<std::string> profile_names() { return {"ci", "desk"}; }

json profile_defaults(const std::string& name) {
  json j = common_defaults();
  if (name == "ci") {
    j.merge_patch(ci_defaults());
  } else if (name == "desk") {
    j.merge_patch(desk_defaults());
  } else {
    throw ConfigError("unknown profile '" + name + "' (expected ci or desk)");
  }
  return j;
}

json read_config_file(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("config file not found: " + path.string());
  try {
    return json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    throw LoadError("cannot parse config " + path.string() + ": " + e.what());
  }
}

RunConfig RunConfig::resolve(const std::string& profile, const json& file, const json& overrides, const fs::path& base_dir) {
  std::string name = profile;
  if (name.empty()) name = overrides.value("profile", file.value("profile", std::string("ci")));
  json merged = profile_defaults(name);
  json patch = file;
  patch.erase("profile");
  merged.merge_patch(patch);
  merged.merge_patch(overrides);
  merged["profile"] = name;
  auto& data = merged["data"];
  if (data.contains("source") && data["source"].is_string()) {
    const fs::path src = data["source"].get<std::string>();
    if (!src.empty() && src.is_relative() && !base_dir.empty()) data["source"] = (base_dir / src).lexically_normal().string();
  }
  if (merged.contains("model") && merged["model"].contains("checkpoint")) {
    const fs::path ck = merged["model"]["checkpoint"].get<std::string>();
    if (!ck.empty() && ck.is_relative() && !base_dir.empty()) merged["model"]["checkpoint"] = (base_dir / ck).lexically_normal().string();
  }
  return from_json(merged);
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  try {
    c.profile = j.value("profile", c.profile);
    if (!j.contains("seed")) throw ConfigError("config needs a seed");
    c.seed = j.at("seed").get<std::uint64_t>();

    const json d = j.value("data", json::object());
    c.data.source = d.value("source", std::string());
    if (d.contains("synthetic") && !d["synthetic"].is_null()) c.data.synthetic = SyntheticSpec::from_json(d["synthetic"]);
    c.data.train_fraction = d.value("train_fraction", c.data.train_fraction);
    c.data.calibration_fraction = d.value("calibration_fraction", c.data.calibration_fraction);
    c.data.limit_train = d.value("limit_train", 0);
    c.data.limit_calibration = d.value("limit_calibration", 0);
    c.data.limit_test = d.value("limit_test", 0);
    c.data.split_seed = d.value("split_seed", std::uint64_t{0});

    const json m = j.value("model", json::object());
    c.arch = ArchitectureSpec::from_json(m.value("architecture", json::object()));
    c.train = ClassifierTrainConfig::from_json(m.value("train", json::object()));
    c.checkpoint = m.value("checkpoint", std::string());

    c.recovery = RecoveryConfig::from_json(j.value("recovery", json::object()));
    json probe = j.value("probe", json::object());
    c.probe_limit = probe.value("limit", 0);
    probe.erase("limit");
    c.probe = ProbeConfig::from_json(probe);

    const json t = j.value("terms", json::object());
    c.rt_terms = RtTerms::from_json(t.value("rt", json::object()));
    c.lt_terms = LtTerms::from_json(t.value("lt", json::object()));

    const json cal = j.value("calibration", json::object());
    c.cdf_fraction = cal.value("cdf_fraction", c.cdf_fraction);
    c.fpr_levels = cal.value("fpr_levels", c.fpr_levels);

    const json a = j.value("attacks", json::object());
    c.attack_kinds = a.value("kinds", c.attack_kinds);
    c.attack_limit = a.value("limit", 0);
    for (const auto& [key, val] : a.items()) {
      if (key == "kinds" || key == "limit") continue;
      json cfg = val;
      if (!cfg.contains("kind")) cfg["kind"] = key;
      c.attacks[key] = AttackConfig::from_json(cfg);
    }

    const json e = j.value("eval", json::object());
    c.eval.peak_factor = e.value("peak_factor", c.eval.peak_factor);
    c.eval.fpr_levels = c.fpr_levels;
    c.eval_limit = e.value("limit", 0);
    if (e.contains("sweep") && !e["sweep"].is_null()) c.sweep = SweepSpec::from_json(e["sweep"]);
  } catch (const json::exception& ex) {
    throw ConfigError(std::string("malformed config: ") + ex.what());
  }

  // Every stochastic stage draws from its own stream of the run seed.
  c.train.seed = derive_seed(c.seed, 1);
  c.recovery.seed = derive_seed(c.seed, 2);
  c.probe.seed = derive_seed(c.seed, 3);
  std::uint64_t stream = 10;
  for (auto& [name, cfg] : c.attacks) cfg.seed = derive_seed(c.seed, stream++);

  c.resolved = j;
  c.validate();
  return c;
}

void RunConfig::validate() const {
  if (data.source.empty() && !data.synthetic) throw ConfigError("data needs a source path or a synthetic spec");
  if (!(cdf_fraction > 0.0 && cdf_fraction < 1.0)) throw ConfigError("calibration.cdf_fraction must lie in (0, 1)");
  if (fpr_levels.empty()) throw ConfigError("calibration.fpr_levels is empty");
  for (double a : fpr_levels) {
    if (!(a > 0.0 && a < 1.0)) throw ConfigError("FPR level " + fpr_key(a) + " not in (0, 1)");
  }
  for (const auto& k : attack_kinds) (void)attack(k);
  for (const auto& [name, cfg] : attacks) cfg.validate();
  if (arch.widths.size() < 3) throw ConfigError("model.architecture needs at least 3 blocks (L >= 3)");
  if (probe.G < 1 || probe.G > 6) throw ConfigError("probe.G=" + std::to_string(probe.G) + " out of range [1, 6]");
  if (recovery.k_rt < 1 || recovery.k_rt >= static_cast<int>(arch.widths.size())) {
    throw ConfigError("recovery.k_rt must lie in [1, L-1] with L = " + std::to_string(arch.widths.size()));
  }
  if (probe.k_lt < 1 || probe.k_lt > static_cast<int>(arch.widths.size())) {
    throw ConfigError("probe.k_lt must lie in [1, L] with L = " + std::to_string(arch.widths.size()));
  }
}

const AttackConfig& RunConfig::attack(const std::string& name) const {
  const auto it = attacks.find(name);
  if (it == attacks.end()) throw ConfigError("no attack configured under '" + name + "'");
  return it->second;
}

json RunConfig::classifier_key() const {
  json d = resolved.value("data", json::object());
  d.erase("limit_test");
  d.erase("limit_calibration");
  return {{"seed", seed}, {"data", d}, {"model", resolved.value("model", json::object())}};
}

json RunConfig::detector_key() const {
  json k = classifier_key();
  k["data"] = resolved.value("data", json::object());
  k["data"].erase("limit_test");
  k["recovery"] = recovery.to_json();
  k["probe"] = probe.to_json();
  k["probe_limit"] = probe_limit;
  k["terms"] = {{"rt", rt_terms.to_json()}, {"lt", lt_terms.to_json()}};
  k["calibration"] = {{"cdf_fraction", cdf_fraction}, {"fpr_levels", fpr_levels}};
  return k;
}

}  // namespace lwd::app
