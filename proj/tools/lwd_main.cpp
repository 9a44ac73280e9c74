#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <iostream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "app/pipeline.hpp"
#include "app/run_config.hpp"
#include "lwd/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace lwd;
using namespace lwd::app;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUser = 2;

struct CommonOptions {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> attacks;
  std::vector<std::string> measures;
  std::vector<double> fpr;
  std::vector<std::string> adv;
  bool force = false;
};

RunConfig build_config(const CommonOptions& o) {
  json file = json::object();
  fs::path base;
  if (!o.config.empty()) {
    file = read_config_file(o.config);
    base = fs::path(o.config).parent_path();
  }
  json overrides = json::object();
  if (o.seed) overrides["seed"] = *o.seed;
  if (!o.fpr.empty()) overrides["calibration"]["fpr_levels"] = o.fpr;
  if (!o.attacks.empty()) overrides["attacks"]["kinds"] = o.attacks;
  return RunConfig::resolve(o.profile, file, overrides, base);
}

std::vector<Measure> selected_measures(const CommonOptions& o) {
  if (o.measures.empty()) return all_measures();
  std::vector<Measure> out;
  for (const auto& m : o.measures) out.push_back(measure_from_string(m));
  return out;
}

void print_report(const EvalReport& r, const std::vector<Measure>& measures, const std::vector<double>& fpr) {
  std::printf("benign inputs %d, clean accuracy %.4f\n", r.benign_evaluated, r.clean_accuracy);
  std::printf("%-16s %8s %8s %6s", "attack", "success", "n_eval", "meas");
  std::printf(" %8s", "AUC");
  for (double a : fpr) std::printf("  RA@%-6s", fpr_key(a).c_str());
  std::printf("\n");
  for (const auto& a : r.attacks) {
    for (Measure m : measures) {
      std::printf("%-16s %8.4f %8d %6s %8.4f", a.name.c_str(), a.success_rate, a.evaluated, to_string(m).c_str(),
                  a.auc.at(m));
      for (double f : fpr) std::printf("  %9.4f", a.ra.at(m).at(f).ra);
      std::printf("\n");
    }
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Layer-wise adversarial example detection: calibrate, attack, evaluate, ablate"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lwd 0.1.0");
  CommonOptions o;
  SweepSpec sweep;
  std::string sweep_arg;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run config");
    sub->add_option("--profile", o.profile, "Run profile")->check(CLI::IsMember(profile_names()));
    sub->add_option("--seed", o.seed, "Run seed");
    sub->add_option("--out", o.out, std::string("Artifact root (default: $") + kArtifactRootEnv + " or ./artifacts)");
    sub->add_option("--fpr", o.fpr, "Benign false-positive levels")->delimiter(',');
    sub->add_option("--attack", o.attacks, "Attack names from the config")->delimiter(',');
    sub->add_option("--measure", o.measures, "RT, LT or RLT")->delimiter(',');
    sub->add_flag("--force", o.force, "Recompute even when artifacts exist");
  };

  auto* calibrate = app.add_subcommand("calibrate", "Train the classifier (if needed) and the detector, fit calibration");
  auto* attack = app.add_subcommand("attack", "Generate adversarial batches");
  auto* evaluate = app.add_subcommand("evaluate", "Score benign and adversarial inputs, write the report and figures");
  auto* validate = app.add_subcommand("validate-assumption", "Per-layer error profiles and flatness table");
  auto* ablate = app.add_subcommand("ablate", "Sweep one setting and evaluate every cell");
  for (auto* sub : {calibrate, attack, evaluate, validate, ablate}) add_common(sub);
  for (auto* sub : {evaluate, validate}) sub->add_option("--adv", o.adv, "AdvBatch archives (default: configured attacks)");
  ablate->add_option("--sweep", sweep_arg, "key=v1,v2,... over depth, hidden_dim, G, k, epsilon, terms");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUser;
  }

  const RunConfig cfg = build_config(o);
  const ArtifactStore store(ArtifactStore::default_root(o.out));
  const auto measures = selected_measures(o);
  std::vector<fs::path> adv(o.adv.begin(), o.adv.end());

  if (calibrate->parsed()) {
    const auto r = cmd_calibrate(cfg, store, !o.force);
    const auto& h = r.summary.at("heldout_benign");
    std::printf("run %s (%s profile)\n", r.summary.at("run_id").get<std::string>().c_str(), cfg.profile.c_str());
    std::printf("classifier clean accuracy %.4f\n", r.summary.at("classifier").at("clean_accuracy").get<double>());
    std::printf("recovery final loss %.6g, augmentation held-out LT %.6g\n",
                r.summary.at("recovery").value("final_loss", 0.0),
                r.summary.at("augmentation").value("holdout_lt_final", 0.0));
    std::printf("held-out benign: E[RLT] %.4f, RT_norm mean %.4f var %.4f, LT_norm mean %.4f var %.4f (n=%d)\n",
                h.at("rlt").at("mean").get<double>(), h.at("rt_norm").at("mean").get<double>(),
                h.at("rt_norm").at("variance").get<double>(), h.at("lt_norm").at("mean").get<double>(),
                h.at("lt_norm").at("variance").get<double>(), h.at("n").get<int>());
    std::printf("artifacts %s\n", r.run_dir.string().c_str());
  } else if (attack->parsed()) {
    for (const auto& a : cmd_attack(cfg, store, cfg.attack_kinds, !o.force)) {
      std::printf("%-16s success %.4f  mean Linf %.4f  %s\n", a.name.c_str(), a.stats.at("success_rate").get<double>(),
                  a.stats.at("mean_linf").get<double>(), a.path.string().c_str());
    }
  } else if (evaluate->parsed()) {
    const auto r = cmd_evaluate(cfg, store, adv);
    print_report(r.report, measures, cfg.eval.fpr_levels);
    std::printf("report %s\n", (r.dir / "report.json").string().c_str());
  } else if (validate->parsed()) {
    const json r = cmd_validate_assumption(cfg, store, adv);
    std::printf("%-16s %8s %10s %8s  %s\n", "population", "count", "flatness", "ratio", "peak layers");
    for (const auto& row : r.at("profiles")) {
      std::printf("%-16s %8d %10.4f %8.3f  %s\n", row.at("population").get<std::string>().c_str(),
                  row.at("count").get<int>(), row.at("flatness").get<double>(),
                  row.at("flatness_ratio_to_benign").get<double>(), row.at("peak_layers").dump().c_str());
    }
  } else if (ablate->parsed()) {
    if (!sweep_arg.empty()) {
      const auto eq = sweep_arg.find('=');
      if (eq == std::string::npos) throw ConfigError("--sweep expects key=v1,v2,...");
      sweep.key = sweep_arg.substr(0, eq);
      sweep.values = json::array();
      std::stringstream ss(sweep_arg.substr(eq + 1));
      for (std::string v; std::getline(ss, v, ',');) {
        json parsed = json::parse(v, nullptr, false);
        sweep.values.push_back(parsed.is_discarded() ? json(v) : parsed);
      }
      sweep.seed = cfg.seed;
      sweep = SweepSpec::from_json(sweep.to_json());
    } else if (cfg.sweep) {
      sweep = *cfg.sweep;
    } else {
      throw ConfigError("ablate needs --sweep or eval.sweep in the config");
    }
    const auto r = cmd_ablate(cfg, store, sweep);
    for (std::size_t i = 0; i < r.report.cells.size(); ++i) {
      std::printf("== %s = %s\n", sweep.key.c_str(), sweep.values[i].dump().c_str());
      print_report(r.report.cells[i], measures, cfg.eval.fpr_levels);
    }
    std::printf("ablation %s\n", (r.dir / "ablation.json").string().c_str());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const lwd::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return e.is_user_error() ? kExitUser : kExitInternal;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return kExitInternal;
  }
}
