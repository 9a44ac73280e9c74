#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "lwd/errors.hpp"
#include "run_config.hpp"

using namespace lwd;
using app::RunConfig;
using json = nlohmann::json;

TEST(RunConfig, BothProfilesResolveAndValidate) {
  for (const auto& name : app::profile_names()) {
    const auto c = RunConfig::resolve(name, json::object(), json::object());
    EXPECT_EQ(c.profile, name);
    EXPECT_TRUE(c.data.synthetic.has_value());
    EXPECT_GE(c.arch.widths.size(), 3u);
    EXPECT_NO_THROW(c.validate());
  }
  EXPECT_THROW(RunConfig::resolve("huge", json::object(), json::object()), ConfigError);
}

TEST(RunConfig, FileThenOverridesWin) {
  const json file = {{"seed", 5}, {"recovery", {{"hidden_dim", 64}}}};
  const json over = {{"recovery", {{"hidden_dim", 32}}}};
  const auto a = RunConfig::resolve("ci", file, json::object());
  EXPECT_EQ(a.seed, 5u);
  EXPECT_EQ(a.recovery.hidden_dim, 64);
  EXPECT_EQ(RunConfig::resolve("ci", file, over).recovery.hidden_dim, 32);
}

TEST(RunConfig, SeedIsRequiredAndFansOutToStages) {
  json j = app::profile_defaults("ci");
  j.erase("seed");
  EXPECT_THROW(RunConfig::from_json(j), ConfigError);
  const auto a = RunConfig::resolve("ci", {{"seed", 1}}, json::object());
  const auto b = RunConfig::resolve("ci", {{"seed", 2}}, json::object());
  EXPECT_NE(a.train.seed, a.recovery.seed);
  EXPECT_NE(a.train.seed, b.train.seed);
  EXPECT_EQ(a.train.seed, RunConfig::resolve("ci", {{"seed", 1}}, json::object()).train.seed);
}

TEST(RunConfig, RelativeSourceResolvesAgainstConfigDirectory) {
  const auto c = RunConfig::resolve("ci", {{"data", {{"source", "data/cifar"}}}}, json::object(), "/etc/lwd");
  EXPECT_EQ(c.data.source, "/etc/lwd/data/cifar");
  const auto abs = RunConfig::resolve("ci", {{"data", {{"source", "/srv/cifar"}}}}, json::object(), "/etc/lwd");
  EXPECT_EQ(abs.data.source, "/srv/cifar");
}

TEST(RunConfig, BadValuesAreConfigErrors) {
  const json bad[] = {
      {{"calibration", {{"fpr_levels", {1.5}}}}},
      {{"calibration", {{"cdf_fraction", 1.0}}}},
      {{"recovery", {{"k_rt", 8}}}},
      {{"probe", {{"G", 9}}}},
      {{"attacks", {{"kinds", {"deepfool"}}}}},
      {{"attacks", {{"cw", {{"targeted", true}}}}}},
      {{"recovery", {{"error_units", "furlongs"}}}},
      {{"model", {{"architecture", {{"widths", {8, 8}}}}}}},
      {{"recovery", {{"hidden_dim", "wide"}}}},
      {{"data", {{"synthetic", nullptr}}}},
  };
  for (const auto& b : bad) EXPECT_THROW(RunConfig::resolve("ci", b, json::object()), ConfigError) << b.dump();
}

TEST(RunConfig, MissingOrBrokenFileIsLoadError) {
  EXPECT_THROW(app::read_config_file("/no/such/config.json"), LoadError);
  fixture::TempDir dir("cfg");
  {
    std::ofstream out(dir.path() / "broken.json");
    out << "{ not json";
  }
  EXPECT_THROW(app::read_config_file(dir.path() / "broken.json"), LoadError);
}

TEST(RunConfig, DetectorKeyIgnoresEvaluationOnlySettings) {
  const auto a = RunConfig::resolve("ci", {{"seed", 1}}, json::object());
  const auto b = RunConfig::resolve("ci", {{"seed", 1}, {"attacks", {{"limit", 10}}}, {"eval", {{"limit", 5}}}}, json::object());
  EXPECT_EQ(a.detector_key(), b.detector_key());
  const auto c = RunConfig::resolve("ci", {{"seed", 1}, {"recovery", {{"hidden_dim", 16}}}}, json::object());
  EXPECT_NE(a.detector_key(), c.detector_key());
}

TEST(RunConfig, ShippedConfigsResolveAndValidate) {
  const std::filesystem::path dir = LWD_CONFIG_DIR;
  int seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    const auto file = app::read_config_file(entry.path());
    EXPECT_NO_THROW(RunConfig::resolve("", file, json::object(), dir).validate()) << entry.path();
    ++seen;
  }
  EXPECT_GE(seen, 3);
}
