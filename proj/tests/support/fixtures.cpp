#include "fixtures.hpp"

#include <random>

#include "lwd/math.hpp"
#include "oracles.hpp"

namespace lwd::fixture {

namespace fs = std::filesystem;

Tensor random_images(int n, const Shape& chw, std::uint64_t seed) {
  Shape s = {n};
  s.insert(s.end(), chw.begin(), chw.end());
  Tensor t(s);
  Rng rng(seed);
  for (double& v : t.span()) v = uniform01(rng);
  return t;
}

ToyDetector toy_detector(std::uint64_t seed, int G, double init_noise) {
  ToyDetector d{oracle::toy_classifier(seed), {}, {}};
  RecoveryConfig rc;
  rc.depth = 2;
  rc.hidden_dim = 7;
  rc.seed = derive_seed(seed, 2);
  d.recovery = RecoveryBank::create(d.model.layer_dims(), rc);
  ProbeConfig pc;
  pc.G = G;
  pc.init_noise = init_noise;
  pc.seed = derive_seed(seed, 3);
  d.augment = AugmentationBank::init(d.model.input_dim(), pc);
  return d;
}

DatasetSplit toy_split(int n, int classes, std::uint64_t seed, double difficulty) {
  SyntheticSpec spec;
  spec.n = n;
  spec.classes = classes;
  spec.channels = 3;
  spec.height = 8;
  spec.width = 8;
  spec.seed = seed;
  spec.difficulty = difficulty;
  return generate_synthetic(spec);
}

TempDir::TempDir(const std::string& tag) {
  std::random_device rd;
  path_ = fs::temp_directory_path() / ("lwd-test-" + tag + "-" + std::to_string(rd()));
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

}  // namespace lwd::fixture
