#include <benchmark/benchmark.h>

#include "lwd/attacks.hpp"
#include "lwd/eval.hpp"
#include "lwd/fusion.hpp"
#include "lwd/math.hpp"

using namespace lwd;

namespace {

// Untrained components at ci-profile shape; timing does not depend on the weights.
struct Setup {
  Classifier model;
  RecoveryBank recovery;
  AugmentationBank augment;

  Setup()
      : model(Classifier::create(ArchitectureSpec{"plain_cnn", {16, 16, 32, 32, 64, 64, 64, 64}, {}}, {3, 16, 16}, 10, 1)) {
    RecoveryConfig rc;
    rc.seed = 2;
    recovery = RecoveryBank::create(model.layer_dims(), rc);
    ProbeConfig pc;
    pc.seed = 3;
    augment = AugmentationBank::init(model.input_dim(), pc);
  }

  DetectorParts parts() const { return {&model, &recovery, &augment, {}, {}}; }
};

const Setup& setup() {
  static const Setup s;
  return s;
}

Tensor images(int n, std::uint64_t seed) {
  Tensor t({n, 3, 16, 16});
  Rng rng(seed);
  for (double& v : t.span()) v = uniform01(rng);
  return t;
}

std::vector<double> draws(int n, std::uint64_t seed) {
  std::vector<double> v(static_cast<std::size_t>(n));
  Rng rng(seed);
  for (double& x : v) x = uniform01(rng);
  return v;
}

void BM_ScoreBatch(benchmark::State& state) {
  const auto parts = setup().parts();
  const Tensor x = images(static_cast<int>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(score_batch(x, parts));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ScoreBatch)->Arg(1)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_RtScore(benchmark::State& state) {
  const auto e = draws(static_cast<int>(state.range(0)), 5);
  for (auto _ : state) benchmark::DoNotOptimize(rt_score(e));
}
BENCHMARK(BM_RtScore)->Arg(8)->Arg(64);

void BM_QuantileNormalize(benchmark::State& state) {
  const auto cdf = EmpiricalCDF::fit(draws(static_cast<int>(state.range(0)), 6));
  const auto q = draws(1024, 7);
  for (auto _ : state) {
    for (double v : q) benchmark::DoNotOptimize(quantile_normalize(v, cdf));
  }
  state.SetItemsProcessed(state.iterations() * 1024);
}
BENCHMARK(BM_QuantileNormalize)->Arg(1000)->Arg(10000);

void BM_RocAuc(benchmark::State& state) {
  const auto b = draws(static_cast<int>(state.range(0)), 8);
  const auto a = draws(static_cast<int>(state.range(0)), 9);
  for (auto _ : state) benchmark::DoNotOptimize(roc_auc(b, a));
}
BENCHMARK(BM_RocAuc)->Arg(1000)->Arg(10000);

void BM_Fgsm(benchmark::State& state) {
  const auto& s = setup();
  const Tensor x = images(32, 10);
  const auto y = s.model.predict(x);
  for (auto _ : state) benchmark::DoNotOptimize(fgsm(s.model, x, y, 0.03));
}
BENCHMARK(BM_Fgsm)->Unit(benchmark::kMillisecond);

void BM_PgdStep(benchmark::State& state) {
  const auto& s = setup();
  const Tensor x = images(32, 11);
  const auto y = s.model.predict(x);
  auto cfg = AttackConfig::defaults(AttackKind::pgd);
  cfg.steps = 1;
  for (auto _ : state) benchmark::DoNotOptimize(pgd(s.model, x, y, cfg));
}
BENCHMARK(BM_PgdStep)->Unit(benchmark::kMillisecond);

void BM_OrthogonalPgdStep(benchmark::State& state) {
  const auto& s = setup();
  const Tensor x = images(32, 12);
  const auto y = s.model.predict(x);
  auto cfg = AttackConfig::defaults(AttackKind::adaptive);
  cfg.steps = 1;
  for (auto _ : state) benchmark::DoNotOptimize(orthogonal_pgd(s.model, x, y, s.parts(), nullptr, cfg));
}
BENCHMARK(BM_OrthogonalPgdStep)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
