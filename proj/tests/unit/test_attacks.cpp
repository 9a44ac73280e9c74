#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "lwd/attacks.hpp"
#include "lwd/errors.hpp"
#include "lwd/math.hpp"
#include "oracles.hpp"

using namespace lwd;

namespace {

std::vector<int> predicted_labels(const Classifier& m, const Tensor& x) { return m.predict(x); }

double cross_entropy_at(const Classifier& m, const std::vector<double>& v, const Shape& s, int label) {
  const Tensor l = m.logits(Tensor(s, v));
  const auto p = softmax(l.row(0));
  return -std::log(p[static_cast<std::size_t>(label)]);
}

}  // namespace

TEST(AttackConfig, DefaultsAndValidation) {
  const auto f = AttackConfig::defaults(AttackKind::fgsm);
  EXPECT_EQ(f.epsilon, 0.05);
  const auto p = AttackConfig::defaults(AttackKind::pgd);
  EXPECT_EQ(p.steps, 40);
  EXPECT_DOUBLE_EQ(p.step_size, p.epsilon / 10.0);
  auto bad = p;
  bad.epsilon = -0.1;
  EXPECT_THROW(bad.validate(), ConfigError);
  auto targeted_cw = AttackConfig::defaults(AttackKind::cw);
  targeted_cw.targeted = true;
  EXPECT_THROW(targeted_cw.validate(), ConfigError);
  EXPECT_THROW(attack_kind_from_string("deepfool"), ConfigError);
  const auto back = AttackConfig::from_json(p.to_json());
  EXPECT_EQ(back.to_json(), p.to_json());
}

TEST(Attacks, EveryAttackRespectsTheBudgetAndPixelRange) {
  const auto det = fixture::toy_detector(31);
  const Tensor x = fixture::random_images(12, {3, 4, 4}, 31);
  const auto y = predicted_labels(det.model, x);
  for (double eps : {0.0, 0.01, 0.1, 0.3}) {
    for (AttackKind k : {AttackKind::fgsm, AttackKind::pgd, AttackKind::cw, AttackKind::adaptive}) {
      auto cfg = AttackConfig::defaults(k);
      cfg.epsilon = eps;
      cfg.step_size = eps / 4.0;
      cfg.steps = 5;
      cfg.random_start = k == AttackKind::pgd;
      const auto parts = det.parts();
      const auto b = run_attack(det.model, x, y, cfg, &parts);
      EXPECT_NO_THROW(b.validate());
      for (int i = 0; i < b.size(); ++i) EXPECT_LE(b.linf[static_cast<std::size_t>(i)], eps + 1e-9) << to_string(k);
      for (double v : b.adversarials.vec()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
      }
    }
  }
}

TEST(Attacks, ZeroBudgetLeavesInputsUnchanged) {
  const auto m = oracle::toy_classifier(32, 3);
  const Tensor x = fixture::random_images(6, {3, 4, 4}, 32);
  const auto y = predicted_labels(m, x);
  EXPECT_EQ(fgsm(m, x, y, 0.0).adversarials, x);
  auto cfg = AttackConfig::defaults(AttackKind::pgd);
  cfg.epsilon = 0.0;
  cfg.step_size = 0.0;
  cfg.random_start = true;
  EXPECT_EQ(pgd(m, x, y, cfg).adversarials, x);
}

TEST(Attacks, SingleStepPgdFromCleanStartIsFgsm) {
  const auto m = oracle::toy_classifier(33, 3);
  const Tensor x = fixture::random_images(10, {3, 4, 4}, 33);
  const auto y = predicted_labels(m, x);
  auto cfg = AttackConfig::defaults(AttackKind::pgd);
  cfg.epsilon = 0.07;
  cfg.step_size = 0.07;
  cfg.steps = 1;
  cfg.random_start = false;
  EXPECT_EQ(pgd(m, x, y, cfg).adversarials, fgsm(m, x, y, 0.07).adversarials);
}

TEST(Attacks, FgsmStepsAlongTheSignOfTheLossGradient) {
  const Shape s = {1, 1, 2, 2};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto m = Classifier::create(ArchitectureSpec{"plain_cnn", {3, 4, 3}, {}}, {1, 2, 2}, 2, seed);
    Tensor x(s, {0.3, 0.5, 0.6, 0.4});
    const int label = m.predict(x).front();
    const auto b = fgsm(m, x, {label}, 0.1);
    auto f = [&](const std::vector<double>& v) { return cross_entropy_at(m, v, s, label); };
    for (std::size_t k = 0; k < 4; ++k) {
      const double g = oracle::central_difference(f, x.vec(), k, 1e-6);
      if (std::abs(g) < 1e-6) continue;
      EXPECT_DOUBLE_EQ(b.adversarials[k], x[k] + 0.1 * (g > 0 ? 1.0 : -1.0)) << "seed " << seed << " pixel " << k;
    }
  }
}

TEST(Attacks, PgdIsDeterministicForAFixedSeed) {
  const auto m = oracle::toy_classifier(34, 3);
  const Tensor x = fixture::random_images(8, {3, 4, 4}, 34);
  const auto y = predicted_labels(m, x);
  auto cfg = AttackConfig::defaults(AttackKind::pgd);
  cfg.steps = 5;
  cfg.random_start = true;
  cfg.seed = 3;
  EXPECT_EQ(pgd(m, x, y, cfg).adversarials, pgd(m, x, y, cfg).adversarials);
}

TEST(Attacks, CwReturnsAlreadyMisclassifiedInputsUnchanged) {
  const auto m = oracle::toy_classifier(35, 3);
  const Tensor x = fixture::random_images(6, {3, 4, 4}, 35);
  auto y = predicted_labels(m, x);
  for (int& v : y) v = (v + 1) % 3;
  auto cfg = AttackConfig::defaults(AttackKind::cw);
  cfg.steps = 5;
  const auto b = cw(m, x, y, cfg);
  EXPECT_EQ(b.adversarials, x);
  for (bool ok : b.success) EXPECT_TRUE(ok);
}

TEST(Attacks, CwFindsSmallerL2PerturbationsThanFgsm) {
  const auto pool = fixture::toy_split(240, 2, 36, 0.0);
  ClassifierTrainConfig tc;
  tc.epochs = 3;
  tc.lr = 3e-3;
  tc.seed = 36;
  tc.augment = false;
  const auto m = train_classifier(pool, ArchitectureSpec{"plain_cnn", {6, 8, 8}, {0, 1}}, tc);
  const Tensor x = pool.images.slice_rows(0, 20);
  const auto y = predicted_labels(m, x);
  const auto f = fgsm(m, x, y, 0.3);
  auto cfg = AttackConfig::defaults(AttackKind::cw);
  cfg.steps = 100;
  cfg.cw_c = 10.0;
  cfg.cw_lr = 0.05;
  const auto c = cw(m, x, y, cfg);
  double fl2 = 0.0, cl2 = 0.0;
  int both = 0;
  for (int i = 0; i < 20; ++i) {
    const auto r = static_cast<std::size_t>(i);
    if (!f.success[r] || !c.success[r]) continue;
    fl2 += f.l2[r];
    cl2 += c.l2[r];
    ++both;
  }
  ASSERT_GT(both, 0);
  EXPECT_LT(cl2 / both, fl2 / both);
}

TEST(Adaptive, ZeroDetectorWeightsReduceToPgd) {
  const auto det = fixture::toy_detector(37);
  const Tensor x = fixture::random_images(8, {3, 4, 4}, 37);
  const auto y = predicted_labels(det.model, x);
  auto cfg = AttackConfig::defaults(AttackKind::adaptive);
  cfg.steps = 4;
  cfg.beta1 = cfg.beta2 = 0.0;
  const auto a = orthogonal_pgd(det.model, x, y, det.parts(), nullptr, cfg);
  auto pcfg = cfg;
  pcfg.kind = AttackKind::pgd;
  EXPECT_EQ(a.adversarials, pgd(det.model, x, y, pcfg).adversarials);
}

TEST(Adaptive, OrthogonalStepsAreOrthogonalAndCosinesAreLogged) {
  const auto det = fixture::toy_detector(38);
  const Tensor x = fixture::random_images(8, {3, 4, 4}, 38);
  const auto y = predicted_labels(det.model, x);
  auto cfg = AttackConfig::defaults(AttackKind::adaptive);
  cfg.steps = 6;
  cfg.epsilon = 0.1;
  cfg.step_size = 0.02;
  const auto b = orthogonal_pgd(det.model, x, y, det.parts(), nullptr, cfg);
  ASSERT_EQ(b.log.at("orthogonality_residual").size(), 6u);
  for (const auto& r : b.log.at("orthogonality_residual")) EXPECT_LE(r.get<double>(), 1e-6);
  for (const auto& c : b.log.at("grad_cosine_rt_lt")) {
    EXPECT_GE(c.get<double>(), -1.0 - 1e-12);
    EXPECT_LE(c.get<double>(), 1.0 + 1e-12);
  }
  EXPECT_EQ(b.log.at("fooled_fraction").size(), 6u);
}

TEST(Adaptive, DetectionFlagsAreLoggedPerFprLevel) {
  const auto det = fixture::toy_detector(39);
  const auto cdf = score_batch(fixture::random_images(100, {3, 4, 4}, 1), det.parts());
  const auto thr = score_batch(fixture::random_images(100, {3, 4, 4}, 2), det.parts());
  auto calib = fit_calibration(cdf, thr, {0.05, 0.5});
  calib.model_fingerprint = det.model.fingerprint();
  calib.recovery_fingerprint = det.recovery.fingerprint();
  calib.augmentation_fingerprint = det.augment.fingerprint();
  const Tensor x = fixture::random_images(5, {3, 4, 4}, 39);
  auto cfg = AttackConfig::defaults(AttackKind::adaptive);
  cfg.steps = 2;
  const auto b = orthogonal_pgd(det.model, x, det.model.predict(x), det.parts(), &calib, cfg);
  for (Measure m : all_measures()) {
    for (double f : {0.05, 0.5}) EXPECT_EQ(b.log.at("detected").at(to_string(m)).at(fpr_key(f)).size(), 5u);
  }
}

TEST(AdvBatch, ArchiveRoundTripAndValidation) {
  const auto m = oracle::toy_classifier(40, 3);
  const Tensor x = fixture::random_images(4, {3, 4, 4}, 40);
  auto b = fgsm(m, x, m.predict(x), 0.05);
  b.log["note"] = "kept";
  const auto back = AdvBatch::from_archive(b.to_archive());
  EXPECT_EQ(back.adversarials, b.adversarials);
  EXPECT_EQ(back.labels, b.labels);
  EXPECT_EQ(back.success, b.success);
  EXPECT_EQ(back.config.to_json(), b.config.to_json());
  EXPECT_EQ(back.log, b.log);

  auto broken = b;
  broken.adversarials[0] = broken.originals[0] + 0.5;
  EXPECT_THROW(broken.validate(), ValidationError);
}
