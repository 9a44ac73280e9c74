#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "lwd/errors.hpp"
#include "lwd/math.hpp"
#include "lwd/recovery.hpp"
#include "oracles.hpp"

using namespace lwd;

namespace {

LayerTrace random_trace(const std::vector<int>& dims, Rng& rng, double scale = 1.0) {
  LayerTrace t;
  for (int d : dims) {
    std::vector<double> z(static_cast<std::size_t>(d));
    for (double& v : z) v = scale * uniform(rng, -1.0, 1.0);
    t.z.push_back(std::move(z));
  }
  t.logits = {0.0, 0.0};
  t.probs = {0.5, 0.5};
  t.predicted = 0;
  return t;
}

RecoveryConfig small_config(int k_rt = 1) {
  RecoveryConfig c;
  c.k_rt = k_rt;
  c.depth = 2;
  c.hidden_dim = 6;
  c.seed = 4;
  c.error_units = "raw";
  return c;
}

/// Makes head k output `target` for every input: zero final weights, bias = target.
void pin_head(RecoveryBank& bank, int k, const std::vector<double>& target) {
  auto& layers = bank.head(k).layers();
  layers[layers.size() - 2].mutable_value().fill(0.0);
  Tensor& b = layers.back().mutable_value();
  for (std::size_t i = 0; i < target.size(); ++i) b[i] = target[i];
}

}  // namespace

TEST(LayerErrors, PerfectReconstructionGivesZero) {
  Rng rng(1);
  const std::vector<int> dims = {3, 5, 4, 2};
  const LayerTrace t = random_trace(dims, rng);
  auto bank = RecoveryBank::create(dims, small_config());
  for (int k = 1; k <= 3; ++k) pin_head(bank, k, t.z[static_cast<std::size_t>(k - 1)]);
  const auto e = bank.layer_errors(t);
  ASSERT_EQ(e.e.size(), 3u);
  EXPECT_EQ(e.k_rt, 1);
  for (double v : e.e) EXPECT_EQ(v, 0.0);
}

TEST(LayerErrors, AllOnesOffsetGivesOne) {
  Rng rng(2);
  const std::vector<int> dims = {3, 5, 4, 2};
  const LayerTrace t = random_trace(dims, rng);
  auto bank = RecoveryBank::create(dims, small_config());
  for (int k = 1; k <= 3; ++k) {
    auto shifted = t.z[static_cast<std::size_t>(k - 1)];
    for (double& v : shifted) v += 1.0;
    pin_head(bank, k, shifted);
  }
  for (double v : bank.layer_errors(t).e) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(LayerErrors, MatchesScalarLoopOracleOnRandomTraces) {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int L = 3 + trial % 4;
    std::vector<int> dims;
    for (int i = 0; i < L; ++i) dims.push_back(2 + static_cast<int>(uniform01(rng) * 6));
    auto cfg = small_config(1 + trial % (L - 1));
    cfg.depth = 1 + trial % 3;
    cfg.seed = static_cast<std::uint64_t>(trial);
    auto bank = RecoveryBank::create(dims, cfg);
    std::vector<double> scale;
    for (int k = 0; k < bank.num_errors(); ++k) scale.push_back(uniform(rng, 0.1, 3.0));
    bank.set_error_scale(scale);
    const LayerTrace t = random_trace(dims, rng, 2.0);
    const auto got = bank.layer_errors(t).e;
    const auto want = oracle::layer_errors(bank, t);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t k = 0; k < got.size(); ++k) EXPECT_NEAR(got[k], want[k], 1e-9 * std::max(1.0, want[k]));
    if (got.size() >= 2) EXPECT_NEAR(rt_score(got), oracle::rt_score(want), 1e-9);
  }
}

TEST(LayerErrors, DimensionMismatchIsContractError) {
  Rng rng(4);
  const auto bank = RecoveryBank::create({3, 5, 4}, small_config());
  EXPECT_THROW(bank.layer_errors(random_trace({3, 6, 4}, rng)), ContractError);
  EXPECT_THROW(bank.layer_errors(random_trace({3, 5}, rng)), ContractError);
}

TEST(RecoveryBank, KOutOfRangeIsConfigError) {
  EXPECT_THROW(RecoveryBank::create({3, 5, 4}, small_config(0)), ConfigError);
  EXPECT_THROW(RecoveryBank::create({3, 5, 4}, small_config(3)), ConfigError);
  EXPECT_NO_THROW(RecoveryBank::create({3, 5, 4}, small_config(2)));
  RecoveryConfig c = small_config();
  c.depth = 0;
  EXPECT_THROW(RecoveryBank::create({3, 5, 4}, c), ConfigError);
  EXPECT_THROW(RecoveryConfig::from_json({{"error_units", "furlongs"}}), ConfigError);
}

TEST(RecoveryBank, HeadsCoverKToLMinusOneWithDeclaredShape) {
  RecoveryConfig c = small_config(2);
  c.depth = 3;
  c.hidden_dim = 9;
  const auto bank = RecoveryBank::create({3, 5, 4, 7, 2}, c);
  EXPECT_EQ(bank.num_errors(), 3);
  for (int k = 2; k <= 4; ++k) {
    EXPECT_EQ(bank.head(k).in_dim(), 2);
    EXPECT_EQ(bank.head(k).out_dim(), std::vector<int>({3, 5, 4, 7, 2})[static_cast<std::size_t>(k - 1)]);
    EXPECT_EQ(bank.head(k).layers().size(), 8u);
  }
  EXPECT_THROW(bank.head(1), std::out_of_range);
}

TEST(RecoveryBank, ErrorScaleValidation) {
  auto bank = RecoveryBank::create({3, 5, 4}, small_config());
  EXPECT_THROW(bank.set_error_scale({1.0}), ContractError);
  EXPECT_THROW(bank.set_error_scale({1.0, 0.0}), ValidationError);
  EXPECT_NO_THROW(bank.set_error_scale({1.0, 2.0}));
}

TEST(RecoveryBank, ArchiveRoundTripKeepsErrorsAndFingerprint) {
  Rng rng(5);
  auto bank = RecoveryBank::create({3, 5, 4}, small_config());
  bank.set_error_scale({0.5, 2.0});
  const auto back = RecoveryBank::from_archive(bank.to_archive());
  EXPECT_EQ(back.fingerprint(), bank.fingerprint());
  EXPECT_EQ(back.error_scale(), bank.error_scale());
  const auto t = random_trace({3, 5, 4}, rng);
  EXPECT_EQ(back.layer_errors(t).e, bank.layer_errors(t).e);
}

TEST(RtScore, UniformErrorsScoreZero) {
  for (int m = 2; m <= 9; ++m) {
    for (double c : {1e-6, 0.3, 1.0, 2.5, 17.0, 1e4}) {
      const std::vector<double> e(static_cast<std::size_t>(m), c);
      EXPECT_EQ(rt_score(e), 0.0) << "M=" << m << " c=" << c;
    }
  }
}

TEST(RtScore, OneLargeEntryScoresPositiveAndGrows) {
  const std::vector<double> e10 = {0.0, 0.0, 0.0, 10.0};
  const std::vector<double> e100 = {0.0, 0.0, 0.0, 100.0};
  EXPECT_GT(rt_score(e10), 0.0);
  EXPECT_GT(rt_score(e100), rt_score(e10));
  EXPECT_NEAR(rt_score(e10), oracle::rt_score(e10), 1e-12);
}

TEST(RtScore, AllZeroErrorsAreFinite) {
  const std::vector<double> e(4, 0.0);
  EXPECT_TRUE(std::isfinite(rt_score(e)));
}

TEST(RtScore, PermutationInvariant) {
  Rng rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> e(2 + trial % 8);
    for (double& v : e) v = uniform(rng, 0.0, 5.0);
    const double base = rt_score(e);
    std::vector<int> perm = permutation(static_cast<int>(e.size()), rng);
    std::vector<double> p;
    for (int i : perm) p.push_back(e[static_cast<std::size_t>(i)]);
    EXPECT_NEAR(rt_score(p), base, 1e-12 * std::max(1.0, std::abs(base)));
  }
}

TEST(RtScore, TransferringMassToThePeakNeverLowersTheScore) {
  Rng rng(7);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t m = 2 + static_cast<std::size_t>(trial % 7);
    std::vector<double> e(m);
    for (double& v : e) v = uniform(rng, 0.0, 4.0);
    if (mean_of(e) <= 1.0) {
      for (double& v : e) v += 1.0;
    }
    const auto top = static_cast<std::size_t>(argmax(e));
    std::size_t small = top == 0 ? 1 : 0;
    for (std::size_t i = 0; i < m; ++i) {
      if (i != top && e[i] < e[small]) small = i;
    }
    const double before = rt_score(e);
    const double moved = uniform01(rng) * e[small];
    e[small] -= moved;
    e[top] += moved;
    EXPECT_GE(rt_score(e), before - 1e-12);
  }
}

TEST(RtScore, RowsAgreeWithScalarAndTermSwitches) {
  Rng rng(8);
  Tensor errs({5, 4});
  for (double& v : errs.span()) v = uniform(rng, 0.0, 3.0);
  for (const RtTerms terms : {RtTerms{true, true}, RtTerms{false, true}, RtTerms{true, false}}) {
    const Tensor rows = rt_score_rows(ad::constant(errs), terms).value();
    for (int r = 0; r < 5; ++r) {
      const auto row = errs.row(r);
      const std::vector<double> e(row.begin(), row.end());
      EXPECT_NEAR(rows[static_cast<std::size_t>(r)], rt_score(e, terms), 1e-12);
      EXPECT_NEAR(rt_score(e, terms), oracle::rt_score(e, terms.inverse_entropy, terms.log_error), 1e-12);
    }
  }
  EXPECT_THROW(rt_score(std::vector<double>{1.0}), ContractError);
}

TEST(Training, IdentityToyNetworkIsRecoveredAlmostExactly) {
  Rng rng(9);
  std::vector<LayerTrace> traces;
  for (int i = 0; i < 400; ++i) {
    LayerTrace t = random_trace({3, 3, 3, 3}, rng);
    for (int k = 0; k < 3; ++k) t.z[static_cast<std::size_t>(k)] = t.z[3];
    traces.push_back(t);
  }
  RecoveryConfig cfg = small_config();
  cfg.depth = 2;
  cfg.hidden_dim = 32;
  cfg.epochs = 200;
  cfg.lr = 3e-3;
  cfg.weight_decay = 0.0;
  const auto bank = train_recovery_bank(traces, cfg);
  std::vector<LayerTrace> fresh;
  for (int i = 0; i < 100; ++i) {
    LayerTrace t = random_trace({3, 3, 3, 3}, rng);
    for (int k = 0; k < 3; ++k) t.z[static_cast<std::size_t>(k)] = t.z[3];
    fresh.push_back(t);
  }
  for (const auto& ev : bank.layer_errors(fresh)) {
    for (double v : ev.e) EXPECT_LE(v, 1e-3);
  }
  const auto& meta = bank.metadata();
  EXPECT_LE(meta.at("holdout_loss_final").get<double>(), meta.at("holdout_loss_initial").get<double>());
  EXPECT_EQ(meta.at("loss_curve").size(), 200u);
}

TEST(Training, SameConfigAndSeedGiveIdenticalHeads) {
  Rng rng(10);
  std::vector<LayerTrace> traces;
  for (int i = 0; i < 50; ++i) traces.push_back(random_trace({4, 3, 5}, rng));
  RecoveryConfig cfg = small_config();
  cfg.epochs = 3;
  cfg.error_units = "benign";
  const auto a = train_recovery_bank(traces, cfg), b = train_recovery_bank(traces, cfg);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.to_archive().sha256(), b.to_archive().sha256());
}

TEST(Training, BenignUnitsMakeTheHoldoutMeanErrorOne) {
  Rng rng(11);
  std::vector<LayerTrace> traces;
  for (int i = 0; i < 200; ++i) traces.push_back(random_trace({4, 3, 5}, rng));
  RecoveryConfig cfg = small_config();
  cfg.epochs = 2;
  cfg.error_units = "benign";
  cfg.holdout_fraction = 0.2;
  const auto bank = train_recovery_bank(traces, cfg);
  const auto scale = bank.metadata().at("error_scale").get<std::vector<double>>();
  EXPECT_EQ(scale, bank.error_scale());
  RecoveryBank raw = bank;
  raw.set_error_scale({1.0, 1.0});
  const auto t = traces.front();
  const auto scaled = bank.layer_errors(t).e, plain = raw.layer_errors(t).e;
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(scaled[k] * scale[k], plain[k], 1e-12 * std::max(1.0, plain[k]));
}

TEST(Training, LossGradientMatchesFiniteDifferencesOnThreeDimToy) {
  Rng rng(12);
  std::vector<LayerTrace> traces;
  for (int i = 0; i < 6; ++i) traces.push_back(random_trace({3, 3, 3}, rng));
  RecoveryConfig cfg = small_config();
  cfg.hidden_dim = 4;
  auto bank = RecoveryBank::create({3, 3, 3}, cfg);
  bank.set_trainable(true);
  auto loss_of = [&]() {
    std::vector<ad::Var> taps;
    for (int i = 0; i < 3; ++i) {
      Tensor t({6, 3});
      for (int r = 0; r < 6; ++r) {
        const auto& z = traces[static_cast<std::size_t>(r)].z[static_cast<std::size_t>(i)];
        std::copy(z.begin(), z.end(), t.row(r).begin());
      }
      taps.push_back(ad::constant(t));
    }
    return ad::mean(ad::row_sum(bank.error_rows(taps)));
  };
  ad::backward(loss_of());
  EXPECT_NEAR(loss_of().value()[0], bank.loss(traces), 1e-12);
  for (auto& p : bank.parameters()) {
    const Tensor analytic = p.grad();
    for (std::size_t i = 0; i < p.value().size(); ++i) {
      auto f = [&](const std::vector<double>& v) {
        const double keep = p.value()[i];
        p.mutable_value()[i] = v[i];
        const double out = bank.loss(traces);
        p.mutable_value()[i] = keep;
        return out;
      };
      const double numeric = oracle::central_difference(f, p.value().vec(), i, 1e-5);
      EXPECT_LE(oracle::relative_error(analytic[i], numeric), 1e-3) << analytic[i] << " vs " << numeric;
    }
  }
}
