#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "lwd/math.hpp"
#include "oracles.hpp"

using namespace lwd;

TEST(Softmax, ZeroVectorIsUniform) {
  const auto p = softmax(std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LargeEqualEntriesDoNotOverflow) {
  const auto p = softmax(std::vector<double>{1000.0, 1000.0});
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Softmax, LogOneLogThree) {
  const auto p = softmax(std::vector<double>{std::log(1.0), std::log(3.0)});
  EXPECT_NEAR(p[0], 0.25, 1e-15);
  EXPECT_NEAR(p[1], 0.75, 1e-15);
}

TEST(Softmax, ShiftInvariantAndNormalized) {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(1 + trial % 9);
    for (double& x : v) x = uniform(rng, -30.0, 30.0);
    const double c = uniform(rng, -500.0, 500.0);
    std::vector<double> w = v;
    for (double& x : w) x += c;
    const auto p = softmax(v), q = softmax(w);
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      EXPECT_GT(p[i], 0.0 - 1e-300);
      EXPECT_NEAR(p[i], q[i], 1e-12);
      total += p[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(Entropy, OneHotIsZero) { EXPECT_EQ(shannon_entropy(one_hot(2, 5)), 0.0); }

TEST(Entropy, UniformIsLogK) {
  for (int k = 1; k <= 12; ++k) {
    const std::vector<double> p(static_cast<std::size_t>(k), 1.0 / k);
    EXPECT_NEAR(shannon_entropy(p), std::log(static_cast<double>(k)), 1e-12);
  }
}

TEST(Entropy, QuarterThreeQuarters) {
  EXPECT_NEAR(shannon_entropy(std::vector<double>{0.25, 0.75}), 0.5623, 1e-4);
}

TEST(Entropy, BoundedByLogK) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(2 + trial % 7);
    for (double& x : v) x = uniform(rng, -5.0, 5.0);
    const auto p = softmax(v);
    const double h = shannon_entropy(p);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, std::log(static_cast<double>(p.size())) + 1e-12);
    EXPECT_NEAR(h, oracle::softmax_entropy(v), 1e-12);
  }
}

TEST(Argmax, FirstWinsOnTies) { EXPECT_EQ(argmax(std::vector<double>{1.0, 3.0, 3.0}), 1); }

TEST(NormalQuantile, MatchesBisectionOracle) {
  for (double p : {1e-9, 1e-4, 0.01, 0.025, 0.2, 0.5, 0.7, 0.975, 0.999, 1 - 1e-9}) {
    EXPECT_NEAR(normal_quantile(p), oracle::normal_quantile(p), 1e-9) << p;
  }
  EXPECT_NEAR(normal_quantile(0.975), 1.96, 0.01);
  EXPECT_NEAR(normal_cdf(normal_quantile(0.3)), 0.3, 1e-12);
}

TEST(Seeds, DerivedStreamsDifferAndRepeat) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t s = 0; s < 50; ++s) seen.insert(derive_seed(7, s));
  EXPECT_EQ(seen.size(), 50u);
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
  EXPECT_NE(derive_seed(7, 3), derive_seed(8, 3));
}

TEST(Rng, PermutationIsAPermutation) {
  Rng rng(5);
  auto p = permutation(100, rng);
  std::sort(p.begin(), p.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(p[static_cast<std::size_t>(i)], i);
}
