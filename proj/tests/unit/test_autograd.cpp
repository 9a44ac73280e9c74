#include <gtest/gtest.h>

#include <functional>

#include "lwd/autograd.hpp"
#include "lwd/math.hpp"
#include "oracles.hpp"

using namespace lwd;

namespace {

using ScalarFn = std::function<ad::Var(const ad::Var&)>;

Tensor random_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor t(s);
  Rng rng(seed);
  for (double& v : t.span()) v = uniform(rng, lo, hi);
  return t;
}

void expect_gradient_matches(const ScalarFn& f, const Tensor& at, double tol = 1e-6) {
  const ad::Var x = ad::leaf(at, true);
  ad::backward(f(x));
  const Tensor analytic = x.grad();
  auto value = [&](const std::vector<double>& v) { return f(ad::constant(Tensor(at.shape(), v))).value()[0]; };
  for (std::size_t i = 0; i < at.size(); ++i) {
    const double numeric = oracle::central_difference(value, at.vec(), i, 1e-5);
    EXPECT_LE(oracle::relative_error(analytic[i], numeric), tol) << "entry " << i << ": " << analytic[i] << " vs " << numeric;
  }
}

}  // namespace

TEST(Autograd, GeluMatchesFiniteDifferences) {
  expect_gradient_matches([](const ad::Var& x) { return ad::sum(ad::gelu(x)); }, random_tensor({3, 4}, 1, -3, 3));
}

TEST(Autograd, LinearAndTanh) {
  const ad::Var w = ad::constant(random_tensor({5, 4}, 2));
  const ad::Var b = ad::constant(random_tensor({5}, 3));
  expect_gradient_matches([&](const ad::Var& x) { return ad::sum(ad::tanh(ad::linear(x, w, b))); }, random_tensor({2, 4}, 4));
}

TEST(Autograd, Conv2dAndPooling) {
  const ad::Var w = ad::constant(random_tensor({3, 2, 3, 3}, 5));
  const ad::Var b = ad::constant(random_tensor({3}, 6));
  expect_gradient_matches(
      [&](const ad::Var& x) { return ad::sum(ad::square(ad::global_avg_pool(ad::avg_pool2(ad::conv2d(x, w, b))))); },
      random_tensor({2, 2, 4, 4}, 7));
}

TEST(Autograd, SoftmaxEntropyAndCrossEntropy) {
  const std::vector<int> labels = {0, 2, 1};
  expect_gradient_matches(
      [&](const ad::Var& x) { return ad::add(ad::sum(ad::softmax_entropy_rows(x)), ad::sum(ad::cross_entropy_rows(x, labels))); },
      random_tensor({3, 3}, 8, -2, 2));
}

TEST(Autograd, LogFloorAndRowMean) {
  expect_gradient_matches([](const ad::Var& x) { return ad::sum(ad::log_floor(ad::row_mean(ad::square(x)), 1e-12)); },
                          random_tensor({3, 5}, 9));
}

TEST(Autograd, MatmulNtAndMargin) {
  const ad::Var w = ad::constant(random_tensor({4, 6}, 10));
  const std::vector<int> labels = {1, 3};
  expect_gradient_matches([&](const ad::Var& x) { return ad::sum(ad::margin_rows(ad::matmul_nt(x, w), labels, 0.0)); },
                          random_tensor({2, 6}, 11), 1e-5);
}

TEST(Autograd, BackwardTwiceGivesSameGradient) {
  const ad::Var x = ad::leaf(random_tensor({2, 3}, 12), true);
  const ad::Var y = ad::sum(ad::gelu(ad::square(x)));
  ad::backward(y);
  const Tensor g1 = x.grad();
  x.node()->grad = Tensor();
  ad::backward(y);
  EXPECT_EQ(g1, x.grad());
}
