#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace lwd {

/// Numerically safe softmax (max-subtracted).
std::vector<double> softmax(std::span<const double> v);

/// Shannon entropy in nats; 0 ln 0 is taken as 0.
double shannon_entropy(std::span<const double> p);

std::vector<double> one_hot(int index, int size);

/// Index of the largest entry; first one wins on ties.
int argmax(std::span<const double> v);

/// Standard normal quantile function.
double normal_quantile(double p);
double normal_cdf(double z);

double mean_of(std::span<const double> v);
/// Population variance.
double variance_of(std::span<const double> v);

using Rng = std::mt19937_64;

/// Derives a child seed from a parent seed and a stream tag, so independent
/// stages never share a random stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

std::vector<int> permutation(int n, Rng& rng);

/// Uniform double in [0, 1) from the top 53 bits of one draw.
double uniform01(Rng& rng);
double uniform(Rng& rng, double lo, double hi);
/// Box-Muller draw; unlike std::normal_distribution the stream is identical
/// across standard libraries.
double standard_normal(Rng& rng);

}  // namespace lwd
