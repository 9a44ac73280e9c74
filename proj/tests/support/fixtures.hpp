#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lwd/classifier.hpp"
#include "lwd/dataset.hpp"
#include "lwd/fusion.hpp"
#include "lwd/logit_probe.hpp"
#include "lwd/recovery.hpp"

namespace lwd::fixture {

/// Uniform [0, 1) pixels, N x C x H x W.
Tensor random_images(int n, const Shape& chw, std::uint64_t seed);

/// Untrained toy classifier plus randomly initialized detector banks.
struct ToyDetector {
  Classifier model;
  RecoveryBank recovery;
  AugmentationBank augment;

  DetectorParts parts() const { return {&model, &recovery, &augment, {}, {}}; }
};

ToyDetector toy_detector(std::uint64_t seed, int G = 2, double init_noise = 0.05);

/// Small separable synthetic split (3 x 8 x 8 images).
DatasetSplit toy_split(int n, int classes, std::uint64_t seed, double difficulty = 0.0);

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace lwd::fixture
