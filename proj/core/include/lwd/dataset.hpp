#pragma once

#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lwd/tensor.hpp"

namespace lwd {

enum class SplitName { train, calibration, test };

std::string to_string(SplitName s);
SplitName split_from_string(const std::string& s);

/// A labelled batch of images with pixel values in [0, 1].
struct DatasetSplit {
  Tensor images;  // (N, C, H, W)
  std::vector<int> labels;
  int num_classes = 0;
  SplitName split = SplitName::train;
  /// Positions of each example in the source pool; used to prove that
  /// calibration and test never overlap.
  std::vector<int> source_indices;
  std::string source;

  int size() const { return static_cast<int>(labels.size()); }
  int channels() const { return images.dim(1); }
  int height() const { return images.dim(2); }
  int width() const { return images.dim(3); }
  Shape image_shape() const { return {channels(), height(), width()}; }

  /// Throws ValidationError on any broken invariant.
  void validate() const;
  DatasetSplit subset(std::span<const int> rows) const;
  DatasetSplit head(int n) const;
};

/// Procedurally generated, class-structured images (gratings, colour blobs,
/// distractors and pixel noise). Each image depends only on (seed, index).
struct SyntheticSpec {
  int n = 0;
  int classes = 10;
  int channels = 3;
  int height = 16;
  int width = 16;
  std::uint64_t seed = 0;
  /// 0 = trivially separable, 1 = heavily confusable.
  double difficulty = 0.5;

  static SyntheticSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// How to cut a source pool into splits.
struct SplitSpec {
  SplitName split = SplitName::test;
  /// Keep at most this many examples after partitioning (0 = all).
  int limit = 0;
  /// Synthetic pools only: leading share of the permuted pool used for training.
  double train_fraction = 0.6;
  /// Share of the held-out pool assigned to calibration; the rest is test.
  double calibration_fraction = 0.5;
  std::uint64_t seed = 0;
};

DatasetSplit generate_synthetic(const SyntheticSpec& spec);

/// Cuts an in-memory pool into train / calibration / test by a seeded
/// permutation. Same partition rule as synthetic sources in load_dataset.
DatasetSplit partition_pool(const DatasetSplit& pool, const SplitSpec& spec);

/// `source` is either a CIFAR-10 binary directory (data_batch_{1..5}.bin,
/// test_batch.bin) or a synthetic-spec JSON file. Calibration and test are
/// disjoint partitions of the held-out pool (CIFAR test batch, or the
/// non-train tail of the synthetic pool).
DatasetSplit load_dataset(const std::filesystem::path& source, const SplitSpec& spec);

/// Reads CIFAR-10 binary batch files in order and concatenates them.
DatasetSplit read_cifar10_batches(const std::vector<std::filesystem::path>& files);

bool is_cifar10_dir(const std::filesystem::path& dir);

}  // namespace lwd
