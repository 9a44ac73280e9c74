#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>

#include "fixtures.hpp"
#include "lwd/dataset.hpp"
#include "lwd/errors.hpp"

using namespace lwd;
namespace fs = std::filesystem;

namespace {

void write_cifar_batch(const fs::path& path, const std::vector<int>& labels, int pixel_offset) {
  std::ofstream out(path, std::ios::binary);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    out.put(static_cast<char>(labels[r]));
    for (int k = 0; k < 3 * 32 * 32; ++k) out.put(static_cast<char>((k + pixel_offset + static_cast<int>(r)) % 256));
  }
}

void write_text(const fs::path& path, const std::string& s) {
  std::ofstream out(path);
  out << s;
}

std::set<int> index_set(const DatasetSplit& d) { return {d.source_indices.begin(), d.source_indices.end()}; }

}  // namespace

TEST(Synthetic, SameSpecTwiceIsBitIdentical) {
  SyntheticSpec spec;
  spec.n = 8;
  spec.classes = 2;
  spec.seed = 0;
  const auto a = generate_synthetic(spec), b = generate_synthetic(spec);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NO_THROW(a.validate());
  EXPECT_EQ(a.size(), 8);
  EXPECT_EQ(a.num_classes, 2);
}

TEST(Synthetic, LoadedFromJsonTwiceIsBitIdentical) {
  fixture::TempDir dir("synthetic");
  write_text(dir.path() / "spec.json", R"({"n": 8, "classes": 2, "c": 3, "h": 8, "w": 8, "seed": 0})");
  SplitSpec s;
  s.split = SplitName::train;
  s.train_fraction = 0.5;
  const auto a = load_dataset(dir.path() / "spec.json", s), b = load_dataset(dir.path() / "spec.json", s);
  EXPECT_EQ(a.images, b.images);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.size(), 4);
}

TEST(Synthetic, SplitsPartitionThePoolAndCalibrationAvoidsTest) {
  const auto pool = fixture::toy_split(200, 4, 3);
  SplitSpec s;
  s.seed = 9;
  s.split = SplitName::train;
  const auto tr = partition_pool(pool, s);
  s.split = SplitName::calibration;
  const auto cal = partition_pool(pool, s);
  s.split = SplitName::test;
  const auto te = partition_pool(pool, s);
  EXPECT_EQ(tr.size() + cal.size() + te.size(), 200);
  std::set<int> all;
  for (const auto* d : {&tr, &cal, &te}) {
    for (int i : d->source_indices) EXPECT_TRUE(all.insert(i).second) << "index " << i << " appears twice";
  }
  const auto ci = index_set(cal), ti = index_set(te);
  for (int i : ci) EXPECT_EQ(ti.count(i), 0u);
  EXPECT_EQ(cal.split, SplitName::calibration);
  EXPECT_EQ(te.split, SplitName::test);
}

TEST(Synthetic, BadSpecIsConfigError) {
  EXPECT_THROW(SyntheticSpec::from_json(nlohmann::json{{"n", 0}, {"classes", 2}, {"h", 4}, {"w", 4}, {"seed", 0}}),
               ConfigError);
}

TEST(Cifar10, FabricatedBatchReadsAsNormalizedImages) {
  fixture::TempDir dir("cifar");
  write_cifar_batch(dir.path() / "b.bin", {3, 0, 9}, 0);
  const auto d = read_cifar10_batches({dir.path() / "b.bin"});
  EXPECT_EQ(d.size(), 3);
  EXPECT_EQ(d.image_shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(d.num_classes, 10);
  EXPECT_EQ(d.labels, (std::vector<int>{3, 0, 9}));
  EXPECT_DOUBLE_EQ(d.images[5], 5.0 / 255.0);
  EXPECT_DOUBLE_EQ(d.images[3072 + 254], 255.0 / 255.0);
  EXPECT_NO_THROW(d.validate());
}

TEST(Cifar10, LabelTenIsValidationError) {
  fixture::TempDir dir("cifar-label");
  write_cifar_batch(dir.path() / "b.bin", {1, 10}, 0);
  EXPECT_THROW(read_cifar10_batches({dir.path() / "b.bin"}), ValidationError);
}

TEST(Cifar10, TruncatedBatchIsLoadErrorNamingThePath) {
  fixture::TempDir dir("cifar-trunc");
  write_text(dir.path() / "b.bin", std::string(100, 'x'));
  try {
    read_cifar10_batches({dir.path() / "b.bin"});
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("b.bin"), std::string::npos);
  }
}

TEST(Cifar10, DirectoryLayoutGivesDisjointCalibrationAndTest) {
  fixture::TempDir dir("cifar-dir");
  for (int b = 1; b <= 5; ++b) write_cifar_batch(dir.path() / ("data_batch_" + std::to_string(b) + ".bin"), {0, 1}, b);
  write_cifar_batch(dir.path() / "test_batch.bin", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, 7);
  ASSERT_TRUE(is_cifar10_dir(dir.path()));
  SplitSpec s;
  s.split = SplitName::train;
  EXPECT_EQ(load_dataset(dir.path(), s).size(), 10);
  s.split = SplitName::calibration;
  const auto cal = load_dataset(dir.path(), s);
  s.split = SplitName::test;
  const auto te = load_dataset(dir.path(), s);
  EXPECT_EQ(cal.size() + te.size(), 10);
  const auto ci = index_set(cal);
  for (int i : te.source_indices) EXPECT_EQ(ci.count(i), 0u);
}

TEST(Cifar10, RealTestArchiveWhenAvailable) {
  const char* env = std::getenv("LWD_CIFAR10_DIR");
  if (env == nullptr || !is_cifar10_dir(env)) GTEST_SKIP() << "set LWD_CIFAR10_DIR to a CIFAR-10 binary directory";
  const auto d = read_cifar10_batches({fs::path(env) / "test_batch.bin"});
  EXPECT_EQ(d.size(), 10000);
  EXPECT_EQ(d.image_shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(d.num_classes, 10);
}

TEST(LoadDataset, MissingSourceIsLoadErrorNamingThePath) {
  try {
    load_dataset("/no/such/dataset", SplitSpec{});
    FAIL();
  } catch (const LoadError& e) {
    EXPECT_NE(std::string(e.what()).find("/no/such/dataset"), std::string::npos);
  }
}

TEST(DatasetSplit, ValidateCatchesBrokenInvariants) {
  auto d = fixture::toy_split(4, 2, 1);
  auto bad_label = d;
  bad_label.labels[0] = 2;
  EXPECT_THROW(bad_label.validate(), ValidationError);
  auto bad_pixel = d;
  bad_pixel.images[0] = 1.5;
  EXPECT_THROW(bad_pixel.validate(), ValidationError);
  auto bad_count = d;
  bad_count.labels.pop_back();
  EXPECT_THROW(bad_count.validate(), ValidationError);
}
