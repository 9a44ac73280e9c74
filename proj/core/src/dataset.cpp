#include "lwd/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "lwd/archive.hpp"
#include "lwd/errors.hpp"
#include "lwd/math.hpp"

namespace lwd {

namespace fs = std::filesystem;

std::string to_string(SplitName s) {
  switch (s) {
    case SplitName::train: return "train";
    case SplitName::calibration: return "calibration";
    case SplitName::test: return "test";
  }
  return "unknown";
}

SplitName split_from_string(const std::string& s) {
  if (s == "train") return SplitName::train;
  if (s == "calibration") return SplitName::calibration;
  if (s == "test") return SplitName::test;
  throw ConfigError("unknown split name '" + s + "'");
}

void DatasetSplit::validate() const {
  if (images.rank() != 4) throw ValidationError(source + ": images must be rank 4 (N, C, H, W)");
  if (images.dim(0) != size()) {
    throw ValidationError(source + ": " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(size()) + " labels");
  }
  if (num_classes <= 0) throw ValidationError(source + ": num_classes must be positive");
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ValidationError(source + ": label " + std::to_string(y) + " outside [0, " +
                            std::to_string(num_classes) + ")");
    }
  }
  for (double v : images.span()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(source + ": pixel value outside [0, 1]");
  }
}

DatasetSplit DatasetSplit::subset(std::span<const int> rows) const {
  DatasetSplit out;
  out.images = images.gather_rows(rows);
  out.num_classes = num_classes;
  out.split = split;
  out.source = source;
  for (int r : rows) {
    out.labels.push_back(labels[static_cast<std::size_t>(r)]);
    out.source_indices.push_back(source_indices.empty() ? r : source_indices[static_cast<std::size_t>(r)]);
  }
  return out;
}

DatasetSplit DatasetSplit::head(int n) const {
  std::vector<int> rows(static_cast<std::size_t>(std::min(n, size())));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = static_cast<int>(i);
  return subset(rows);
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    s.n = j.at("n").get<int>();
    s.classes = j.at("classes").get<int>();
    s.height = j.at("h").get<int>();
    s.width = j.at("w").get<int>();
    s.seed = j.at("seed").get<std::uint64_t>();
    s.channels = j.value("c", 3);
    s.difficulty = j.value("difficulty", 0.5);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  if (s.n <= 0 || s.classes < 2 || s.height <= 0 || s.width <= 0 || s.channels <= 0) {
    throw ConfigError("synthetic spec: n, h, w, c must be positive and classes >= 2");
  }
  return s;
}

nlohmann::json SyntheticSpec::to_json() const {
  return {{"n", n}, {"classes", classes}, {"c", channels}, {"h", height}, {"w", width},
          {"seed", seed}, {"difficulty", difficulty}};
}

namespace {

struct ClassPrototype {
  double theta = 0.0;
  double freq = 2.0;
  std::vector<double> tint;    // per-channel grating modulation in [-1, 1]
  std::vector<double> colour;  // blob colour
  double cx = 0.5, cy = 0.5, radius = 0.2;
};

ClassPrototype make_prototype(const SyntheticSpec& spec, int c) {
  Rng rng(derive_seed(spec.seed, 0xC1A55ULL + static_cast<std::uint64_t>(c)));
  ClassPrototype p;
  p.theta = std::numbers::pi * c / spec.classes + uniform(rng, -0.1, 0.1);
  p.freq = uniform(rng, 1.5, 3.5);
  for (int ch = 0; ch < spec.channels; ++ch) {
    p.tint.push_back(uniform(rng, -1.0, 1.0));
    p.colour.push_back(uniform(rng, 0.1, 0.9));
  }
  p.cx = uniform(rng, 0.3, 0.7);
  p.cy = uniform(rng, 0.3, 0.7);
  p.radius = uniform(rng, 0.15, 0.3);
  return p;
}

void render_sample(const SyntheticSpec& spec, const std::vector<ClassPrototype>& protos, std::uint64_t index,
                   double* out, int& label) {
  Rng rng(derive_seed(spec.seed, index));
  label = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.classes));
  int distractor = static_cast<int>(rng() % static_cast<std::uint64_t>(spec.classes - 1));
  if (distractor >= label) ++distractor;

  const auto& p = protos[static_cast<std::size_t>(label)];
  const auto& q = protos[static_cast<std::size_t>(distractor)];
  const double d = spec.difficulty;
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double theta = p.theta + 0.25 * d * standard_normal(rng);
  const double amp = uniform(rng, 0.5, 1.0);
  const double shift_x = uniform(rng, -0.12, 0.12);
  const double shift_y = uniform(rng, -0.12, 0.12);
  const double mix = uniform(rng, 0.0, 0.9 * d);
  const double qphase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double background = uniform(rng, 0.35, 0.65);
  const double noise = 0.02 + 0.08 * d;

  const int h = spec.height, w = spec.width;
  for (int ch = 0; ch < spec.channels; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double u = (x + 0.5) / w, v = (y + 0.5) / h;
        const double g = std::sin(2.0 * std::numbers::pi * p.freq * (u * std::cos(theta) + v * std::sin(theta)) + phase);
        const double gq = std::sin(2.0 * std::numbers::pi * q.freq * (u * std::cos(q.theta) + v * std::sin(q.theta)) + qphase);
        const double dx = u - p.cx - shift_x, dy = v - p.cy - shift_y;
        const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * p.radius * p.radius));
        const double qx = u - q.cx, qy = v - q.cy;
        const double qblob = std::exp(-(qx * qx + qy * qy) / (2.0 * q.radius * q.radius));
        const auto c = static_cast<std::size_t>(ch);
        double val = background + 0.2 * amp * g * p.tint[c] + 0.45 * blob * (p.colour[c] - background);
        val += mix * (0.2 * gq * q.tint[c] + 0.45 * qblob * (q.colour[c] - background));
        val += noise * standard_normal(rng);
        out[(static_cast<std::size_t>(ch) * h + y) * w + x] = std::clamp(val, 0.0, 1.0);
      }
    }
  }
}

}  // namespace

DatasetSplit generate_synthetic(const SyntheticSpec& spec) {
  std::vector<ClassPrototype> protos;
  for (int c = 0; c < spec.classes; ++c) protos.push_back(make_prototype(spec, c));
  DatasetSplit ds;
  ds.images = Tensor({spec.n, spec.channels, spec.height, spec.width});
  ds.labels.resize(static_cast<std::size_t>(spec.n));
  ds.num_classes = spec.classes;
  ds.source = "synthetic(seed=" + std::to_string(spec.seed) + ")";
  const std::size_t per = static_cast<std::size_t>(spec.channels) * spec.height * spec.width;
  for (int i = 0; i < spec.n; ++i) {
    render_sample(spec, protos, static_cast<std::uint64_t>(i), ds.images.ptr() + i * per,
                  ds.labels[static_cast<std::size_t>(i)]);
    ds.source_indices.push_back(i);
  }
  return ds;
}

bool is_cifar10_dir(const fs::path& dir) {
  return fs::is_directory(dir) && fs::exists(dir / "test_batch.bin");
}

DatasetSplit read_cifar10_batches(const std::vector<fs::path>& files) {
  constexpr int kRecord = 1 + 3 * 32 * 32;
  DatasetSplit ds;
  ds.num_classes = 10;
  std::vector<double> pixels;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    if (!in) throw LoadError("cannot open CIFAR-10 batch " + f.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kRecord != 0) {
      throw LoadError("corrupt CIFAR-10 batch " + f.string() + " (size " + std::to_string(bytes.size()) +
                      " is not a multiple of " + std::to_string(kRecord) + ")");
    }
    for (std::size_t r = 0; r < bytes.size() / kRecord; ++r) {
      const unsigned char* rec = bytes.data() + r * kRecord;
      if (rec[0] >= 10) {
        throw ValidationError(f.string() + ": record " + std::to_string(r) + " has label " +
                              std::to_string(rec[0]) + " outside [0, 10)");
      }
      ds.labels.push_back(rec[0]);
      for (int k = 1; k < kRecord; ++k) pixels.push_back(rec[k] / 255.0);
    }
  }
  const int n = static_cast<int>(ds.labels.size());
  ds.images = Tensor({n, 3, 32, 32}, std::move(pixels));
  for (int i = 0; i < n; ++i) ds.source_indices.push_back(i);
  ds.source = files.empty() ? "cifar10" : files.front().parent_path().string();
  return ds;
}

DatasetSplit partition_pool(const DatasetSplit& pool, const SplitSpec& spec) {
  if (spec.calibration_fraction < 0.0 || spec.calibration_fraction > 1.0 || spec.train_fraction <= 0.0 ||
      spec.train_fraction >= 1.0) {
    throw ConfigError("split fractions must lie in (0, 1)");
  }
  Rng rng(derive_seed(spec.seed, 0x5B117ULL));
  std::vector<int> rows;
  const auto perm = permutation(pool.size(), rng);
  const auto n_train = static_cast<std::size_t>(std::lround(spec.train_fraction * pool.size()));
  const std::size_t held = perm.size() - n_train;
  const auto n_cal = static_cast<std::size_t>(std::lround(spec.calibration_fraction * static_cast<double>(held)));
  const auto begin = perm.begin();
  switch (spec.split) {
    case SplitName::train: rows.assign(begin, begin + static_cast<std::ptrdiff_t>(n_train)); break;
    case SplitName::calibration:
      rows.assign(begin + static_cast<std::ptrdiff_t>(n_train), begin + static_cast<std::ptrdiff_t>(n_train + n_cal));
      break;
    case SplitName::test: rows.assign(begin + static_cast<std::ptrdiff_t>(n_train + n_cal), perm.end()); break;
  }
  if (spec.limit > 0 && static_cast<int>(rows.size()) > spec.limit) rows.resize(static_cast<std::size_t>(spec.limit));
  DatasetSplit out = pool.subset(rows);
  out.split = spec.split;
  out.validate();
  return out;
}

DatasetSplit load_dataset(const fs::path& source, const SplitSpec& spec) {
  if (!fs::exists(source)) throw LoadError("dataset source not found: " + source.string());
  if (spec.calibration_fraction < 0.0 || spec.calibration_fraction > 1.0 || spec.train_fraction <= 0.0 ||
      spec.train_fraction >= 1.0) {
    throw ConfigError("split fractions must lie in (0, 1)");
  }

  DatasetSplit pool;
  std::vector<int> rows;
  Rng rng(derive_seed(spec.seed, 0x5B117ULL));

  if (fs::is_directory(source)) {
    if (!is_cifar10_dir(source)) throw LoadError("not a CIFAR-10 binary directory: " + source.string());
    if (spec.split == SplitName::train) {
      std::vector<fs::path> files;
      for (int b = 1; b <= 5; ++b) files.push_back(source / ("data_batch_" + std::to_string(b) + ".bin"));
      pool = read_cifar10_batches(files);
      rows = permutation(pool.size(), rng);
    } else {
      pool = read_cifar10_batches({source / "test_batch.bin"});
      const auto perm = permutation(pool.size(), rng);
      const auto n_cal = static_cast<std::size_t>(std::lround(spec.calibration_fraction * pool.size()));
      if (spec.split == SplitName::calibration) {
        rows.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_cal));
      } else {
        rows.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_cal), perm.end());
      }
    }
  } else {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(source));
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("corrupt synthetic spec " + source.string() + ": " + e.what());
    }
    return partition_pool(generate_synthetic(SyntheticSpec::from_json(j)), spec);
  }

  if (spec.limit > 0 && static_cast<int>(rows.size()) > spec.limit) rows.resize(static_cast<std::size_t>(spec.limit));
  DatasetSplit out = pool.subset(rows);
  out.split = spec.split;
  out.validate();
  return out;
}

}  // namespace lwd
