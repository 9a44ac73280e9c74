#include "lwd/classifier.hpp"

#include <algorithm>
#include <cmath>

#include "lwd/errors.hpp"
#include "lwd/math.hpp"
#include "lwd/optim.hpp"

namespace lwd {

namespace {

constexpr int kInferenceChunk = 128;

Tensor he_normal(Shape shape, int fan_in, double gain, Rng& rng) {
  Tensor t(std::move(shape));
  const double sd = gain * std::sqrt(2.0 / fan_in);
  for (auto& v : t.span()) v = sd * standard_normal(rng);
  return t;
}

bool pools_after(const ArchitectureSpec& arch, int block) {
  return std::find(arch.pool_after.begin(), arch.pool_after.end(), block) != arch.pool_after.end();
}

std::string block_key(int i, const char* what) { return "b" + std::to_string(i) + "." + what; }

}  // namespace

nlohmann::json ArchitectureSpec::to_json() const {
  return {{"id", id}, {"widths", widths}, {"pool_after", pool_after}};
}

ArchitectureSpec ArchitectureSpec::from_json(const nlohmann::json& j) {
  ArchitectureSpec a;
  a.id = j.value("id", a.id);
  a.widths = j.value("widths", a.widths);
  a.pool_after = j.value("pool_after", a.pool_after);
  return a;
}

std::vector<std::string> registered_architectures() { return {"plain_cnn", "resnet_cnn"}; }

nlohmann::json ClassifierTrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},
          {"weight_decay", weight_decay}, {"seed", seed}, {"augment", augment}};
}

ClassifierTrainConfig ClassifierTrainConfig::from_json(const nlohmann::json& j) {
  ClassifierTrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.augment = j.value("augment", c.augment);
  return c;
}

Classifier Classifier::create(const ArchitectureSpec& arch, const Shape& input_shape, int num_classes,
                              std::uint64_t seed) {
  const auto known = registered_architectures();
  if (std::find(known.begin(), known.end(), arch.id) == known.end()) {
    throw ConfigError("unknown architecture '" + arch.id + "'");
  }
  if (arch.widths.size() < 3) throw ConfigError("architecture needs at least 3 blocks (L >= 3)");
  if (input_shape.size() != 3) throw ConfigError("input shape must be (C, H, W)");
  if (num_classes < 2) throw ConfigError("need at least two classes");
  {
    int h = input_shape[1], w = input_shape[2];
    for (int p : arch.pool_after) {
      if (p < 0 || p >= static_cast<int>(arch.widths.size())) throw ConfigError("pool_after index out of range");
      if (h % 2 || w % 2) throw ConfigError("too many pooling stages for input resolution");
      h /= 2;
      w /= 2;
    }
  }

  Classifier c;
  c.arch_ = arch;
  c.input_shape_ = input_shape;
  c.num_classes_ = num_classes;
  c.layer_dims_ = arch.widths;

  Rng rng(derive_seed(seed, 0xC1A551F1ULL));
  auto add = [&](const std::string& name, Tensor t) { c.params_[name] = ad::leaf(std::move(t), false); };
  int cin = input_shape[0];
  for (int i = 0; i < static_cast<int>(arch.widths.size()); ++i) {
    const int cout = arch.widths[static_cast<std::size_t>(i)];
    if (arch.id == "plain_cnn") {
      add(block_key(i, "conv.w"), he_normal({cout, cin, 3, 3}, cin * 9, 1.0, rng));
      add(block_key(i, "conv.b"), Tensor({cout}));
    } else {
      add(block_key(i, "conv1.w"), he_normal({cout, cin, 3, 3}, cin * 9, 1.0, rng));
      add(block_key(i, "conv1.b"), Tensor({cout}));
      add(block_key(i, "conv2.w"), he_normal({cout, cout, 3, 3}, cout * 9, 0.5, rng));
      add(block_key(i, "conv2.b"), Tensor({cout}));
      if (cin != cout) {
        add(block_key(i, "proj.w"), he_normal({cout, cin, 1, 1}, cin, 0.7, rng));
        add(block_key(i, "proj.b"), Tensor({cout}));
      }
    }
    cin = cout;
  }
  add("head.w", he_normal({num_classes, cin}, cin, 0.7, rng));
  add("head.b", Tensor({num_classes}));
  c.meta_["architecture"] = arch.to_json();
  c.meta_["init_seed"] = seed;
  return c;
}

int Classifier::input_dim() const { return static_cast<int>(shape_numel(input_shape_)); }

void Classifier::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != input_shape_[0] || x.dim(2) != input_shape_[1] || x.dim(3) != input_shape_[2]) {
    throw ContractError("input batch " + shape_str(x.shape()) + " does not match model input " +
                        shape_str(input_shape_));
  }
}

Classifier::Forward Classifier::forward(const ad::Var& x) const {
  check_input(x.value());
  Forward out;
  ad::Var h = x;
  int cin = input_shape_[0];
  const auto& p = params_;
  for (int i = 0; i < num_layers(); ++i) {
    const int cout = arch_.widths[static_cast<std::size_t>(i)];
    if (arch_.id == "plain_cnn") {
      h = ad::relu(ad::conv2d(h, p.at(block_key(i, "conv.w")), p.at(block_key(i, "conv.b"))));
    } else {
      ad::Var r = ad::relu(ad::conv2d(h, p.at(block_key(i, "conv1.w")), p.at(block_key(i, "conv1.b"))));
      r = ad::conv2d(r, p.at(block_key(i, "conv2.w")), p.at(block_key(i, "conv2.b")));
      ad::Var skip = cin == cout ? h : ad::conv2d(h, p.at(block_key(i, "proj.w")), p.at(block_key(i, "proj.b")));
      h = ad::relu(ad::add(r, skip));
    }
    if (pools_after(arch_, i)) h = ad::avg_pool2(h);
    out.taps.push_back(ad::global_avg_pool(h));
    cin = cout;
  }
  out.logits = ad::linear(out.taps.back(), p.at("head.w"), p.at("head.b"));
  return out;
}

Tensor Classifier::logits(const Tensor& x) const {
  check_input(x);
  const int n = x.dim(0);
  Tensor out({n, num_classes_});
  for (int b = 0; b < n; b += kInferenceChunk) {
    const int e = std::min(n, b + kInferenceChunk);
    const auto f = forward(ad::constant(x.slice_rows(b, e)));
    std::copy(f.logits.value().vec().begin(), f.logits.value().vec().end(),
              out.ptr() + static_cast<std::ptrdiff_t>(b) * num_classes_);
  }
  return out;
}

std::vector<int> Classifier::predict(const Tensor& x) const {
  const Tensor z = logits(x);
  std::vector<int> pred;
  for (int i = 0; i < z.dim(0); ++i) pred.push_back(argmax(z.row(i)));
  return pred;
}

std::vector<LayerTrace> Classifier::forward_trace(const Tensor& x) const {
  check_input(x);
  const int n = x.dim(0);
  std::vector<LayerTrace> traces;
  traces.reserve(static_cast<std::size_t>(n));
  for (int b = 0; b < n; b += kInferenceChunk) {
    const int e = std::min(n, b + kInferenceChunk);
    const auto f = forward(ad::constant(x.slice_rows(b, e)));
    for (int i = 0; i < e - b; ++i) {
      LayerTrace t;
      for (const auto& tap : f.taps) {
        auto r = tap.value().row(i);
        t.z.emplace_back(r.begin(), r.end());
      }
      auto l = f.logits.value().row(i);
      t.logits.assign(l.begin(), l.end());
      t.probs = softmax(t.logits);
      t.predicted = argmax(t.probs);
      traces.push_back(std::move(t));
    }
  }
  return traces;
}

std::vector<ad::Var> Classifier::parameters() const {
  std::vector<ad::Var> out;
  for (const auto& [name, v] : params_) out.push_back(v);
  return out;
}

std::size_t Classifier::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params_) n += v.value().size();
  return n;
}

void Classifier::set_trainable(bool on) {
  for (auto& [name, v] : params_) {
    v.set_requires_grad(on);
    v.zero_grad();
  }
}

std::string Classifier::fingerprint() const {
  std::map<std::string, Tensor> t;
  for (const auto& [name, v] : params_) t[name] = v.value();
  t["__arch__"] = Tensor({static_cast<int>(arch_.widths.size())},
                         std::vector<double>(arch_.widths.begin(), arch_.widths.end()));
  return tensor_fingerprint(t) + (arch_.id == "plain_cnn" ? "" : "-r");
}

Archive Classifier::to_archive() const {
  Archive a("classifier");
  a.meta() = meta_;
  a.meta()["architecture"] = arch_.to_json();
  a.meta()["input_shape"] = input_shape_;
  a.meta()["num_classes"] = num_classes_;
  a.meta()["layer_dims"] = layer_dims_;
  a.meta()["fingerprint"] = fingerprint();
  for (const auto& [name, v] : params_) a.put(name, v.value());
  return a;
}

Classifier Classifier::from_archive(const Archive& a) {
  if (a.kind() != "classifier") throw LoadError("archive is not a classifier checkpoint");
  const auto& m = a.meta();
  Classifier c = create(ArchitectureSpec::from_json(m.at("architecture")), m.at("input_shape").get<Shape>(),
                        m.at("num_classes").get<int>(), 0);
  for (auto& [name, v] : c.params_) {
    const Tensor& t = a.get(name);
    if (t.shape() != v.shape()) throw LoadError("checkpoint tensor '" + name + "' has wrong shape");
    v.mutable_value() = t;
  }
  c.meta_ = m;
  if (m.contains("fingerprint") && m.at("fingerprint").get<std::string>() != c.fingerprint()) {
    throw LoadError("checkpoint fingerprint mismatch (corrupt parameters)");
  }
  return c;
}

Classifier Classifier::load(const std::filesystem::path& path) {
  return from_archive(Archive::load(path, "classifier"));
}

double accuracy(const Classifier& model, const DatasetSplit& data) {
  if (data.size() == 0) return 0.0;
  const auto pred = model.predict(data.images);
  int correct = 0;
  for (int i = 0; i < data.size(); ++i) correct += pred[static_cast<std::size_t>(i)] == data.labels[static_cast<std::size_t>(i)];
  return static_cast<double>(correct) / data.size();
}

namespace {

// Random shift by up to 2 pixels (zero fill) plus horizontal flip.
void augment_batch(Tensor& x, Rng& rng) {
  const int n = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<double> buf(static_cast<std::size_t>(ch) * h * w);
  for (int i = 0; i < n; ++i) {
    const int dy = static_cast<int>(rng() % 5) - 2;
    const int dx = static_cast<int>(rng() % 5) - 2;
    const bool flip = rng() & 1ULL;
    auto img = x.row(i);
    for (int c = 0; c < ch; ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const int sy = y + dy;
          int sx = xx + dx;
          if (flip) sx = w - 1 - sx;
          const std::size_t dst = (static_cast<std::size_t>(c) * h + y) * w + xx;
          buf[dst] = (sy >= 0 && sy < h && sx >= 0 && sx < w) ? img[(static_cast<std::size_t>(c) * h + sy) * w + sx] : 0.0;
        }
    std::copy(buf.begin(), buf.end(), img.begin());
  }
}

}  // namespace

Classifier train_classifier(const DatasetSplit& train, const ArchitectureSpec& arch,
                            const ClassifierTrainConfig& config, const DatasetSplit* eval) {
  train.validate();
  if (config.epochs < 1 || config.batch_size < 1) throw ConfigError("epochs and batch_size must be positive");
  Classifier model = Classifier::create(arch, train.image_shape(), train.num_classes, config.seed);
  model.set_trainable(true);
  AdamW opt(model.parameters(), {.lr = config.lr, .weight_decay = config.weight_decay});

  Rng rng(derive_seed(config.seed, 0x7EA1AULL));
  nlohmann::json losses = nlohmann::json::array();
  const int n = train.size();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = permutation(n, rng);
    double total = 0.0;
    for (int b = 0; b < n; b += config.batch_size) {
      const int e = std::min(n, b + config.batch_size);
      std::vector<int> rows(order.begin() + b, order.begin() + e);
      Tensor xb = train.images.gather_rows(rows);
      if (config.augment) augment_batch(xb, rng);
      std::vector<int> yb;
      for (int r : rows) yb.push_back(train.labels[static_cast<std::size_t>(r)]);

      opt.zero_grad();
      const auto f = model.forward(ad::constant(std::move(xb)));
      const ad::Var loss = ad::mean(ad::cross_entropy_rows(f.logits, yb));
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) {
        throw TrainingError("classifier loss became non-finite at epoch " + std::to_string(epoch));
      }
      ad::backward(loss);
      opt.step();
      total += lv * (e - b);
    }
    losses.push_back(total / n);
  }
  model.set_trainable(false);

  const double train_acc = accuracy(model, train);
  auto& meta = model.metadata();
  meta["training_config"] = config.to_json();
  meta["epoch_losses"] = losses;
  meta["train_accuracy"] = train_acc;
  meta["seed"] = config.seed;
  if (eval != nullptr) meta["clean_accuracy"] = accuracy(model, *eval);

  const double floor = 1.0 / train.num_classes + 0.05;
  if (train_acc < floor) {
    throw TrainingError("classifier did not converge: train accuracy " + std::to_string(train_acc) +
                        " < " + std::to_string(floor) + "; epoch losses " + losses.dump());
  }
  return model;
}

}  // namespace lwd
