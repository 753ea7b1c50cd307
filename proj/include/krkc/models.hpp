#pragma once

// Feature extractor + expanding classifier, and the working/memory model pair.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "krkc/error.hpp"
#include "krkc/rng.hpp"
#include "krkc/tensor.hpp"

namespace krkc {

struct Architecture {
  std::size_t input_dim = 32;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t embedding_dim = 32;

  bool operator==(const Architecture&) const = default;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

// Affine + ReLU stack; the last layer is affine only and yields the embedding.
class Extractor {
 public:
  Extractor() = default;

  Extractor(const Architecture& arch, Rng& rng) : arch_(arch) {
    std::vector<std::size_t> widths{arch.input_dim};
    widths.insert(widths.end(), arch.hidden.begin(), arch.hidden.end());
    widths.push_back(arch.embedding_dim);
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::size_t in = widths[l], out = widths[l + 1];
      if (in == 0 || out == 0) throw Error("extractor: zero-width layer");
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      std::uniform_real_distribution<double> dist(-bound, bound);
      std::vector<double> w(in * out), b(out);
      for (double& v : w) v = dist(rng);
      for (double& v : b) v = dist(rng);
      layers_.push_back({Tensor::parameter({in, out}, std::move(w)), Tensor::parameter({out}, std::move(b))});
    }
  }

  Tensor forward(const Tensor& x) const {
    if (x.dim() != 2 || x.cols() != arch_.input_dim) {
      throw Error("extractor: expected input [N," + std::to_string(arch_.input_dim) + "], got " +
                  shape_string(x.shape()));
    }
    Tensor h = x;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      h = add_bias(matmul(h, layers_[l].weight), layers_[l].bias);
      if (l + 1 < layers_.size()) h = relu(h);
    }
    return h;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (const auto& layer : layers_) {
      out.push_back(layer.weight);
      out.push_back(layer.bias);
    }
    return out;
  }

  const Architecture& architecture() const { return arch_; }
  const std::vector<Linear>& layers() const { return layers_; }

  Extractor clone() const {
    Extractor copy;
    copy.arch_ = arch_;
    for (const auto& layer : layers_) copy.layers_.push_back({layer.weight.clone(), layer.bias.clone()});
    return copy;
  }

  // Replaces all parameters; shapes must match the architecture.
  void set_layers(std::vector<Linear> layers) { layers_ = std::move(layers); }

 private:
  Architecture arch_;
  std::vector<Linear> layers_;
};

struct ClassRange {
  int task = 0;
  std::size_t begin = 0;
  std::size_t end = 0;

  bool operator==(const ClassRange&) const = default;
};

// Linear head over every class seen so far. Each task appends a contiguous
// block of columns; existing columns are never touched.
class Classifier {
 public:
  Classifier() = default;
  explicit Classifier(std::size_t embedding_dim)
      : weight_(Tensor::parameter({embedding_dim, 0}, {})), bias_(Tensor::parameter({0}, {})) {}

  std::size_t embedding_dim() const { return weight_.rows(); }
  std::size_t num_classes() const { return weight_.cols(); }
  const std::vector<ClassRange>& ranges() const { return ranges_; }

  Tensor forward(const Tensor& embeddings) const {
    if (num_classes() == 0) throw Error("classifier: no classes registered");
    return add_bias(matmul(embeddings, weight_), bias_);
  }

  // `columns` is row-major [embedding_dim, n_new]; new biases start at zero.
  void append_classes(int task, std::size_t n_new, std::span<const double> columns) {
    if (n_new == 0) throw Error("classifier: expansion by zero classes");
    const std::size_t d = embedding_dim(), c = num_classes();
    if (columns.size() != d * n_new) throw Error("classifier: column block has wrong size");
    std::vector<double> w(d * (c + n_new));
    for (std::size_t r = 0; r < d; ++r) {
      std::copy_n(weight_.data().begin() + r * c, c, w.begin() + r * (c + n_new));
      std::copy_n(columns.begin() + r * n_new, n_new, w.begin() + r * (c + n_new) + c);
    }
    std::vector<double> b(bias_.data().begin(), bias_.data().end());
    b.resize(c + n_new, 0.0);
    weight_ = Tensor::parameter({d, c + n_new}, std::move(w));
    bias_ = Tensor::parameter({c + n_new}, std::move(b));
    ranges_.push_back({task, c, c + n_new});
  }

  std::vector<Tensor> parameters() const { return {weight_, bias_}; }

  Classifier clone() const {
    Classifier copy;
    copy.weight_ = weight_.clone();
    copy.bias_ = bias_.clone();
    copy.ranges_ = ranges_;
    return copy;
  }

  void set_state(Tensor weight, Tensor bias, std::vector<ClassRange> ranges) {
    weight_ = std::move(weight);
    bias_ = std::move(bias);
    ranges_ = std::move(ranges);
  }

 private:
  Tensor weight_;
  Tensor bias_;
  std::vector<ClassRange> ranges_;
};

struct ModelOutput {
  Tensor embeddings;  // [N, D_emb]
  Tensor logits;      // [N, C_total]
};

struct Model {
  Extractor extractor;
  Classifier classifier;

  Model() = default;
  Model(const Architecture& arch, Rng& rng) : extractor(arch, rng), classifier(arch.embedding_dim) {}

  ModelOutput forward(const Tensor& x) const {
    Tensor emb = extractor.forward(x);
    return {emb, classifier.forward(emb)};
  }

  std::vector<Tensor> parameters() const {
    auto out = extractor.parameters();
    for (auto& p : classifier.parameters()) out.push_back(p);
    return out;
  }
};

inline Model clone_model(const Model& src) {
  Model copy;
  copy.extractor = src.extractor.clone();
  copy.classifier = src.classifier.clone();
  return copy;
}

// Working model Θ^w and memory model Θ^m.
struct ModelPair {
  Model working;
  Model memory;
  int task = 0;
};

inline ModelPair make_model_pair(const Architecture& arch, std::uint64_t seed) {
  Rng rng(seed);
  ModelPair pair;
  pair.working = Model(arch, rng);
  pair.memory = clone_model(pair.working);
  return pair;
}

// Appends `n_new` classes for `task` to both heads with identical columns drawn
// uniformly from [-1/sqrt(D_emb), 1/sqrt(D_emb)].
inline void expand_classifier(ModelPair& pair, int task, std::size_t n_new, std::uint64_t seed) {
  if (n_new == 0) throw Error("expand_classifier: n_new_classes must be >= 1");
  if (pair.working.classifier.num_classes() != pair.memory.classifier.num_classes()) {
    throw Error("expand_classifier: working and memory heads disagree on class count");
  }
  const std::size_t d = pair.working.classifier.embedding_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Rng rng(seed);
  std::vector<double> columns(d * n_new);
  for (double& v : columns) v = dist(rng);
  pair.working.classifier.append_classes(task, n_new, columns);
  pair.memory.classifier.append_classes(task, n_new, columns);
}

// Weights (a, b) of Θ^w_{t+1} = a Θ^w_t + b Θ^m_t.
struct ConsolidationWeights {
  double working;
  double memory;
};

inline ConsolidationWeights consolidation_weights(int t) {
  if (t < 1) throw Error("consolidate_model_space: t must be >= 1");
  const double denom = static_cast<double>(t) + 1.0;
  return {1.0 / denom, static_cast<double>(t) / denom};
}

// Model-space consolidation: working <- working/(t+1) + memory*t/(t+1), then
// memory <- copy(working). Evaluated as m + (w - m)/(t+1), which is the same
// convex combination and leaves w == m fixed bit for bit.
inline void consolidate_model_space(ModelPair& pair, int t) {
  const auto weights = consolidation_weights(t);
  auto w = pair.working.parameters();
  auto m = pair.memory.parameters();
  if (w.size() != m.size()) throw Error("consolidate_model_space: parameter count mismatch");
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i].shape() != m[i].shape()) {
      throw Error("consolidate_model_space: shape mismatch " + shape_string(w[i].shape()) + " vs " +
                  shape_string(m[i].shape()));
    }
  }
  for (std::size_t i = 0; i < w.size(); ++i) {
    auto wd = w[i].mutable_data();
    auto md = m[i].data();
    for (std::size_t k = 0; k < wd.size(); ++k) wd[k] = md[k] + weights.working * (wd[k] - md[k]);
  }
  pair.memory = clone_model(pair.working);
}

// ---------------------------------------------------------------------------
// Checkpoints: plain text, one header block then every parameter row-major.
//
//   krkc-checkpoint 1
//   architecture <D_in> <hidden...> <D_emb>
//   task <t>
//   classes <C_total>
//   ranges <n> <task>:<begin>:<end> ...
//   param <name> <rows> <cols>
//   <values, %.17g, one matrix row per line>

namespace detail {

inline void write_values(std::ostream& os, const Tensor& t, std::size_t rows, std::size_t cols) {
  char buf[32];
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", t[r * cols + c]);
      if (c) os << ' ';
      os << buf;
    }
    os << '\n';
  }
}

inline Tensor read_param(std::istream& is, const std::string& expected, std::size_t rows, std::size_t cols,
                         bool vector_shape) {
  std::string tag, name;
  std::size_t r = 0, c = 0;
  if (!(is >> tag >> name >> r >> c) || tag != "param" || name != expected || r != rows || c != cols) {
    throw Error("checkpoint: expected param " + expected);
  }
  std::vector<double> values(rows * cols);
  for (double& v : values) {
    std::string token;
    if (!(is >> token)) throw Error("checkpoint: truncated values for " + expected);
    v = std::stod(token);
  }
  if (vector_shape) return Tensor::parameter({cols}, std::move(values));
  return Tensor::parameter({rows, cols}, std::move(values));
}

}  // namespace detail

inline void save_checkpoint(const Model& model, int task, std::ostream& os) {
  const auto& arch = model.extractor.architecture();
  os << "krkc-checkpoint 1\narchitecture " << arch.input_dim;
  for (auto h : arch.hidden) os << ' ' << h;
  os << ' ' << arch.embedding_dim << "\ntask " << task << "\nclasses " << model.classifier.num_classes()
     << "\nranges " << model.classifier.ranges().size();
  for (const auto& r : model.classifier.ranges()) os << ' ' << r.task << ':' << r.begin << ':' << r.end;
  os << '\n';
  const auto& layers = model.extractor.layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l].weight;
    os << "param extractor." << l << ".weight " << w.rows() << ' ' << w.cols() << '\n';
    detail::write_values(os, w, w.rows(), w.cols());
    os << "param extractor." << l << ".bias 1 " << layers[l].bias.numel() << '\n';
    detail::write_values(os, layers[l].bias, 1, layers[l].bias.numel());
  }
  auto head = model.classifier.parameters();
  os << "param classifier.weight " << head[0].rows() << ' ' << head[0].cols() << '\n';
  detail::write_values(os, head[0], head[0].rows(), head[0].cols());
  os << "param classifier.bias 1 " << head[1].numel() << '\n';
  detail::write_values(os, head[1], 1, head[1].numel());
}

inline std::string checkpoint_string(const Model& model, int task) {
  std::ostringstream os;
  save_checkpoint(model, task, os);
  return os.str();
}

struct LoadedCheckpoint {
  Model model;
  int task = 0;
};

inline LoadedCheckpoint load_checkpoint(std::istream& is) {
  std::string line, tag;
  if (!std::getline(is, line) || line != "krkc-checkpoint 1") throw Error("checkpoint: bad magic line");
  if (!std::getline(is, line)) throw Error("checkpoint: missing architecture");
  std::istringstream arch_line(line);
  arch_line >> tag;
  if (tag != "architecture") throw Error("checkpoint: missing architecture");
  std::vector<std::size_t> widths;
  for (std::size_t w; arch_line >> w;) widths.push_back(w);
  if (widths.size() < 2) throw Error("checkpoint: architecture needs at least two widths");
  Architecture arch;
  arch.input_dim = widths.front();
  arch.embedding_dim = widths.back();
  arch.hidden.assign(widths.begin() + 1, widths.end() - 1);

  LoadedCheckpoint out;
  std::size_t classes = 0, n_ranges = 0;
  if (!(is >> tag >> out.task) || tag != "task") throw Error("checkpoint: missing task");
  if (!(is >> tag >> classes) || tag != "classes") throw Error("checkpoint: missing classes");
  if (!(is >> tag >> n_ranges) || tag != "ranges") throw Error("checkpoint: missing ranges");
  std::vector<ClassRange> ranges(n_ranges);
  for (auto& r : ranges) {
    std::string token;
    is >> token;
    if (std::sscanf(token.c_str(), "%d:%zu:%zu", &r.task, &r.begin, &r.end) != 3) {
      throw Error("checkpoint: malformed range '" + token + "'");
    }
  }

  std::vector<Linear> layers;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::string prefix = "extractor." + std::to_string(l);
    Tensor w = detail::read_param(is, prefix + ".weight", widths[l], widths[l + 1], false);
    Tensor b = detail::read_param(is, prefix + ".bias", 1, widths[l + 1], true);
    layers.push_back({w, b});
  }
  Rng unused(0);
  out.model = Model(arch, unused);
  out.model.extractor.set_layers(std::move(layers));
  Tensor hw = detail::read_param(is, "classifier.weight", arch.embedding_dim, classes, false);
  Tensor hb = detail::read_param(is, "classifier.bias", 1, classes, true);
  out.model.classifier.set_state(hw, hb, std::move(ranges));
  return out;
}

}  // namespace krkc
