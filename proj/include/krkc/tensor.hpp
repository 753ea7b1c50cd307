#pragma once

// Dense float64 tensors with a tape-free reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record the producing op and its parents; backward() walks
// the recorded graph in reverse topological order. Tensors produced while a
// NoGradGuard is alive never record a node.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "krkc/error.hpp"

namespace krkc {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  bool stop_gradient = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // pushes this->grad into parents

  bool is_leaf() const { return parents.empty(); }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw Error("tensor: shape " + shape_string(shape) + " does not hold " +
                  std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor parameter(Shape shape, std::vector<double> data) {
    Tensor t(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }

  std::span<const double> data() const { return node_->data; }
  // Direct write access, intended for optimizers and initializers on leaves.
  std::span<double> mutable_data() { return node_->data; }

  double operator[](std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  double item() const {
    if (numel() != 1) throw Error("item: tensor of shape " + shape_string(shape()) + " is not scalar");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on && !node_->stop_gradient; }
  bool is_stop_gradient() const { return node_->stop_gradient; }
  const char* op() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
  void clear_grad() { node_->grad.clear(); }

  // Deep copy of values; the copy is a fresh leaf with the same requires_grad.
  Tensor clone() const {
    Tensor t(node_->shape, node_->data);
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  inline void backward() const;

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void require_finite(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (!std::isfinite(v)) throw Error(std::string(op) + ": non-finite input");
  }
}

inline void require_2d(const char* op, const Tensor& t) {
  if (t.dim() != 2) throw Error(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

inline Error shape_error(const char* op, const Tensor& a, const Tensor& b) {
  return Error(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
               shape_string(b.shape()));
}

// Builds the result tensor and, when recording, links it into the graph.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!grad_enabled) return out;
  bool any = false;
  for (const Tensor* in : inputs) any = any || in->requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.op = op;
  node.requires_grad = true;
  for (const Tensor* in : inputs) node.parents.push_back(in->node());
  node.backward = std::move(backward);
  return out;
}

inline void accumulate(Node& parent, std::size_t i, double g) {
  if (parent.requires_grad) parent.grad_buffer()[i] += g;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (!defined()) throw Error("backward: undefined tensor");
  if (numel() != 1) throw Error("backward: loss must be scalar, got " + shape_string(shape()));
  if (!node_->requires_grad) throw Error("backward: loss is not part of a recorded graph");

  // Iterative post-order DFS gives a topological order of everything reachable.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->is_leaf() && n->backward) n->backward(*n);
  }
  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
}

// ---------------------------------------------------------------------------
// Operations

// a: [n,k], b: [k,m] -> [n,m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d("matmul", a);
  detail::require_2d("matmul", b);
  if (a.cols() != b.rows()) throw detail::shape_error("matmul", a, b);
  detail::require_finite("matmul", a);
  detail::require_finite("matmul", b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<double> out(n * m, 0.0);
  auto A = a.data();
  auto B = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* row = out.data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      const double* brow = B.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) row[j] += av * brow[j];
    }
  }
  return detail::make_result("matmul", {n, m}, std::move(out), {&a, &b}, [n, k, m](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const double* G = self.grad.data();
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* brow = pb.data.data() + p * m;
          const double* grow = G + i * m;
          for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
          ga[i * k + p] += s;
        }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa.data[i * k + p];
          const double* grow = G + i * m;
          double* gbrow = gb.data() + p * m;
          for (std::size_t j = 0; j < m; ++j) gbrow[j] += av * grow[j];
        }
    }
  });
}

// a: [n,m], bias: [m]
inline Tensor add_bias(const Tensor& a, const Tensor& bias) {
  detail::require_2d("add_bias", a);
  if (bias.numel() != a.cols()) throw detail::shape_error("add_bias", a, bias);
  detail::require_finite("add_bias", a);
  detail::require_finite("add_bias", bias);
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += bias[j];
  return detail::make_result("add_bias", a.shape(), std::move(out), {&a, &bias}, [n, m](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& ga = pa.grad_buffer();
      for (std::size_t i = 0; i < n * m; ++i) ga[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gb[j] += self.grad[i * m + j];
    }
  });
}

namespace detail {

template <class Fwd, class Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  require_finite(op, a);
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return make_result(op, a.shape(), std::move(out), {&a}, [deriv](Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(p.data[i], self.data[i]);
  });
}

template <class Fwd, class DerivA, class DerivB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DerivA da, DerivB db) {
  if (a.shape() != b.shape()) throw shape_error(op, a, b);
  require_finite(op, a);
  require_finite(op, b);
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i], b[i]);
  return make_result(op, a.shape(), std::move(out), {&a, &b}, [da, db](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * da(pa.data[i], pb.data[i]);
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * db(pa.data[i], pb.data[i]);
    }
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  // Subgradient 0 at the kink.
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor scale(const Tensor& a, double s) {
  return detail::unary(
      "scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

// log(a + eps)
inline Tensor log(const Tensor& a, double eps = 0.0) {
  return detail::unary(
      "log", a,
      [eps](double x) {
        if (x + eps <= 0.0) throw Error("log: argument must be positive");
        return std::log(x + eps);
      },
      [eps](double x, double) { return 1.0 / (x + eps); });
}

// Square root with subgradient 0 at 0, so coincident points do not blow up.
inline Tensor sqrt(const Tensor& a) {
  return detail::unary(
      "sqrt", a,
      [](double x) {
        if (x < 0.0) throw Error("sqrt: negative argument");
        return std::sqrt(x);
      },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

inline Tensor sum(const Tensor& a) {
  detail::require_finite("sum", a);
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result("sum", {1}, {s}, {&a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw Error("mean: empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

namespace detail {

// Row-wise softmax of logits / temperature. Numerically stabilised by the row max.
inline std::vector<double> softmax_rows(const Tensor& a, double temperature) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = a.data().data() + i * m;
    double mx = x[0] / temperature;
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      out[i * m + j] = std::exp(x[j] / temperature - mx);
      z += out[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  return out;
}

inline void check_softmax_input(const char* op, const Tensor& a, double temperature) {
  require_2d(op, a);
  if (!(temperature > 0.0)) throw Error(std::string(op) + ": temperature must be positive");
  if (a.cols() == 0) throw Error(std::string(op) + ": zero classes");
  require_finite(op, a);
}

}  // namespace detail

inline Tensor softmax(const Tensor& logits, double temperature = 1.0) {
  detail::check_softmax_input("softmax", logits, temperature);
  const std::size_t n = logits.rows(), m = logits.cols();
  auto out = detail::softmax_rows(logits, temperature);
  return detail::make_result("softmax", logits.shape(), std::move(out), {&logits},
                             [n, m, temperature](detail::Node& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double* y = self.data.data() + i * m;
                                 const double* gy = self.grad.data() + i * m;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < m; ++j) dot += gy[j] * y[j];
                                 for (std::size_t j = 0; j < m; ++j)
                                   g[i * m + j] += y[j] * (gy[j] - dot) / temperature;
                               }
                             });
}

inline Tensor log_softmax(const Tensor& logits, double temperature = 1.0) {
  detail::check_softmax_input("log_softmax", logits, temperature);
  const std::size_t n = logits.rows(), m = logits.cols();
  std::vector<double> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = logits.data().data() + i * m;
    double mx = x[0] / temperature;
    for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, x[j] / temperature);
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(x[j] / temperature - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x[j] / temperature - lz;
  }
  return detail::make_result("log_softmax", logits.shape(), std::move(out), {&logits},
                             [n, m, temperature](detail::Node& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                 const double* gy = self.grad.data() + i * m;
                                 double total = 0.0;
                                 for (std::size_t j = 0; j < m; ++j) total += gy[j];
                                 for (std::size_t j = 0; j < m; ++j) {
                                   const double prob = std::exp(self.data[i * m + j]);
                                   g[i * m + j] += (gy[j] - prob * total) / temperature;
                                 }
                               }
                             });
}

// out[i] = a[i, index[i]]
inline Tensor pick(const Tensor& a, std::span<const std::size_t> index) {
  detail::require_2d("pick", a);
  if (index.size() != a.rows()) {
    throw Error("pick: " + std::to_string(index.size()) + " indices for " + shape_string(a.shape()));
  }
  const std::size_t m = a.cols();
  std::vector<std::size_t> idx(index.begin(), index.end());
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= m) throw Error("pick: index " + std::to_string(idx[i]) + " out of range for " + shape_string(a.shape()));
    out[i] = a.at(i, idx[i]);
  }
  return detail::make_result("pick", {idx.size()}, std::move(out), {&a}, [idx, m](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i) g[i * m + idx[i]] += self.grad[i];
  });
}

// out[k] = a[rows[k], cols[k]]
inline Tensor gather(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  detail::require_2d("gather", a);
  if (rows.size() != cols.size()) throw Error("gather: row/col index count mismatch");
  const std::size_t m = a.cols();
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> out(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (rows[k] >= a.rows() || cols[k] >= m) throw Error("gather: index out of range for " + shape_string(a.shape()));
    flat[k] = rows[k] * m + cols[k];
    out[k] = a[flat[k]];
  }
  return detail::make_result("gather", {flat.size()}, std::move(out), {&a}, [flat](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t k = 0; k < flat.size(); ++k) g[flat[k]] += self.grad[k];
  });
}

// a: [n,d] -> [n,n] with out[i,j] = sum_k (a[i,k] - a[j,k])^2. Diagonal is exactly zero.
inline Tensor pairwise_sq_distances(const Tensor& a) {
  detail::require_2d("pairwise_sq_distances", a);
  detail::require_finite("pairwise_sq_distances", a);
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<double> out(n * n, 0.0);
  auto x = a.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = x[i * d + k] - x[j * d + k];
        s += diff * diff;
      }
      out[i * n + j] = out[j * n + i] = s;
    }
  return detail::make_result("pairwise_sq_distances", {n, n}, std::move(out), {&a}, [n, d](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = 2.0 * self.grad[i * n + j];
        if (w == 0.0) continue;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = p.data[i * d + k] - p.data[j * d + k];
          g[i * d + k] += w * diff;
          g[j * d + k] -= w * diff;
        }
      }
  });
}

// Row-wise L2 normalisation. Zero rows stay zero.
inline Tensor l2_normalize_rows(const Tensor& a) {
  detail::require_2d("l2_normalize_rows", a);
  detail::require_finite("l2_normalize_rows", a);
  const std::size_t n = a.rows(), d = a.cols();
  std::vector<double> out(n * d);
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += a.at(i, k) * a.at(i, k);
    norms[i] = std::sqrt(s);
    for (std::size_t k = 0; k < d; ++k) out[i * d + k] = norms[i] > 0.0 ? a.at(i, k) / norms[i] : 0.0;
  }
  return detail::make_result("l2_normalize_rows", a.shape(), std::move(out), {&a},
                             [n, d, norms](detail::Node& self) {
                               auto& p = *self.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.grad_buffer();
                               for (std::size_t i = 0; i < n; ++i) {
                                 if (norms[i] == 0.0) continue;
                                 const double* y = self.data.data() + i * d;
                                 const double* gy = self.grad.data() + i * d;
                                 double dot = 0.0;
                                 for (std::size_t k = 0; k < d; ++k) dot += gy[k] * y[k];
                                 for (std::size_t k = 0; k < d; ++k) g[i * d + k] += (gy[k] - y[k] * dot) / norms[i];
                               }
                             });
}

// [n,p] ++ [n,q] -> [n,p+q]
inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  detail::require_2d("concat_cols", a);
  detail::require_2d("concat_cols", b);
  if (a.rows() != b.rows()) throw detail::shape_error("concat_cols", a, b);
  const std::size_t n = a.rows(), p = a.cols(), q = b.cols();
  std::vector<double> out(n * (p + q));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * p, p, out.begin() + i * (p + q));
    std::copy_n(b.data().begin() + i * q, q, out.begin() + i * (p + q) + p);
  }
  return detail::make_result("concat_cols", {n, p + q}, std::move(out), {&a, &b}, [n, p, q](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (std::size_t i = 0; i < n; ++i) {
      if (pa.requires_grad)
        for (std::size_t k = 0; k < p; ++k) pa.grad_buffer()[i * p + k] += self.grad[i * (p + q) + k];
      if (pb.requires_grad)
        for (std::size_t k = 0; k < q; ++k) pb.grad_buffer()[i * q + k] += self.grad[i * (p + q) + p + k];
    }
  });
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  detail::require_2d("slice_cols", a);
  if (begin >= end || end > a.cols()) {
    throw Error("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for " +
                shape_string(a.shape()));
  }
  const std::size_t n = a.rows(), m = a.cols(), w = end - begin;
  std::vector<double> out(n * w);
  for (std::size_t i = 0; i < n; ++i) std::copy_n(a.data().begin() + i * m + begin, w, out.begin() + i * w);
  return detail::make_result("slice_cols", {n, w}, std::move(out), {&a}, [n, m, w, begin](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < w; ++k) g[i * m + begin + k] += self.grad[i * w + k];
  });
}

// Same values, treated as a constant: no gradient flows through it.
inline Tensor stop_gradient(const Tensor& a) {
  Tensor out(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  out.node()->stop_gradient = true;
  out.node()->op = "stop_gradient";
  return out;
}

}  // namespace krkc
