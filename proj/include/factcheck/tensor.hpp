#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

// Dense tensors of 64-bit reals with reverse-mode automatic differentiation.
// Graphs are taped per example: every op allocates a fresh node holding its
// value, its input edges and a backward closure. backward() on a scalar root
// walks the tape in reverse topological order and accumulates gradients into
// every reachable node that requires them. Tensors are immutable once they
// participate in a graph; only leaf buffers may be rewritten between graphs.

namespace factcheck::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

[[noreturn]] void fail_shape(const std::string& op, const Shape& a,
                             const Shape& b);
[[noreturn]] void fail(const std::string& msg);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily by backward()
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor constant(Shape shape, double fill = 0.0);
  static Tensor scalar(double v);
  static Tensor vec(std::vector<double> data);               // rank-1
  static Tensor matrix(int rows, int cols, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rows() const;
  int cols() const;
  std::int64_t size() const { return node_->size(); }

  std::span<const double> value() const {
    return {node_->value.data(), node_->value.size()};
  }
  // Leaf-only write access (optimizer updates, finite-difference probes).
  std::span<double> leaf_value();

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const {
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

  double item() const;
  double at(int i) const;
  double at(int r, int c) const;

  // Reverse-mode sweep from a scalar root; gradients accumulate.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn);

// Elementwise; shapes must match exactly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// m: r x c, v: rank-1 of length c, broadcast-added to every row.
Tensor add_rowvec(const Tensor& m, const Tensor& v);

Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);

Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);

// Stable softmax along `axis` (rank-1: axis 0; rank-2: 0 = down columns,
// 1 = along rows). The masked variant renormalizes over kept entries only;
// masked-out entries get exactly zero weight and zero gradient.
Tensor softmax(const Tensor& x, int axis);
Tensor softmax_masked(const Tensor& x, int axis,
                      const std::vector<unsigned char>& keep);

Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor concat(const std::vector<Tensor>& parts, int axis);

Tensor slice_rows(const Tensor& m, int r0, int nrows);
Tensor slice_cols(const Tensor& m, int c0, int ncols);
inline Tensor take_row(const Tensor& m, int r) { return slice_rows(m, r, 1); }

Tensor reshape(const Tensor& x, Shape shape);
inline Tensor as_row(const Tensor& v) {
  return reshape(v, {1, static_cast<int>(v.size())});
}
inline Tensor as_col(const Tensor& v) {
  return reshape(v, {static_cast<int>(v.size()), 1});
}
inline Tensor flatten(const Tensor& x) {
  return reshape(x, {static_cast<int>(x.size())});
}

// Embedding lookup: rows of `table` at `ids`; gradient scatter-adds.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Row i of m scaled by alpha[i]; alpha rank-1 of length rows(m).
Tensor row_scale(const Tensor& m, const Tensor& alpha);

Tensor sum_all(const Tensor& x);

// Rank-1 vector of row L2 norms. Zero rows get zero gradient.
Tensor l2_norm_rows(const Tensor& m);

// Per-row normalization over the last axis: gain * (x - mu) / sigma + bias.
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

// Capsule squash applied to each row s: s * |s| / (1 + |s|^2); 0 -> 0.
Tensor squash_rows(const Tensor& m);

// Mean softmax cross entropy over rows of logits (N x C). `targets` holds a
// class index per row; rows with row_mask 0 are excluded from the mean.
// Empty mask means all rows count.
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<unsigned char>& row_mask = {});

}  // namespace factcheck::ad
