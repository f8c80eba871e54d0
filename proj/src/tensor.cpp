#include "factcheck/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_set>

namespace factcheck::ad {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

void fail_shape(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) +
                              " and " + shape_str(b));
}

void fail(const std::string& msg) { throw std::invalid_argument(msg); }

namespace {

std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d <= 0) fail("tensor extents must be positive, got " + shape_str(s));
    n *= d;
  }
  return n;
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    fail(std::string(op) + ": expected a rank-2 tensor, got " +
         shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) fail_shape(op, a.shape(), b.shape());
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  for (const auto& t : inputs) {
    if (t.requires_grad()) return true;
  }
  return false;
}

// C (m x n) += op(A) * op(B) on raw row-major buffers.
void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n,
              bool trans_a, bool trans_b) {
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = trans_b ? nullptr : b + p * n;
      double* crow = c + i * n;
      if (trans_b) {
        for (int j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace

Tensor Tensor::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    fail("leaf: data length " + std::to_string(data.size()) +
         " does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::constant(Shape shape, double fill) {
  std::vector<double> data(static_cast<std::size_t>(shape_size(shape)), fill);
  return leaf(std::move(shape), std::move(data), false);
}

Tensor Tensor::scalar(double v) { return leaf({1}, {v}, false); }

Tensor Tensor::vec(std::vector<double> data) {
  const int n = static_cast<int>(data.size());
  return leaf({n}, std::move(data), false);
}

Tensor Tensor::matrix(int rows, int cols, std::vector<double> data) {
  return leaf({rows, cols}, std::move(data), false);
}

int Tensor::rows() const {
  require_rank2(*this, "rows");
  return node_->shape[0];
}

int Tensor::cols() const {
  require_rank2(*this, "cols");
  return node_->shape[1];
}

std::span<double> Tensor::leaf_value() {
  if (node_->backward_fn) fail("leaf_value: tensor is not a leaf");
  return {node_->value.data(), node_->value.size()};
}

double Tensor::item() const {
  if (size() != 1) fail("item: tensor is not scalar, shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(int i) const {
  return node_->value[static_cast<std::size_t>(i)];
}

double Tensor::at(int r, int c) const {
  require_rank2(*this, "at");
  return node_->value[static_cast<std::size_t>(r) *
                          static_cast<std::size_t>(node_->shape[1]) +
                      static_cast<std::size_t>(c)];
}

void Tensor::backward() const {
  if (size() != 1) {
    fail("backward: root must be scalar, shape " + shape_str(shape()));
  }
  // Iterative post-order DFS; graphs can be thousands of nodes deep.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next].get();
      ++next;
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  if (!node_->requires_grad) return;
  // Leaf gradients accumulate across sweeps; intermediate gradients are
  // per-sweep scratch and start from zero.
  for (Node* n : order) {
    if (n->inputs.empty()) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->value.size(), 0.0);
    }
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

Tensor make_op(Shape shape, std::vector<double> value,
               std::vector<Tensor> inputs,
               std::function<void(Node&)> backward_fn) {
  if (shape_size(shape) != static_cast<std::int64_t>(value.size())) {
    fail("make_op: value length does not match shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = any_requires_grad(inputs);
  n->inputs.reserve(inputs.size());
  for (auto& t : inputs) n->inputs.push_back(t.node());
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  return Tensor(std::move(n));
}

namespace {

// Accumulates into an input's gradient, honoring its requires_grad flag.
void acc_grad(Node& out, std::size_t input_idx,
              const std::function<void(std::vector<double>&)>& add) {
  Node& in = *out.inputs[input_idx];
  if (!in.requires_grad) return;
  in.ensure_grad();
  add(in.grad);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> v(a.value().begin(), a.value().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += b.value()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
    acc_grad(out, 1, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> v(a.value().begin(), a.value().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] -= b.value()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
    acc_grad(out, 1, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= out.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> v(a.value().begin(), a.value().end());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b.value()[i];
  return make_op(a.shape(), std::move(v), {a, b}, [](Node& out) {
    const auto& av = out.inputs[0]->value;
    const auto& bv = out.inputs[1]->value;
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * bv[i];
    });
    acc_grad(out, 1, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i] * av[i];
    });
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  require_rank2(m, "add_rowvec");
  if (v.rank() != 1 || v.dim(0) != m.cols()) {
    fail_shape("add_rowvec", m.shape(), v.shape());
  }
  const int r = m.rows(), c = m.cols();
  std::vector<double> out(m.value().begin(), m.value().end());
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      out[static_cast<std::size_t>(i) * c + j] += v.value()[static_cast<std::size_t>(j)];
    }
  }
  return make_op(m.shape(), std::move(out), {m, v}, [r, c](Node& n) {
    acc_grad(n, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
    acc_grad(n, 1, [&](std::vector<double>& g) {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          g[static_cast<std::size_t>(j)] +=
              n.grad[static_cast<std::size_t>(i) * c + j];
        }
      }
    });
  });
}

Tensor scale(const Tensor& x, double c) {
  std::vector<double> v(x.value().begin(), x.value().end());
  for (double& e : v) e *= c;
  return make_op(x.shape(), std::move(v), {x}, [c](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * out.grad[i];
    });
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> v(x.value().begin(), x.value().end());
  for (double& e : v) e += c;
  return make_op(x.shape(), std::move(v), {x}, [](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) fail_shape("matmul", a.shape(), b.shape());
  const int m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> v(static_cast<std::size_t>(m) * n, 0.0);
  gemm_acc(a.value().data(), b.value().data(), v.data(), m, k, n, false, false);
  return make_op({m, n}, std::move(v), {a, b}, [m, k, n](Node& out) {
    const auto& av = out.inputs[0]->value;
    const auto& bv = out.inputs[1]->value;
    // dA += dC * B^T ; dB += A^T * dC
    acc_grad(out, 0, [&](std::vector<double>& g) {
      gemm_acc(out.grad.data(), bv.data(), g.data(), m, n, k, false, true);
    });
    acc_grad(out, 1, [&](std::vector<double>& g) {
      gemm_acc(av.data(), out.grad.data(), g.data(), k, m, n, true, false);
    });
  });
}

Tensor transpose(const Tensor& m) {
  require_rank2(m, "transpose");
  const int r = m.rows(), c = m.cols();
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < c; ++j) {
      v[static_cast<std::size_t>(j) * r + i] = m.at(i, j);
    }
  }
  return make_op({c, r}, std::move(v), {m}, [r, c](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          g[static_cast<std::size_t>(i) * c + j] +=
              out.grad[static_cast<std::size_t>(j) * r + i];
        }
      }
    });
  });
}

Tensor tanh(const Tensor& x) {
  std::vector<double> v(x.value().begin(), x.value().end());
  for (double& e : v) e = std::tanh(e);
  return make_op(x.shape(), std::move(v), {x}, [](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += out.grad[i] * (1.0 - out.value[i] * out.value[i]);
      }
    });
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> v(x.value().begin(), x.value().end());
  for (double& e : v) e = e > 0.0 ? e : 0.0;
  return make_op(x.shape(), std::move(v), {x}, [](Node& out) {
    const auto& xv = out.inputs[0]->value;
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0) g[i] += out.grad[i];
      }
    });
  });
}

namespace {

struct AxisView {
  int nslices;  // number of independent softmax slices
  int len;      // entries per slice
  int stride;   // distance between consecutive entries of one slice
  int outer;    // distance between slice starts along the grouped axis
};

AxisView axis_view(const Tensor& x, int axis, const char* op) {
  if (x.rank() == 1) {
    if (axis != 0) fail(std::string(op) + ": axis out of range for rank-1");
    return {1, x.dim(0), 1, 0};
  }
  require_rank2(x, op);
  const int r = x.dim(0), c = x.dim(1);
  if (axis == 1) return {r, c, 1, c};  // slices are rows
  if (axis == 0) return {c, r, c, 1};  // slices are columns
  fail(std::string(op) + ": axis out of range for rank-2");
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  return softmax_masked(x, axis, {});
}

Tensor softmax_masked(const Tensor& x, int axis,
                      const std::vector<unsigned char>& keep) {
  const AxisView av = axis_view(x, axis, "softmax");
  if (!keep.empty() && keep.size() != x.value().size()) {
    fail("softmax: mask length does not match tensor size");
  }
  std::vector<double> v(x.value().size(), 0.0);
  const auto kept = [&keep](std::size_t idx) {
    return keep.empty() || keep[idx] != 0;
  };
  for (int s = 0; s < av.nslices; ++s) {
    const std::size_t base = static_cast<std::size_t>(s) * av.outer;
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < av.len; ++i) {
      const std::size_t idx = base + static_cast<std::size_t>(i) * av.stride;
      if (kept(idx)) mx = std::max(mx, x.value()[idx]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      fail("softmax: slice has no unmasked entries");
    }
    double total = 0.0;
    for (int i = 0; i < av.len; ++i) {
      const std::size_t idx = base + static_cast<std::size_t>(i) * av.stride;
      if (!kept(idx)) continue;
      v[idx] = std::exp(x.value()[idx] - mx);
      total += v[idx];
    }
    for (int i = 0; i < av.len; ++i) {
      const std::size_t idx = base + static_cast<std::size_t>(i) * av.stride;
      if (kept(idx)) v[idx] /= total;
    }
  }
  auto mask = keep;  // captured by value; empty means dense
  return make_op(x.shape(), std::move(v), {x}, [av, mask](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (int s = 0; s < av.nslices; ++s) {
        const std::size_t base = static_cast<std::size_t>(s) * av.outer;
        double dot = 0.0;
        for (int i = 0; i < av.len; ++i) {
          const std::size_t idx = base + static_cast<std::size_t>(i) * av.stride;
          dot += out.grad[idx] * out.value[idx];
        }
        for (int i = 0; i < av.len; ++i) {
          const std::size_t idx = base + static_cast<std::size_t>(i) * av.stride;
          if (!mask.empty() && mask[idx] == 0) continue;
          g[idx] += out.value[idx] * (out.grad[idx] - dot);
        }
      }
    });
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) fail("concat: no inputs");
  if (parts.size() == 1) return parts[0];
  for (const auto& p : parts) require_rank2(p, "concat");
  const int fixed = axis == 0 ? parts[0].cols() : parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    const int pf = axis == 0 ? p.cols() : p.rows();
    if (pf != fixed) fail_shape("concat", parts[0].shape(), p.shape());
    total += axis == 0 ? p.rows() : p.cols();
  }
  const int r = axis == 0 ? total : fixed;
  const int c = axis == 0 ? fixed : total;
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const int pr = p.rows(), pc = p.cols();
    for (int i = 0; i < pr; ++i) {
      for (int j = 0; j < pc; ++j) {
        const int oi = axis == 0 ? off + i : i;
        const int oj = axis == 0 ? j : off + j;
        v[static_cast<std::size_t>(oi) * c + oj] = p.at(i, j);
      }
    }
    off += axis == 0 ? pr : pc;
  }
  return make_op({r, c}, std::move(v), parts, [axis, c, offsets](Node& out) {
    for (std::size_t k = 0; k < out.inputs.size(); ++k) {
      Node& in = *out.inputs[k];
      if (!in.requires_grad) continue;
      in.ensure_grad();
      const int pr = in.shape[0], pc = in.shape[1];
      const int off = offsets[k];
      for (int i = 0; i < pr; ++i) {
        for (int j = 0; j < pc; ++j) {
          const int oi = axis == 0 ? off + i : i;
          const int oj = axis == 0 ? j : off + j;
          in.grad[static_cast<std::size_t>(i) * pc + j] +=
              out.grad[static_cast<std::size_t>(oi) * c + oj];
        }
      }
    }
  });
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  return concat(std::vector<Tensor>{a, b}, axis);
}

Tensor slice_rows(const Tensor& m, int r0, int nrows) {
  require_rank2(m, "slice_rows");
  if (r0 < 0 || nrows <= 0 || r0 + nrows > m.rows()) {
    fail("slice_rows: range [" + std::to_string(r0) + ", " +
         std::to_string(r0 + nrows) + ") out of bounds for " +
         shape_str(m.shape()));
  }
  const int c = m.cols();
  std::vector<double> v(m.value().begin() + static_cast<std::ptrdiff_t>(r0) * c,
                        m.value().begin() +
                            static_cast<std::ptrdiff_t>(r0 + nrows) * c);
  return make_op({nrows, c}, std::move(v), {m}, [r0, c](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      const std::size_t base = static_cast<std::size_t>(r0) * c;
      for (std::size_t i = 0; i < out.grad.size(); ++i) {
        g[base + i] += out.grad[i];
      }
    });
  });
}

Tensor slice_cols(const Tensor& m, int c0, int ncols) {
  require_rank2(m, "slice_cols");
  if (c0 < 0 || ncols <= 0 || c0 + ncols > m.cols()) {
    fail("slice_cols: range [" + std::to_string(c0) + ", " +
         std::to_string(c0 + ncols) + ") out of bounds for " +
         shape_str(m.shape()));
  }
  const int r = m.rows(), c = m.cols();
  std::vector<double> v(static_cast<std::size_t>(r) * ncols);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < ncols; ++j) {
      v[static_cast<std::size_t>(i) * ncols + j] = m.at(i, c0 + j);
    }
  }
  return make_op({r, ncols}, std::move(v), {m}, [r, c, c0, ncols](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < ncols; ++j) {
          g[static_cast<std::size_t>(i) * c + c0 + j] +=
              out.grad[static_cast<std::size_t>(i) * ncols + j];
        }
      }
    });
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    fail_shape("reshape", x.shape(), shape);
  }
  std::vector<double> v(x.value().begin(), x.value().end());
  return make_op(std::move(shape), std::move(v), {x}, [](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank2(table, "gather_rows");
  const int c = table.cols();
  const int r = table.rows();
  for (int id : ids) {
    if (id < 0 || id >= r) {
      fail("gather_rows: id " + std::to_string(id) + " out of range [0, " +
           std::to_string(r) + ")");
    }
  }
  std::vector<double> v(ids.size() * static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = table.value().data() +
                        static_cast<std::size_t>(ids[i]) * c;
    std::copy(src, src + c, v.begin() + static_cast<std::ptrdiff_t>(i) * c);
  }
  auto ids_copy = ids;
  return make_op({static_cast<int>(ids.size()), c}, std::move(v), {table},
                 [ids_copy, c](Node& out) {
                   acc_grad(out, 0, [&](std::vector<double>& g) {
                     for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                       double* dst =
                           g.data() + static_cast<std::size_t>(ids_copy[i]) * c;
                       const double* src =
                           out.grad.data() + i * static_cast<std::size_t>(c);
                       for (int j = 0; j < c; ++j) dst[j] += src[j];
                     }
                   });
                 });
}

Tensor row_scale(const Tensor& m, const Tensor& alpha) {
  require_rank2(m, "row_scale");
  if (alpha.rank() != 1 || alpha.dim(0) != m.rows()) {
    fail_shape("row_scale", m.shape(), alpha.shape());
  }
  const int r = m.rows(), c = m.cols();
  std::vector<double> v(m.value().begin(), m.value().end());
  for (int i = 0; i < r; ++i) {
    const double a = alpha.at(i);
    for (int j = 0; j < c; ++j) v[static_cast<std::size_t>(i) * c + j] *= a;
  }
  return make_op(m.shape(), std::move(v), {m, alpha}, [r, c](Node& out) {
    const auto& mv = out.inputs[0]->value;
    const auto& av = out.inputs[1]->value;
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * c + j;
          g[idx] += out.grad[idx] * av[static_cast<std::size_t>(i)];
        }
      }
    });
    acc_grad(out, 1, [&](std::vector<double>& g) {
      for (int i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * c + j;
          dot += out.grad[idx] * mv[idx];
        }
        g[static_cast<std::size_t>(i)] += dot;
      }
    });
  });
}

Tensor sum_all(const Tensor& x) {
  double total = 0.0;
  for (double v : x.value()) total += v;
  return make_op({1}, {total}, {x}, [](Node& out) {
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (double& e : g) e += out.grad[0];
    });
  });
}

Tensor l2_norm_rows(const Tensor& m) {
  require_rank2(m, "l2_norm_rows");
  const int r = m.rows(), c = m.cols();
  std::vector<double> v(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = m.at(i, j);
      s += e * e;
    }
    v[static_cast<std::size_t>(i)] = std::sqrt(s);
  }
  return make_op({r}, std::move(v), {m}, [r, c](Node& out) {
    const auto& mv = out.inputs[0]->value;
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (int i = 0; i < r; ++i) {
        const double n = out.value[static_cast<std::size_t>(i)];
        if (n == 0.0) continue;
        const double s = out.grad[static_cast<std::size_t>(i)] / n;
        for (int j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * c + j;
          g[idx] += s * mv[idx];
        }
      }
    });
  });
}

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  require_rank2(x, "layer_norm_rows");
  const int r = x.rows(), c = x.cols();
  if (gain.rank() != 1 || gain.dim(0) != c) {
    fail_shape("layer_norm_rows", x.shape(), gain.shape());
  }
  if (bias.rank() != 1 || bias.dim(0) != c) {
    fail_shape("layer_norm_rows", x.shape(), bias.shape());
  }
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  std::vector<double> inv_sigma(static_cast<std::size_t>(r));
  std::vector<double> xhat(static_cast<std::size_t>(r) * c);
  for (int i = 0; i < r; ++i) {
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += x.at(i, j);
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = x.at(i, j) - mu;
      var += d * d;
    }
    var /= c;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<std::size_t>(i)] = is;
    for (int j = 0; j < c; ++j) {
      const std::size_t idx = static_cast<std::size_t>(i) * c + j;
      xhat[idx] = (x.at(i, j) - mu) * is;
      v[idx] = gain.at(j) * xhat[idx] + bias.at(j);
    }
  }
  return make_op(
      x.shape(), std::move(v), {x, gain, bias},
      [r, c, inv_sigma, xhat](Node& out) {
        const auto& gv = out.inputs[1]->value;
        acc_grad(out, 0, [&](std::vector<double>& g) {
          for (int i = 0; i < r; ++i) {
            // h = dL/dxhat for this row
            double mean_h = 0.0, mean_hx = 0.0;
            const std::size_t base = static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) {
              const double h = out.grad[base + j] * gv[static_cast<std::size_t>(j)];
              mean_h += h;
              mean_hx += h * xhat[base + j];
            }
            mean_h /= c;
            mean_hx /= c;
            const double is = inv_sigma[static_cast<std::size_t>(i)];
            for (int j = 0; j < c; ++j) {
              const double h = out.grad[base + j] * gv[static_cast<std::size_t>(j)];
              g[base + j] += is * (h - mean_h - xhat[base + j] * mean_hx);
            }
          }
        });
        acc_grad(out, 1, [&](std::vector<double>& g) {
          for (int i = 0; i < r; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) {
              g[static_cast<std::size_t>(j)] += out.grad[base + j] * xhat[base + j];
            }
          }
        });
        acc_grad(out, 2, [&](std::vector<double>& g) {
          for (int i = 0; i < r; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) {
              g[static_cast<std::size_t>(j)] += out.grad[base + j];
            }
          }
        });
      });
}

Tensor squash_rows(const Tensor& m) {
  require_rank2(m, "squash_rows");
  const int r = m.rows(), c = m.cols();
  std::vector<double> v(static_cast<std::size_t>(r) * c);
  std::vector<double> norms(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += m.at(i, j) * m.at(i, j);
    const double n = std::sqrt(s);
    norms[static_cast<std::size_t>(i)] = n;
    const double f = n / (1.0 + n * n);
    for (int j = 0; j < c; ++j) {
      v[static_cast<std::size_t>(i) * c + j] = f * m.at(i, j);
    }
  }
  return make_op(m.shape(), std::move(v), {m}, [r, c, norms](Node& out) {
    const auto& mv = out.inputs[0]->value;
    acc_grad(out, 0, [&](std::vector<double>& g) {
      for (int i = 0; i < r; ++i) {
        const double n = norms[static_cast<std::size_t>(i)];
        if (n == 0.0) continue;  // squash(0) = 0 with vanishing Jacobian
        const std::size_t base = static_cast<std::size_t>(i) * c;
        const double f = n / (1.0 + n * n);
        const double fp = (1.0 - n * n) / ((1.0 + n * n) * (1.0 + n * n));
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += out.grad[base + j] * mv[base + j];
        const double coef = fp * dot / n;
        for (int j = 0; j < c; ++j) {
          g[base + j] += f * out.grad[base + j] + coef * mv[base + j];
        }
      }
    });
  });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<unsigned char>& row_mask) {
  require_rank2(logits, "cross_entropy_rows");
  const int r = logits.rows(), c = logits.cols();
  if (static_cast<int>(targets.size()) != r) {
    fail("cross_entropy_rows: expected " + std::to_string(r) + " targets, got " +
         std::to_string(targets.size()));
  }
  if (!row_mask.empty() && static_cast<int>(row_mask.size()) != r) {
    fail("cross_entropy_rows: row mask length mismatch");
  }
  int counted = 0;
  double total = 0.0;
  std::vector<double> probs(static_cast<std::size_t>(r) * c, 0.0);
  for (int i = 0; i < r; ++i) {
    if (!row_mask.empty() && row_mask[static_cast<std::size_t>(i)] == 0) continue;
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= c) {
      fail("cross_entropy_rows: target " + std::to_string(t) +
           " out of range [0, " + std::to_string(c) + ")");
    }
    const std::size_t base = static_cast<std::size_t>(i) * c;
    double mx = logits.value()[base];
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.value()[base + j]);
    double lse = 0.0;
    for (int j = 0; j < c; ++j) lse += std::exp(logits.value()[base + j] - mx);
    lse = mx + std::log(lse);
    for (int j = 0; j < c; ++j) {
      probs[base + j] = std::exp(logits.value()[base + j] - lse);
    }
    total += lse - logits.value()[base + static_cast<std::size_t>(t)];
    ++counted;
  }
  if (counted == 0) {
    // Nothing to average over: defined as zero with no gradient.
    return Tensor::scalar(0.0);
  }
  const double mean = total / counted;
  auto targets_copy = targets;
  auto mask_copy = row_mask;
  return make_op({1}, {mean}, {logits},
                 [r, c, counted, probs, targets_copy, mask_copy](Node& out) {
                   acc_grad(out, 0, [&](std::vector<double>& g) {
                     const double s = out.grad[0] / counted;
                     for (int i = 0; i < r; ++i) {
                       if (!mask_copy.empty() &&
                           mask_copy[static_cast<std::size_t>(i)] == 0) {
                         continue;
                       }
                       const std::size_t base = static_cast<std::size_t>(i) * c;
                       for (int j = 0; j < c; ++j) {
                         double p = probs[base + j];
                         if (j == targets_copy[static_cast<std::size_t>(i)]) {
                           p -= 1.0;
                         }
                         g[base + j] += s * p;
                       }
                     }
                   });
                 });
}

}  // namespace factcheck::ad
