#pragma once

// Dense row-major float64 tensors with reverse-mode differentiation.
//
// Every op returns a new Tensor. When any input requires a gradient the
// result keeps references to its inputs and a closure that pushes its
// gradient back to them. backward() orders that graph topologically (the
// Tape), runs the closures once each, and then releases the graph; leaf
// tensors keep their accumulated gradients.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "incarpose/errors.hpp"

namespace incarpose {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : n_(std::make_shared<detail::Node>()) {}

  static Tensor zeros(const Shape& s) { return full(s, 0.0); }
  static Tensor full(const Shape& s, double v) { return from_data(s, std::vector<double>(shape_numel(s), v)); }
  static Tensor scalar(double v) { return from_data({}, {v}); }

  static Tensor from_data(const Shape& s, std::vector<double> data) {
    if (data.size() != shape_numel(s)) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(s));
    }
    Tensor t;
    t.n_->shape = s;
    t.n_->value = std::move(data);
    return t;
  }

  const Shape& shape() const { return n_->shape; }
  std::size_t dim(int i) const { return n_->shape.at(i < 0 ? n_->shape.size() + i : i); }
  std::size_t rank() const { return n_->shape.size(); }
  std::size_t numel() const { return n_->value.size(); }

  const std::vector<double>& data() const { return n_->value; }
  // Writable storage. Mutating a tensor that already feeds a recorded
  // graph invalidates that graph's gradients.
  std::vector<double>& mutable_data() { return n_->value; }
  double item() const {
    if (numel() != 1) throw InvalidArgument("item() on tensor of shape " + shape_str(shape()));
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    if (!n_->leaf) throw InvalidArgument("requires_grad can only be set on leaf tensors");
    n_->requires_grad = on;
    return *this;
  }
  bool is_leaf() const { return n_->leaf; }

  bool has_grad() const { return n_->grad.size() == n_->value.size() && !n_->value.empty(); }
  // Gradient buffer; zeros when nothing has been accumulated yet.
  const std::vector<double>& grad() const { return n_->grad_buffer(); }
  void zero_grad() { n_->grad.assign(n_->value.size(), 0.0); }

  /// Same values, no graph.
  Tensor detach() const { return from_data(shape(), data()); }

  bool same_node(const Tensor& o) const { return n_ == o.n_; }

  std::shared_ptr<detail::Node> node() const { return n_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> n_;
};

// ---------------------------------------------------------------------------
// Graph recording

namespace detail {

using BackwardFn = std::function<void(Node&)>;

inline Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                          BackwardFn fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const Tensor& t : inputs) {
    if (t.requires_grad()) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->leaf = false;
    for (const Tensor& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(fn);
  }
  return Tensor(std::move(n));
}

// Gradient buffer of parent i, or nullptr when it takes no gradient.
inline std::vector<double>* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

inline const std::vector<double>& parent_value(const Node& self, std::size_t i) { return self.parents[i]->value; }

}  // namespace detail

/// Topological order of the recorded graph below a loss tensor, inputs
/// first. Each node appears once.
struct Tape {
  std::vector<std::shared_ptr<detail::Node>> nodes;
  std::size_t size() const { return nodes.size(); }
};

inline Tape record_tape(const Tensor& loss) {
  Tape tape;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.push_back({loss.node(), 0});
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->consumed) throw StaleTape("graph was already consumed by a previous backward()");
    if (next < node->parents.size()) {
      const auto& p = node->parents[next++];
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back({p, 0});
    } else {
      tape.nodes.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

/// d loss / d leaf for every leaf that requires a gradient. Leaf gradients
/// accumulate across calls; the intermediate graph is released afterwards,
/// so a second call on the same loss raises StaleTape.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw InvalidArgument("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (loss.node()->consumed) throw StaleTape("backward() called twice on the same graph");
  if (!loss.requires_grad()) throw InvalidArgument("loss does not depend on any tensor that requires grad");
  Tape tape = record_tape(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward && !n.grad.empty()) n.backward(n);
  }
  for (auto& n : tape.nodes) {
    if (n->leaf) continue;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->consumed = true;
  }
}

/// Op with a caller-supplied value and backward rule. The backward receives
/// the output gradient and one gradient buffer per input (nullptr for
/// inputs that take no gradient) to accumulate into.
using CustomBackward =
    std::function<void(std::span<const double> grad_out, const std::vector<std::vector<double>*>& grad_in)>;

inline Tensor custom_op(const std::vector<Tensor>& inputs, Shape shape, std::vector<double> value,
                        CustomBackward bw) {
  if (value.size() != shape_numel(shape)) throw ShapeError("custom_op value does not match " + shape_str(shape));
  return detail::make_result(std::move(shape), std::move(value), inputs, [bw = std::move(bw)](detail::Node& self) {
    std::vector<std::vector<double>*> gin(self.parents.size());
    for (std::size_t i = 0; i < gin.size(); ++i) gin[i] = detail::parent_grad(self, i);
    bw(self.grad, gin);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// b must equal a in shape or match a's trailing dimensions (broadcast over
// the leading ones).
inline void require_broadcastable(const Tensor& a, const Tensor& b, const char* op) {
  const Shape &sa = a.shape(), &sb = b.shape();
  const bool ok = sb.size() <= sa.size() && std::equal(sb.begin(), sb.end(), sa.end() - sb.size());
  if (!ok || b.numel() == 0) {
    throw ShapeError(std::string(op) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) + " are incompatible");
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_broadcastable(a, b, "add");
  const auto &va = a.data(), &vb = b.data();
  const std::size_t nb = vb.size();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i % nb];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [nb](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    if (auto* gb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % nb] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_broadcastable(a, b, "sub");
  const auto &va = a.data(), &vb = b.data();
  const std::size_t nb = vb.size();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i % nb];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [nb](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
    if (auto* gb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % nb] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_broadcastable(a, b, "mul");
  const auto &va = a.data(), &vb = b.data();
  const std::size_t nb = vb.size();
  std::vector<double> out(va.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i % nb];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [nb](detail::Node& self) {
    const auto &va = detail::parent_value(self, 0), &vb = detail::parent_value(self, 1);
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * vb[i % nb];
    if (auto* gb = detail::parent_grad(self, 1))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i % nb] += self.grad[i] * va[i];
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= s;
  return detail::make_result(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += s * self.grad[i];
  });
}

/// Exact GELU, x Φ(x).
inline Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  std::vector<double> out(a.numel());
  const auto& va = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * va[i] * (1.0 + std::erf(va[i] * kInvSqrt2));
  return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    const auto& va = detail::parent_value(self, 0);
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double x = va[i];
        const double d = 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
        (*ga)[i] += self.grad[i] * d;
      }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (shape_numel(s) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(s));
  }
  return detail::make_result(s, a.data(), {a}, [](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
  });
}

namespace detail {

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// For each output flat index, the input flat index it reads.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t r = in.size();
  const auto in_st = strides_of(in);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
  std::vector<std::size_t> src(shape_numel(in));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t s = 0;
    for (std::size_t k = 0; k < r; ++k) s += idx[k] * in_st[perm[k]];
    src[o] = s;
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < out_shape[k]) break;
      idx[k] = 0;
    }
  }
  return src;
}

}  // namespace detail

/// Output axis i is input axis perm[i].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& in = a.shape();
  std::vector<std::size_t> sorted = perm;
  std::sort(sorted.begin(), sorted.end());
  bool valid = perm.size() == in.size();
  for (std::size_t i = 0; valid && i < sorted.size(); ++i) valid = sorted[i] == i;
  if (!valid) throw ShapeError("permute: invalid axis order for shape " + shape_str(in));
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out_shape[i] = in[perm[i]];
  auto src = std::make_shared<std::vector<std::size_t>>(detail::permute_index(in, perm));
  std::vector<double> out(a.numel());
  const auto& va = a.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = va[(*src)[o]];
  return detail::make_result(std::move(out_shape), std::move(out), {a}, [src](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t o = 0; o < self.grad.size(); ++o) (*ga)[(*src)[o]] += self.grad[o];
  });
}

/// Swaps the last two axes.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

namespace detail {

inline std::size_t norm_axis(int axis, std::size_t rank) {
  const long a = axis < 0 ? static_cast<long>(rank) + axis : axis;
  if (a < 0 || a >= static_cast<long>(rank)) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// (outer, axis length, inner) decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace detail

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw InvalidArgument("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = detail::norm_axis(axis, s0.size());
  Shape out_shape = s0;
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == ax || s[i] == s0[i];
    if (!ok) throw ShapeError("concat: shapes " + shape_str(s0) + " and " + shape_str(s) + " differ off-axis");
    lens.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const auto sp = detail::split_axis(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].data();
    const std::size_t block = lens[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(v.begin() + o * block, block, out.begin() + o * sp.len * sp.inner + off * sp.inner);
    off += lens[k];
  }
  return detail::make_result(out_shape, std::move(out), parts, [lens, sp](detail::Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      const std::size_t block = lens[k] * sp.inner;
      if (auto* g = detail::parent_grad(self, k))
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < block; ++j) (*g)[o * block + j] += self.grad[o * sp.len * sp.inner + off * sp.inner + j];
      off += lens[k];
    }
  });
}

/// Elements [start, end) along one axis.
inline Tensor slice(const Tensor& a, int axis, std::size_t start, std::size_t end) {
  const std::size_t ax = detail::norm_axis(axis, a.rank());
  if (start >= end || end > a.shape()[ax]) {
    throw ShapeError("slice [" + std::to_string(start) + ", " + std::to_string(end) + ") out of range for " +
                     shape_str(a.shape()));
  }
  const auto sp = detail::split_axis(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = end - start;
  const std::size_t block = (end - start) * sp.inner;
  std::vector<double> out(sp.outer * block);
  const auto& va = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(va.begin() + o * sp.len * sp.inner + start * sp.inner, block, out.begin() + o * block);
  return detail::make_result(std::move(out_shape), std::move(out), {a}, [sp, start, block](detail::Node& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < block; ++j) (*g)[o * sp.len * sp.inner + start * sp.inner + j] += self.grad[o * block + j];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

}  // namespace detail

/// a [..., M, K] times b [K, N] (shared across the batch) or b [..., K, N]
/// with the same leading dimensions as a.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape &sa = a.shape(), &sb = b.shape();
  const auto fail = [&] {
    throw ShapeError("matmul: shapes " + shape_str(sa) + " and " + shape_str(sb) + " are incompatible");
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  if (sb[sb.size() - 2] != k) fail();
  const bool shared = sb.size() == 2;
  if (!shared && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()))) fail();
  const std::size_t batch = shape_numel(Shape(sa.begin(), sa.end() - 2));
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);

  std::vector<double> out(batch * m * n);
  if (shared) {
    detail::MapM(out.data(), batch * m, n).noalias() =
        detail::MapC(a.data().data(), batch * m, k) * detail::MapC(b.data().data(), k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i)
      detail::MapM(out.data() + i * m * n, m, n).noalias() =
          detail::MapC(a.data().data() + i * m * k, m, k) * detail::MapC(b.data().data() + i * k * n, k, n);
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a, b},
                             [batch, m, k, n, shared](detail::Node& self) {
                               const double* va = detail::parent_value(self, 0).data();
                               const double* vb = detail::parent_value(self, 1).data();
                               const double* g = self.grad.data();
                               if (shared) {
                                 const std::size_t bm = batch * m;
                                 if (auto* ga = detail::parent_grad(self, 0))
                                   detail::MapM(ga->data(), bm, k).noalias() +=
                                       detail::MapC(g, bm, n) * detail::MapC(vb, k, n).transpose();
                                 if (auto* gb = detail::parent_grad(self, 1))
                                   detail::MapM(gb->data(), k, n).noalias() +=
                                       detail::MapC(va, bm, k).transpose() * detail::MapC(g, bm, n);
                                 return;
                               }
                               auto* ga = detail::parent_grad(self, 0);
                               auto* gb = detail::parent_grad(self, 1);
                               for (std::size_t i = 0; i < batch; ++i) {
                                 if (ga)
                                   detail::MapM(ga->data() + i * m * k, m, k).noalias() +=
                                       detail::MapC(g + i * m * n, m, n) * detail::MapC(vb + i * k * n, k, n).transpose();
                                 if (gb)
                                   detail::MapM(gb->data() + i * k * n, k, n).noalias() +=
                                       detail::MapC(va + i * m * k, m, k).transpose() * detail::MapC(g + i * m * n, m, n);
                               }
                             });
}

/// Pointwise convolution on channels-last input [..., C_in]: x W + b with
/// W [C_in, C_out] and b [C_out].
inline Tensor conv2d_1x1(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1 || x.dim(-1) != w.dim(0) || b.dim(0) != w.dim(1)) {
    throw ShapeError("conv2d_1x1: input " + shape_str(x.shape()) + ", weight " + shape_str(w.shape()) + ", bias " +
                     shape_str(b.shape()));
  }
  const std::size_t rows = x.numel() / x.dim(-1);
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  return reshape(add(matmul(reshape(x, {rows, x.dim(-1)}), w), b), out_shape);
}

/// Affine map over the last axis: x W + b.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return conv2d_1x1(x, w, b); }

// ---------------------------------------------------------------------------
// Reductions and normalization

inline Tensor softmax(const Tensor& a, int axis = -1) {
  const std::size_t ax = detail::norm_axis(axis, a.rank());
  const auto sp = detail::split_axis(a.shape(), ax);
  std::vector<double> out(a.numel());
  const auto& va = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < sp.len; ++j) mx = std::max(mx, va[base + j * sp.inner]);
      double s = 0.0;
      for (std::size_t j = 0; j < sp.len; ++j) s += out[base + j * sp.inner] = std::exp(va[base + j * sp.inner] - mx);
      for (std::size_t j = 0; j < sp.len; ++j) out[base + j * sp.inner] /= s;
    }
  return detail::make_result(a.shape(), std::move(out), {a}, [sp](detail::Node& self) {
    auto* ga = detail::parent_grad(self, 0);
    if (!ga) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.len; ++j) dot += self.grad[base + j * sp.inner] * y[base + j * sp.inner];
        for (std::size_t j = 0; j < sp.len; ++j) {
          const std::size_t i = base + j * sp.inner;
          (*ga)[i] += y[i] * (self.grad[i] - dot);
        }
      }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes over the last axis, then gain * x̂ + bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
  if (x.rank() < 1 || gain.shape() != Shape{x.dim(-1)} || bias.shape() != gain.shape()) {
    throw ShapeError("layer_norm: input " + shape_str(x.shape()) + ", gain " + shape_str(gain.shape()) + ", bias " +
                     shape_str(bias.shape()));
  }
  const std::size_t f = x.dim(-1), rows = x.numel() / f;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(x.numel());
  const auto &vx = x.data(), &vg = gain.data(), &vb = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = vx.data() + r * f;
    double mean = 0.0;
    for (std::size_t j = 0; j < f; ++j) mean += row[j];
    mean /= static_cast<double>(f);
    double var = 0.0;
    for (std::size_t j = 0; j < f; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(f);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < f; ++j) {
      const double h = (row[j] - mean) * rs;
      (*xhat)[r * f + j] = h;
      out[r * f + j] = vg[j] * h + vb[j];
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x, gain, bias}, [f, rows, xhat, rstd](detail::Node& self) {
    const auto& vg = detail::parent_value(self, 1);
    auto* gx = detail::parent_grad(self, 0);
    auto* gg = detail::parent_grad(self, 1);
    auto* gb = detail::parent_grad(self, 2);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gy = self.grad.data() + r * f;
      const double* h = xhat->data() + r * f;
      if (gg || gb)
        for (std::size_t j = 0; j < f; ++j) {
          if (gg) (*gg)[j] += gy[j] * h[j];
          if (gb) (*gb)[j] += gy[j];
        }
      if (!gx) continue;
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < f; ++j) {
        const double d = gy[j] * vg[j];
        m1 += d;
        m2 += d * h[j];
      }
      m1 /= static_cast<double>(f);
      m2 /= static_cast<double>(f);
      for (std::size_t j = 0; j < f; ++j) (*gx)[r * f + j] += (*rstd)[r] * (gy[j] * vg[j] - m1 - h[j] * m2);
    }
  });
}

/// Mean over one axis; that axis is removed.
inline Tensor mean(const Tensor& a, int axis) {
  const std::size_t ax = detail::norm_axis(axis, a.rank());
  const auto sp = detail::split_axis(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(ax));
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto& va = a.data();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.len; ++j)
      for (std::size_t in = 0; in < sp.inner; ++in) out[o * sp.inner + in] += va[(o * sp.len + j) * sp.inner + in];
  for (double& v : out) v *= inv;
  return detail::make_result(std::move(out_shape), std::move(out), {a}, [sp, inv](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t j = 0; j < sp.len; ++j)
          for (std::size_t in = 0; in < sp.inner; ++in)
            (*ga)[(o * sp.len + j) * sp.inner + in] += inv * self.grad[o * sp.inner + in];
  });
}

/// Sum of all elements, as a rank-0 tensor.
inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({}, {s}, {a}, [](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (double& g : *ga) g += self.grad[0];
  });
}

inline Tensor mean_all(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// ---------------------------------------------------------------------------
// Dropout

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Identifies one dropout call; equal keys give equal masks.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t layer = 0;
  std::uint64_t step = 0;
};

/// Uniform in [0, 1) for element i of the call identified by key.
inline double dropout_uniform(const DropoutKey& key, std::uint64_t i) {
  const std::uint64_t k =
      detail::splitmix64(detail::splitmix64(detail::splitmix64(key.seed) ^ key.layer) ^ key.step);
  return static_cast<double>(detail::splitmix64(k + 0x9E3779B97F4A7C15ULL * i) >> 11) * 0x1.0p-53;
}

/// Zeroes each element with probability p and scales survivors by
/// 1 / (1 - p). Identity when training is off or p = 0.
inline Tensor dropout(const Tensor& x, double p, const DropoutKey& key, bool training) {
  if (!(p >= 0.0 && p < 1.0)) throw InvalidArgument("dropout probability must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = dropout_uniform(key, i) < p ? 0.0 : keep;
    out[i] = x.data()[i] * (*mask)[i];
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [mask](detail::Node& self) {
    if (auto* ga = detail::parent_grad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * (*mask)[i];
  });
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamWConfig {
  double lr = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

struct AdamWState {
  AdamWConfig cfg;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

inline AdamWState make_adamw_state(const std::vector<Tensor>& params, const AdamWConfig& cfg = {}) {
  AdamWState s;
  s.cfg = cfg;
  for (const Tensor& p : params) {
    s.m.emplace_back(p.numel(), 0.0);
    s.v.emplace_back(p.numel(), 0.0);
  }
  return s;
}

/// One AdamW update with decoupled weight decay:
///   p <- p (1 - lr wd);  m, v <- moment updates;
///   p <- p - lr m̂ / (sqrt(v̂) + eps).
inline void adamw_step(std::vector<std::vector<double>*> params, const std::vector<const std::vector<double>*>& grads,
                       AdamWState& st) {
  if (params.size() != grads.size() || params.size() != st.m.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " params, " + std::to_string(grads.size()) +
                     " grads, " + std::to_string(st.m.size()) + " moment buffers");
  }
  ++st.step;
  const AdamWConfig& c = st.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  const double step_size = c.lr / bc1;
  const double bc2_sqrt = std::sqrt(bc2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    std::vector<double>& p = *params[k];
    const std::vector<double>& g = *grads[k];
    if (g.size() != p.size() || st.m[k].size() != p.size()) {
      throw ShapeError("adamw_step: parameter " + std::to_string(k) + " has " + std::to_string(p.size()) +
                       " values but gradient has " + std::to_string(g.size()));
    }
    auto& m = st.m[k];
    auto& v = st.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] *= 1.0 - c.lr * c.weight_decay;
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      p[i] -= step_size * m[i] / (std::sqrt(v[i]) / bc2_sqrt + c.eps);
    }
  }
}

/// Updates leaf tensors in place from their accumulated gradients.
inline void adamw_step(std::vector<Tensor>& params, AdamWState& st) {
  std::vector<std::vector<double>*> p;
  std::vector<const std::vector<double>*> g;
  for (Tensor& t : params) {
    p.push_back(&t.mutable_data());
    g.push_back(&t.grad());
  }
  adamw_step(p, g, st);
}

}  // namespace incarpose
