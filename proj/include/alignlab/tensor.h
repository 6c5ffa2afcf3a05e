// SPDX-License-Identifier: Apache-2.0
//
// Dense 64-bit tensors and a tape-based reverse-mode differentiation graph.
//
// Shape rules (no other broadcasting is accepted):
//   matmul        a[..., m, k] x b[k, n]        -> [..., m, n]
//                 a[..., m, k] x b[..., k, n]   -> [..., m, n]  (identical leading dims)
//   add, mul      b.shape == a.shape, or b.shape is a trailing suffix of a.shape,
//                 or b holds a single element
//   softmax       normalizes the last axis
//   layernorm     normalizes the last axis, no affine terms
//   swiglu        silu(gate) * value, identical shapes
//   embed         table[v, d] gathered by ids -> ids_shape + [d]
//   cross_entropy logits[n, v], n targets, n weights -> scalar sum_i w_i * CE_i
//   masked_fill   mask.shape == x.shape or a trailing suffix of it
//   rope          x[b, s, h, d] with b*s positions, d even
#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace alignlab {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor {
 public:
  /// Scalar zero.
  Tensor();
  /// Rejects zero extents, size mismatch, and non-finite values.
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return values_.size(); }
  bool is_scalar() const noexcept { return values_.size() == 1; }

  std::span<const double> values() const noexcept { return values_; }
  /// Raw write access; callers must leave the values finite (see check_finite).
  std::span<double> mutable_values() noexcept { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double item() const;

  /// Throws ValueError when any element is NaN or infinite.
  void check_finite(const char* context = "tensor") const;

  bool bitwise_equal(const Tensor& other) const noexcept;

 private:
  Shape shape_;
  std::vector<double> values_;
};

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  Mul,
  SoftmaxLastDim,
  LayerNorm,
  SwiGLU,
  EmbedLookup,
  CrossEntropy,
  Log,
  Exp,
  Concat,
  Slice,
  Transpose,
  MaskedFill,
  Reshape,
  Sum,
  Softplus,
  Relu,
  Rope,
};

const char* op_name(OpKind kind);

/// Handle to a node of a Graph.
struct Var {
  std::size_t id = 0;
};

class Graph;

/// Gradient of a scalar with respect to every requires-grad leaf.
class Gradients {
 public:
  const Tensor& operator[](Var v) const;
  bool contains(Var v) const;

 private:
  friend class Graph;
  std::vector<std::size_t> ids_;
  std::vector<Tensor> grads_;
};

class Graph {
 public:
  struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<std::size_t> inputs;
    Tensor value;
    bool requires_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var leaf(Tensor value, bool requires_grad);
  Var param(Tensor value) { return leaf(std::move(value), true); }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return value(v).shape(); }
  const Node& node(Var v) const { return nodes_.at(v.id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double factor);
  Var add_scalar(Var a, double offset);
  Var softmax(Var x);
  Var layernorm(Var x, double eps);
  Var swiglu(Var gate, Var value);
  Var embed(Var table, std::vector<std::size_t> ids, const Shape& ids_shape);
  Var cross_entropy(Var logits, std::vector<std::size_t> targets, std::vector<double> weights);
  Var log(Var x);
  Var exp(Var x);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
  Var transpose(Var x, std::size_t axis_a, std::size_t axis_b);
  Var masked_fill(Var x, std::vector<std::uint8_t> mask, const Shape& mask_shape, double fill);
  Var reshape(Var x, Shape shape);
  Var sum(Var x);
  Var softplus(Var x);
  Var relu(Var x);
  Var rope(Var x, std::vector<double> positions, double base);

  /// Reverse sweep from a scalar node.
  Gradients backward(Var loss) const;

 private:
  using BackwardFn =
      std::function<void(const Graph&, std::span<const double>, std::vector<std::vector<double>>&)>;

  Var push(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn);
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // deque: references returned by value() survive later pushes
  std::deque<Node> nodes_;
  std::vector<BackwardFn> backward_;
};

/// Builds a scalar from leaves bound to the given tensors.
using GraphFunction = std::function<Var(Graph&, std::span<const Var>)>;

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor in |a - n| / (|a| + |n| + floor).
  double floor = 1e-6;
};

/// Max relative error between backward() and central differences over every coordinate.
double grad_check(const GraphFunction& fn, const std::vector<Tensor>& point,
                  const GradCheckOptions& options = {});

}  // namespace alignlab
