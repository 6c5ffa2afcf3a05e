// SPDX-License-Identifier: Apache-2.0
#include "alignlab/tensor.h"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <numeric>
#include <sstream>

#include "alignlab/errors.h"

namespace alignlab {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor() : values_(1, 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
  for (std::size_t extent : shape_) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }
  if (numel(shape_) != values_.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape_) + " needs " + std::to_string(numel(shape_)) +
                     " values, got " + std::to_string(values_.size()));
  }
  check_finite();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

double Tensor::item() const {
  if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return values_[0];
}

void Tensor::check_finite(const char* context) const {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!std::isfinite(values_[i])) {
      throw NonFiniteError(std::string(context) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

bool Tensor::bitwise_equal(const Tensor& other) const noexcept {
  if (shape_ != other.shape_) return false;
  return std::equal(values_.begin(), values_.end(), other.values_.begin(),
                    [](double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; });
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::SoftmaxLastDim: return "softmax-lastdim";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::SwiGLU: return "swiglu";
    case OpKind::EmbedLookup: return "embed-lookup";
    case OpKind::CrossEntropy: return "cross-entropy";
    case OpKind::Log: return "log";
    case OpKind::Exp: return "exp";
    case OpKind::Concat: return "concat";
    case OpKind::Slice: return "slice";
    case OpKind::Transpose: return "transpose";
    case OpKind::MaskedFill: return "masked-fill";
    case OpKind::Reshape: return "reshape";
    case OpKind::Sum: return "sum";
    case OpKind::Softplus: return "softplus";
    case OpKind::Relu: return "relu";
    case OpKind::Rope: return "rope";
  }
  return "?";
}

const Tensor& Gradients::operator[](Var v) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), v.id);
  if (it == ids_.end() || *it != v.id) throw ValueError("no gradient recorded for node " + std::to_string(v.id));
  return grads_[static_cast<std::size_t>(it - ids_.begin())];
}

bool Gradients::contains(Var v) const { return std::binary_search(ids_.begin(), ids_.end(), v.id); }

namespace {

using GradStore = std::vector<std::vector<double>>;

std::vector<double>& slot(GradStore& grads, std::size_t id, std::size_t n) {
  auto& g = grads[id];
  if (g.empty()) g.assign(n, 0.0);
  return g;
}

// b broadcasts onto a when it matches a's shape, a trailing suffix of it, or is a single element.
void check_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (numel(b) == 1) return;
  if (b.size() <= a.size() && std::equal(b.begin(), b.end(), a.end() - static_cast<std::ptrdiff_t>(b.size()))) {
    return;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(b) + " onto " + shape_str(a));
}

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

}  // namespace

Var Graph::push(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
  value.check_finite(op_name(kind));
  Node node;
  node.kind = kind;
  node.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].requires_grad; });
  node.inputs = std::move(inputs);
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  backward_.push_back(std::move(fn));
  return Var{nodes_.size() - 1};
}

Var Graph::leaf(Tensor value, bool requires_grad) {
  value.check_finite("leaf");
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  nodes_.push_back(std::move(node));
  backward_.emplace_back();
  return Var{nodes_.size() - 1};
}

Var Graph::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = sb[sb.size() - 2];
  const std::size_t n = sb.back();
  const bool shared = sb.size() == 2;
  if (k != kb || (!shared && (sb.size() != sa.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())))) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t batches = numel(sa) / (m * k);
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n, 0.0);
  const auto av = value(a).values();
  const auto bv = value(b).values();
  for (std::size_t t = 0; t < batches; ++t) {
    const double* A = av.data() + t * m * k;
    const double* B = bv.data() + (shared ? 0 : t * k * n);
    double* C = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        const double* brow = B + p * n;
        double* crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
    }
  }
  const std::size_t ia = a.id, ib = b.id;
  return push(OpKind::MatMul, {ia, ib}, Tensor(std::move(out_shape), std::move(out)),
              [ia, ib, batches, m, k, n, shared](const Graph& g, std::span<const double> gout, GradStore& grads) {
                const auto av = g.nodes_[ia].value.values();
                const auto bv = g.nodes_[ib].value.values();
                if (g.needs_grad(ia)) {
                  auto& ga = slot(grads, ia, av.size());
                  for (std::size_t t = 0; t < batches; ++t) {
                    const double* B = bv.data() + (shared ? 0 : t * k * n);
                    const double* G = gout.data() + t * m * n;
                    double* GA = ga.data() + t * m * k;
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
                        GA[i * k + p] += acc;
                      }
                  }
                }
                if (g.needs_grad(ib)) {
                  auto& gb = slot(grads, ib, bv.size());
                  for (std::size_t t = 0; t < batches; ++t) {
                    const double* A = av.data() + t * m * k;
                    const double* G = gout.data() + t * m * n;
                    double* GB = gb.data() + (shared ? 0 : t * k * n);
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const double aip = A[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += aip * G[i * n + j];
                      }
                  }
                }
              });
}

Var Graph::add(Var a, Var b) {
  check_broadcast("add", shape(a), shape(b));
  const auto av = value(a).values();
  const auto bv = value(b).values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i % bv.size()];
  const std::size_t ia = a.id, ib = b.id;
  return push(OpKind::Add, {ia, ib}, Tensor(shape(a), std::move(out)),
              [ia, ib](const Graph& g, std::span<const double> gout, GradStore& grads) {
                const std::size_t nb = g.nodes_[ib].value.size();
                if (g.needs_grad(ia)) {
                  auto& ga = slot(grads, ia, gout.size());
                  for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                }
                if (g.needs_grad(ib)) {
                  auto& gb = slot(grads, ib, nb);
                  for (std::size_t i = 0; i < gout.size(); ++i) gb[i % nb] += gout[i];
                }
              });
}

Var Graph::mul(Var a, Var b) {
  check_broadcast("mul", shape(a), shape(b));
  const auto av = value(a).values();
  const auto bv = value(b).values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i % bv.size()];
  const std::size_t ia = a.id, ib = b.id;
  return push(OpKind::Mul, {ia, ib}, Tensor(shape(a), std::move(out)),
              [ia, ib](const Graph& g, std::span<const double> gout, GradStore& grads) {
                const auto av = g.nodes_[ia].value.values();
                const auto bv = g.nodes_[ib].value.values();
                if (g.needs_grad(ia)) {
                  auto& ga = slot(grads, ia, av.size());
                  for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i] * bv[i % bv.size()];
                }
                if (g.needs_grad(ib)) {
                  auto& gb = slot(grads, ib, bv.size());
                  for (std::size_t i = 0; i < gout.size(); ++i) gb[i % bv.size()] += gout[i] * av[i];
                }
              });
}

Var Graph::scale(Var a, double factor) { return mul(a, constant(Tensor::scalar(factor))); }

Var Graph::add_scalar(Var a, double offset) { return add(a, constant(Tensor::scalar(offset))); }

Var Graph::softmax(Var x) {
  const Shape& s = shape(x);
  if (s.empty()) throw ShapeError("softmax-lastdim: needs rank >= 1");
  const std::size_t d = s.back();
  const auto xv = value(x).values();
  const std::size_t rows = xv.size() / d;
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double* yr = out.data() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double total = 0.0;
    for (std::size_t j = 0; j < d; ++j) total += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < d; ++j) yr[j] /= total;
  }
  const std::size_t ix = x.id;
  Var y = push(OpKind::SoftmaxLastDim, {ix}, Tensor(s, std::move(out)), {});
  const std::size_t iy = y.id;
  backward_[iy] = [ix, iy, d](const Graph& g, std::span<const double> gout, GradStore& grads) {
    if (!g.needs_grad(ix)) return;
    const auto yv = g.nodes_[iy].value.values();
    auto& gx = slot(grads, ix, yv.size());
    for (std::size_t r = 0; r < yv.size() / d; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += gout[r * d + j] * yv[r * d + j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += yv[r * d + j] * (gout[r * d + j] - dot);
    }
  };
  return y;
}

Var Graph::layernorm(Var x, double eps) {
  if (!(eps >= 0.0)) throw ValueError("layernorm: eps must be >= 0");
  const Shape& s = shape(x);
  if (s.empty()) throw ShapeError("layernorm: needs rank >= 1");
  const std::size_t d = s.back();
  const auto xv = value(x).values();
  const std::size_t rows = xv.size() / d;
  std::vector<double> out(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = (xr[j] - mean) * inv_std[r];
  }
  const std::size_t ix = x.id;
  Var y = push(OpKind::LayerNorm, {ix}, Tensor(s, std::move(out)), {});
  const std::size_t iy = y.id;
  backward_[iy] = [ix, iy, d, inv_std = std::move(inv_std)](const Graph& g, std::span<const double> gout,
                                                           GradStore& grads) {
    if (!g.needs_grad(ix)) return;
    const auto yv = g.nodes_[iy].value.values();
    auto& gx = slot(grads, ix, yv.size());
    const double dn = static_cast<double>(d);
    for (std::size_t r = 0; r < yv.size() / d; ++r) {
      double mean_g = 0.0, mean_gy = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        mean_g += gout[r * d + j];
        mean_gy += gout[r * d + j] * yv[r * d + j];
      }
      mean_g /= dn;
      mean_gy /= dn;
      for (std::size_t j = 0; j < d; ++j) {
        gx[r * d + j] += inv_std[r] * (gout[r * d + j] - mean_g - yv[r * d + j] * mean_gy);
      }
    }
  };
  return y;
}

Var Graph::swiglu(Var gate, Var val) {
  if (shape(gate) != shape(val)) {
    throw ShapeError("swiglu: gate " + shape_str(shape(gate)) + " vs value " + shape_str(shape(val)));
  }
  const auto gv = value(gate).values();
  const auto vv = value(val).values();
  std::vector<double> out(gv.size());
  for (std::size_t i = 0; i < gv.size(); ++i) out[i] = gv[i] * sigmoid(gv[i]) * vv[i];
  const std::size_t ig = gate.id, iv = val.id;
  return push(OpKind::SwiGLU, {ig, iv}, Tensor(shape(gate), std::move(out)),
              [ig, iv](const Graph& g, std::span<const double> gout, GradStore& grads) {
                const auto gv = g.nodes_[ig].value.values();
                const auto vv = g.nodes_[iv].value.values();
                if (g.needs_grad(ig)) {
                  auto& gg = slot(grads, ig, gv.size());
                  for (std::size_t i = 0; i < gv.size(); ++i) {
                    const double sg = sigmoid(gv[i]);
                    gg[i] += gout[i] * vv[i] * sg * (1.0 + gv[i] * (1.0 - sg));
                  }
                }
                if (g.needs_grad(iv)) {
                  auto& gvv = slot(grads, iv, vv.size());
                  for (std::size_t i = 0; i < gv.size(); ++i) gvv[i] += gout[i] * gv[i] * sigmoid(gv[i]);
                }
              });
}

Var Graph::embed(Var table, std::vector<std::size_t> ids, const Shape& ids_shape) {
  const Shape& ts = shape(table);
  if (ts.size() != 2) throw ShapeError("embed-lookup: table must be rank 2, got " + shape_str(ts));
  if (numel(ids_shape) != ids.size()) throw ShapeError("embed-lookup: ids do not match " + shape_str(ids_shape));
  const std::size_t rows = ts[0], d = ts[1];
  const auto tv = value(table).values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) {
      throw ValueError("embed-lookup: id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                       " out of range [0, " + std::to_string(rows) + ")");
    }
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  const std::size_t it = table.id;
  return push(OpKind::EmbedLookup, {it}, Tensor(std::move(out_shape), std::move(out)),
              [it, d, ids = std::move(ids)](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(it)) return;
                auto& gt = slot(grads, it, g.nodes_[it].value.size());
                for (std::size_t i = 0; i < ids.size(); ++i)
                  for (std::size_t j = 0; j < d; ++j) gt[ids[i] * d + j] += gout[i * d + j];
              });
}

Var Graph::cross_entropy(Var logits, std::vector<std::size_t> targets, std::vector<double> weights) {
  const Shape& s = shape(logits);
  if (s.size() != 2) throw ShapeError("cross-entropy: logits must be rank 2, got " + shape_str(s));
  const std::size_t n = s[0], v = s[1];
  if (targets.size() != n || weights.size() != n) {
    throw ShapeError("cross-entropy: " + std::to_string(n) + " rows but " + std::to_string(targets.size()) +
                     " targets and " + std::to_string(weights.size()) + " weights");
  }
  const auto lv = value(logits).values();
  std::vector<double> probs(lv.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (targets[r] >= v) throw ValueError("cross-entropy: target out of range at row " + std::to_string(r));
    const double* xr = lv.data() + r * v;
    const double mx = *std::max_element(xr, xr + v);
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += (probs[r * v + j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= total;
    if (weights[r] != 0.0) loss += weights[r] * (mx + std::log(total) - xr[targets[r]]);
  }
  const std::size_t il = logits.id;
  return push(OpKind::CrossEntropy, {il}, Tensor::scalar(loss),
              [il, v, targets = std::move(targets), weights = std::move(weights), probs = std::move(probs)](
                  const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(il)) return;
                auto& gl = slot(grads, il, probs.size());
                for (std::size_t r = 0; r < targets.size(); ++r) {
                  const double w = weights[r] * gout[0];
                  if (w == 0.0) continue;
                  for (std::size_t j = 0; j < v; ++j) gl[r * v + j] += w * probs[r * v + j];
                  gl[r * v + targets[r]] -= w;
                }
              });
}

Var Graph::log(Var x) {
  const auto xv = value(x).values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0.0)) throw ValueError("log: non-positive input at flat index " + std::to_string(i));
    out[i] = std::log(xv[i]);
  }
  const std::size_t ix = x.id;
  return push(OpKind::Log, {ix}, Tensor(shape(x), std::move(out)),
              [ix](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                const auto xv = g.nodes_[ix].value.values();
                auto& gx = slot(grads, ix, xv.size());
                for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gout[i] / xv[i];
              });
}

Var Graph::exp(Var x) {
  const auto xv = value(x).values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::exp(xv[i]);
  const std::size_t ix = x.id;
  Var y = push(OpKind::Exp, {ix}, Tensor(shape(x), std::move(out)), {});
  const std::size_t iy = y.id;
  backward_[iy] = [ix, iy](const Graph& g, std::span<const double> gout, GradStore& grads) {
    if (!g.needs_grad(ix)) return;
    const auto yv = g.nodes_[iy].value.values();
    auto& gx = slot(grads, ix, yv.size());
    for (std::size_t i = 0; i < yv.size(); ++i) gx[i] += gout[i] * yv[i];
  };
  return y;
}

Var Graph::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = shape(parts[0]);
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range for " + shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> extents;
  for (Var p : parts) {
    const Shape& s = shape(p);
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0));
    out_shape[axis] += s[axis];
    ids.push_back(p.id);
    extents.push_back(s[axis]);
  }
  const std::size_t outer = numel(Shape(s0.begin(), s0.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s0.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s0.end()));
  const std::size_t total = out_shape[axis];
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < ids.size(); ++p) {
    const auto pv = nodes_[ids[p]].value.values();
    const std::size_t block = extents[p] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.data() + o * block, block, out.data() + o * total * inner + offset * inner);
    }
    offset += extents[p];
  }
  std::vector<std::size_t> inputs = ids;
  return push(OpKind::Concat, std::move(inputs), Tensor(std::move(out_shape), std::move(out)),
              [ids, extents, outer, inner, total](const Graph& g, std::span<const double> gout, GradStore& grads) {
                std::size_t offset = 0;
                for (std::size_t p = 0; p < ids.size(); ++p) {
                  const std::size_t block = extents[p] * inner;
                  if (g.needs_grad(ids[p])) {
                    auto& gp = slot(grads, ids[p], outer * block);
                    for (std::size_t o = 0; o < outer; ++o)
                      for (std::size_t j = 0; j < block; ++j)
                        gp[o * block + j] += gout[o * total * inner + offset * inner + j];
                  }
                  offset += extents[p];
                }
              });
}

Var Graph::slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = shape(x);
  if (axis >= s.size() || begin >= end || end > s[axis]) {
    throw ShapeError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(s));
  }
  const std::size_t outer = numel(Shape(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(axis)));
  const std::size_t inner = numel(Shape(s.begin() + static_cast<std::ptrdiff_t>(axis) + 1, s.end()));
  const std::size_t extent = s[axis];
  const std::size_t len = end - begin;
  Shape out_shape = s;
  out_shape[axis] = len;
  const auto xv = value(x).values();
  std::vector<double> out(outer * len * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * extent + begin) * inner, len * inner, out.data() + o * len * inner);
  }
  const std::size_t ix = x.id;
  return push(OpKind::Slice, {ix}, Tensor(std::move(out_shape), std::move(out)),
              [ix, outer, inner, extent, begin, len](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                auto& gx = slot(grads, ix, outer * extent * inner);
                for (std::size_t o = 0; o < outer; ++o)
                  for (std::size_t j = 0; j < len * inner; ++j)
                    gx[(o * extent + begin) * inner + j] += gout[o * len * inner + j];
              });
}

Var Graph::transpose(Var x, std::size_t axis_a, std::size_t axis_b) {
  const Shape& s = shape(x);
  if (axis_a >= s.size() || axis_b >= s.size()) {
    throw ShapeError("transpose: axes " + std::to_string(axis_a) + "," + std::to_string(axis_b) + " for " +
                     shape_str(s));
  }
  Shape out_shape = s;
  std::swap(out_shape[axis_a], out_shape[axis_b]);
  const auto in_strides = strides_of(s);
  // source stride for each output axis
  std::vector<std::size_t> src_strides = in_strides;
  std::swap(src_strides[axis_a], src_strides[axis_b]);
  const std::size_t n = numel(s);
  std::vector<std::size_t> src(n);
  std::vector<std::size_t> idx(s.size(), 0);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) off += idx[d] * src_strides[d];
    src[flat] = off;
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  const auto xv = value(x).values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
  const std::size_t ix = x.id;
  return push(OpKind::Transpose, {ix}, Tensor(std::move(out_shape), std::move(out)),
              [ix, src = std::move(src)](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                auto& gx = slot(grads, ix, src.size());
                for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += gout[i];
              });
}

Var Graph::masked_fill(Var x, std::vector<std::uint8_t> mask, const Shape& mask_shape, double fill) {
  const Shape& s = shape(x);
  if (numel(mask_shape) != mask.size()) throw ShapeError("masked-fill: mask size does not match its shape");
  if (mask_shape.size() > s.size() ||
      !std::equal(mask_shape.begin(), mask_shape.end(), s.end() - static_cast<std::ptrdiff_t>(mask_shape.size()))) {
    throw ShapeError("masked-fill: mask " + shape_str(mask_shape) + " does not match " + shape_str(s));
  }
  const auto xv = value(x).values();
  std::vector<double> out(xv.size());
  const std::size_t m = mask.size();
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = mask[i % m] ? fill : xv[i];
  const std::size_t ix = x.id;
  return push(OpKind::MaskedFill, {ix}, Tensor(s, std::move(out)),
              [ix, mask = std::move(mask)](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                auto& gx = slot(grads, ix, gout.size());
                const std::size_t m = mask.size();
                for (std::size_t i = 0; i < gout.size(); ++i)
                  if (!mask[i % m]) gx[i] += gout[i];
              });
}

Var Graph::reshape(Var x, Shape new_shape) {
  if (numel(new_shape) != value(x).size()) {
    throw ShapeError("reshape: " + shape_str(shape(x)) + " to " + shape_str(new_shape));
  }
  const auto xv = value(x).values();
  const std::size_t ix = x.id;
  return push(OpKind::Reshape, {ix}, Tensor(std::move(new_shape), std::vector<double>(xv.begin(), xv.end())),
              [ix](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                auto& gx = slot(grads, ix, gout.size());
                for (std::size_t i = 0; i < gout.size(); ++i) gx[i] += gout[i];
              });
}

Var Graph::sum(Var x) {
  const auto xv = value(x).values();
  double total = 0.0;
  for (double v : xv) total += v;
  const std::size_t ix = x.id;
  return push(OpKind::Sum, {ix}, Tensor::scalar(total),
              [ix](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                auto& gx = slot(grads, ix, g.nodes_[ix].value.size());
                for (double& v : gx) v += gout[0];
              });
}

Var Graph::softplus(Var x) {
  const auto xv = value(x).values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::max(xv[i], 0.0) + std::log1p(std::exp(-std::abs(xv[i])));
  const std::size_t ix = x.id;
  return push(OpKind::Softplus, {ix}, Tensor(shape(x), std::move(out)),
              [ix](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                const auto xv = g.nodes_[ix].value.values();
                auto& gx = slot(grads, ix, xv.size());
                for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gout[i] * sigmoid(xv[i]);
              });
}

Var Graph::relu(Var x) {
  const auto xv = value(x).values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const std::size_t ix = x.id;
  return push(OpKind::Relu, {ix}, Tensor(shape(x), std::move(out)),
              [ix](const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                const auto xv = g.nodes_[ix].value.values();
                auto& gx = slot(grads, ix, xv.size());
                for (std::size_t i = 0; i < xv.size(); ++i)
                  if (xv[i] > 0.0) gx[i] += gout[i];
              });
}

Var Graph::rope(Var x, std::vector<double> positions, double base) {
  const Shape& s = shape(x);
  if (s.size() != 4) throw ShapeError("rope: expects [batch, seq, heads, head_dim], got " + shape_str(s));
  const std::size_t bs = s[0] * s[1], h = s[2], d = s[3];
  if (d % 2 != 0) throw ShapeError("rope: head_dim must be even, got " + std::to_string(d));
  if (positions.size() != bs) throw ShapeError("rope: need one position per token");
  if (!(base > 0.0)) throw ValueError("rope: base must be positive");
  const std::size_t half = d / 2;
  std::vector<double> cosv(bs * half), sinv(bs * half);
  for (std::size_t t = 0; t < bs; ++t)
    for (std::size_t i = 0; i < half; ++i) {
      const double angle = positions[t] * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      cosv[t * half + i] = std::cos(angle);
      sinv[t * half + i] = std::sin(angle);
    }
  const auto xv = value(x).values();
  std::vector<double> out(xv.size());
  for (std::size_t t = 0; t < bs; ++t)
    for (std::size_t hh = 0; hh < h; ++hh)
      for (std::size_t i = 0; i < half; ++i) {
        const std::size_t o = (t * h + hh) * d + 2 * i;
        const double c = cosv[t * half + i], sn = sinv[t * half + i];
        out[o] = xv[o] * c - xv[o + 1] * sn;
        out[o + 1] = xv[o] * sn + xv[o + 1] * c;
      }
  const std::size_t ix = x.id;
  return push(OpKind::Rope, {ix}, Tensor(s, std::move(out)),
              [ix, bs, h, d, half, cosv = std::move(cosv), sinv = std::move(sinv)](
                  const Graph& g, std::span<const double> gout, GradStore& grads) {
                if (!g.needs_grad(ix)) return;
                auto& gx = slot(grads, ix, gout.size());
                for (std::size_t t = 0; t < bs; ++t)
                  for (std::size_t hh = 0; hh < h; ++hh)
                    for (std::size_t i = 0; i < half; ++i) {
                      const std::size_t o = (t * h + hh) * d + 2 * i;
                      const double c = cosv[t * half + i], sn = sinv[t * half + i];
                      gx[o] += gout[o] * c + gout[o + 1] * sn;
                      gx[o + 1] += -gout[o] * sn + gout[o + 1] * c;
                    }
              });
}

Gradients Graph::backward(Var loss) const {
  if (value(loss).size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(shape(loss)));
  GradStore grads(nodes_.size());
  grads[loss.id] = {1.0};
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    if (grads[id].empty() || nodes_[id].kind == OpKind::Leaf || !nodes_[id].requires_grad) continue;
    backward_[id](*this, grads[id], grads);
  }
  Gradients out;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& node = nodes_[id];
    if (node.kind != OpKind::Leaf || !node.requires_grad) continue;
    out.ids_.push_back(id);
    if (grads[id].empty()) {
      out.grads_.push_back(Tensor::zeros(node.value.shape()));
    } else {
      out.grads_.emplace_back(node.value.shape(), std::move(grads[id]));
    }
  }
  return out;
}

double grad_check(const GraphFunction& fn, const std::vector<Tensor>& point, const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ValueError("grad_check: step must be positive");
  auto evaluate = [&](const std::vector<Tensor>& at) {
    Graph g;
    std::vector<Var> leaves;
    for (const Tensor& t : at) leaves.push_back(g.constant(t));
    return g.value(fn(g, leaves)).item();
  };

  Graph g;
  std::vector<Var> leaves;
  for (const Tensor& t : point) leaves.push_back(g.param(t));
  const Var loss = fn(g, leaves);
  const Gradients grads = g.backward(loss);

  double worst = 0.0;
  std::vector<Tensor> probe = point;
  for (std::size_t t = 0; t < point.size(); ++t) {
    const Tensor& analytic = grads[leaves[t]];
    for (std::size_t i = 0; i < point[t].size(); ++i) {
      const double original = point[t][i];
      probe[t].mutable_values()[i] = original + options.step;
      const double up = evaluate(probe);
      probe[t].mutable_values()[i] = original - options.step;
      const double down = evaluate(probe);
      probe[t].mutable_values()[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      const double err = std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + options.floor);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace alignlab
