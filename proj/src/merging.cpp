// SPDX-License-Identifier: Apache-2.0
#include "alignlab/merging.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "alignlab/errors.h"
#include "alignlab/model.h"

namespace alignlab {

namespace {

// Correctly rounded sum (Shewchuk partials), so merge results do not depend on input order.
double exact_sum(std::span<const double> terms) {
  std::vector<double> partials;
  for (double x : terms) {
    std::size_t used = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[used++] = lo;
      x = hi;
    }
    partials.resize(used);
    partials.push_back(x);
  }
  if (partials.empty()) return 0.0;
  // Sum the partials from the top, with the half-way correction for round-to-even.
  std::size_t n = partials.size();
  double hi = partials[--n];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials[--n];
    hi = x + y;
    const double yr = hi - x;
    lo = y - yr;
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

double weight_sum(std::span<const double> weights) { return exact_sum(weights); }

std::string weights_str(std::span<const double> weights) {
  std::ostringstream os;
  os.precision(17);
  os << "(";
  for (std::size_t i = 0; i < weights.size(); ++i) os << (i ? ", " : "") << weights[i];
  os << ")";
  return os.str();
}

void check_schema(const Checkpoint& reference, const Checkpoint& other, std::size_t index) {
  for (const auto& [name, t] : reference.entries()) {
    if (!other.contains(name)) {
      throw ShapeError("merge: input " + std::to_string(index) + " has no parameter '" + name + "'");
    }
    if (other.at(name).shape() != t.shape()) {
      throw ShapeError("merge: parameter '" + name + "' is " + shape_str(other.at(name).shape()) + " in input " +
                       std::to_string(index) + " but " + shape_str(t.shape()) + " in input 0");
    }
  }
  if (other.size() != reference.size()) {
    throw ShapeError("merge: input " + std::to_string(index) + " has extra parameters");
  }
}

}  // namespace

void validate_merge_weights(std::span<const double> weights) {
  for (double w : weights) {
    if (!std::isfinite(w)) throw ValueError("merge spec: non-finite weight");
  }
  const double total = weight_sum(weights);
  if (std::abs(total - 1.0) > kMergeWeightTolerance) {
    std::ostringstream os;
    os.precision(17);
    os << "merge spec: weights " << weights_str(weights) << " sum to " << total << ", not 1";
    throw ValueError(os.str());
  }
}

void MergeSpec::validate() const {
  if (inputs.empty()) throw ValueError("merge spec: no inputs");
  if (inputs.size() != weights.size()) {
    throw ValueError("merge spec: " + std::to_string(inputs.size()) + " inputs but " + std::to_string(weights.size()) +
                     " weights");
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i]) throw ValueError("merge spec: input " + std::to_string(i) + " is null");
  }
  validate_merge_weights(weights);
}

Checkpoint linear_merge(const MergeSpec& spec) {
  spec.validate();
  const Checkpoint& first = *spec.inputs[0];
  for (std::size_t i = 1; i < spec.inputs.size(); ++i) check_schema(first, *spec.inputs[i], i);

  Checkpoint out;
  out.provenance = "linear_merge" + weights_str(spec.weights);
  std::vector<double> terms(spec.inputs.size());
  for (const auto& [name, t] : first.entries()) {
    std::vector<const Tensor*> sources;
    for (const auto& in : spec.inputs) sources.push_back(&in->at(name));
    std::vector<double> values(t.size());
    for (std::size_t e = 0; e < values.size(); ++e) {
      for (std::size_t i = 0; i < sources.size(); ++i) terms[i] = spec.weights[i] * (*sources[i])[e];
      values[e] = exact_sum(terms);
    }
    out.insert(name, Tensor(t.shape(), std::move(values)));
  }
  return out;
}

MergeTree MergeTree::of(std::shared_ptr<const Checkpoint> checkpoint) {
  MergeTree t;
  t.leaf = std::move(checkpoint);
  return t;
}

MergeTree MergeTree::node(std::vector<MergeTree> children, std::vector<double> weights) {
  MergeTree t;
  t.children = std::move(children);
  t.weights = std::move(weights);
  return t;
}

namespace {

void check_tree_node(const MergeTree& tree) {
  if (tree.leaf) {
    if (!tree.children.empty() || !tree.weights.empty()) throw ValueError("merge tree: leaf with children");
    return;
  }
  if (tree.children.empty()) throw ValueError("merge tree: internal node without children");
  if (tree.children.size() != tree.weights.size()) throw ValueError("merge tree: children/weights length mismatch");
}

void flatten(const MergeTree& tree, double scale, MergeSpec& out) {
  check_tree_node(tree);
  if (tree.leaf) {
    out.inputs.push_back(tree.leaf);
    out.weights.push_back(scale);
    return;
  }
  if (std::abs(weight_sum(tree.weights) - 1.0) > kMergeWeightTolerance) {
    throw ValueError("merge tree: node weights " + weights_str(tree.weights) + " do not sum to 1");
  }
  for (std::size_t i = 0; i < tree.children.size(); ++i) flatten(tree.children[i], scale * tree.weights[i], out);
}

}  // namespace

Checkpoint evaluate_tree(const MergeTree& tree) {
  check_tree_node(tree);
  if (tree.leaf) return *tree.leaf;
  MergeSpec spec;
  spec.weights = tree.weights;
  for (const MergeTree& c : tree.children) spec.inputs.push_back(std::make_shared<const Checkpoint>(evaluate_tree(c)));
  return linear_merge(spec);
}

MergeSpec compose_merge(const MergeTree& tree) {
  MergeSpec out;
  flatten(tree, 1.0, out);
  out.validate();
  return out;
}

Checkpoint polyak_average(std::span<const std::shared_ptr<const Checkpoint>> trajectory) {
  if (trajectory.empty()) throw ValueError("polyak_average: empty trajectory");
  MergeSpec spec;
  spec.inputs.assign(trajectory.begin(), trajectory.end());
  spec.weights.assign(trajectory.size(), 1.0 / static_cast<double>(trajectory.size()));
  // 1/n need not sum back to exactly 1 in floating point; fold the residue into the first weight.
  spec.weights[0] += 1.0 - weight_sum(spec.weights);
  Checkpoint out = linear_merge(spec);
  out.provenance = "polyak_average(" + std::to_string(trajectory.size()) + ")";
  out.step = trajectory.back()->step;
  return out;
}

Checkpoint interpolate_to_parent(const Checkpoint& child, const Checkpoint& parent, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ValueError("interpolate_to_parent: alpha must lie in [0, 1]");
  check_schema(child, parent, 1);
  Checkpoint out;
  out.provenance = "interpolate_to_parent(" + std::to_string(alpha) + ")";
  out.step = child.step;
  for (const auto& [name, c] : child.entries()) {
    const Tensor& p = parent.at(name);
    std::vector<double> values(c.size());
    // parent + alpha * (child - parent) hits both endpoints exactly.
    for (std::size_t e = 0; e < values.size(); ++e) {
      values[e] = alpha == 1.0 ? c[e] : p[e] + alpha * (c[e] - p[e]);
    }
    out.insert(name, Tensor(c.shape(), std::move(values)));
  }
  return out;
}

MergeSpec leave_one_out(const MergeSpec& spec, std::size_t excluded) {
  spec.validate();
  if (spec.inputs.size() < 2) throw ValueError("leave_one_out: cannot exclude the only expert");
  if (excluded >= spec.inputs.size()) throw ValueError("leave_one_out: excluded index out of range");
  MergeSpec out;
  std::vector<double> kept;
  for (std::size_t i = 0; i < spec.inputs.size(); ++i) {
    if (i == excluded) continue;
    out.inputs.push_back(spec.inputs[i]);
    kept.push_back(spec.weights[i]);
  }
  const double total = weight_sum(kept);
  if (!(total > 0.0)) throw ValueError("leave_one_out: remaining weights sum to zero");
  for (double& w : kept) w /= total;
  kept[0] += 1.0 - weight_sum(kept);
  out.weights = std::move(kept);
  out.validate();
  return out;
}

PerturbResult perturb_search(const MergeSpec& base, double step, const MergeEvaluator& evaluator) {
  if (!(step > 0.0)) throw ValueError("perturb_search: step must be positive");
  base.validate();
  for (double w : base.weights) {
    if (w < 0.0) throw ValueError("perturb_search: base weights must be nonnegative");
  }
  const std::size_t n = base.weights.size();

  std::vector<PerturbCandidate> candidates;
  PerturbResult result;
  auto consider = [&](std::size_t id, std::string label, std::vector<double> weights) {
    for (double w : weights) {
      if (w < 0.0 || w > 1.0) {
        result.skipped.push_back(label);
        return;
      }
    }
    MergeSpec spec{base.inputs, weights};
    try {
      spec.validate();
    } catch (const ValueError&) {
      result.skipped.push_back(label);
      return;
    }
    PerturbCandidate c;
    c.id = id;
    c.label = std::move(label);
    c.weights = std::move(weights);
    c.scores = evaluator(linear_merge(spec));
    if (c.scores.empty()) throw ValueError("perturb_search: evaluator returned no scores");
    for (const auto& [_, v] : c.scores) c.score += v;
    c.score /= static_cast<double>(c.scores.size());
    candidates.push_back(std::move(c));
  };

  consider(0, "base", base.weights);
  for (std::size_t i = 0; i < n; ++i) {
    for (int sign : {+1, -1}) {
      const double target = base.weights[i] + sign * step;
      const std::string label = "expert " + std::to_string(i) + (sign > 0 ? " +" : " -") + std::to_string(step);
      const double rest = 1.0 - base.weights[i];
      std::vector<double> w(n);
      if (n == 1 || rest <= 0.0) {
        result.skipped.push_back(label);
        continue;
      }
      for (std::size_t j = 0; j < n; ++j) w[j] = j == i ? target : base.weights[j] * (1.0 - target) / rest;
      // Absorb rounding so the candidate sums to 1 within tolerance.
      const double residue = 1.0 - weight_sum(w);
      w[i] += residue;
      consider(2 * i + (sign > 0 ? 1 : 2), label, std::move(w));
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const PerturbCandidate& a, const PerturbCandidate& b) { return a.score > b.score; });
  result.ranked = std::move(candidates);
  return result;
}

Checkpoint selective_embedding_merge(const Checkpoint& base, const Checkpoint& donor,
                                     std::span<const std::size_t> token_ids) {
  const std::string key = param_names::kEmbedding;
  if (!base.contains(key)) throw ValueError("selective_embedding_merge: base has no '" + key + "'");
  if (!donor.contains(key)) throw ValueError("selective_embedding_merge: donor has no '" + key + "'");
  const Tensor& b = base.at(key);
  const Tensor& d = donor.at(key);
  if (b.shape() != d.shape() || b.rank() != 2) {
    throw ShapeError("selective_embedding_merge: embedding shapes " + shape_str(b.shape()) + " and " +
                     shape_str(d.shape()));
  }
  const std::size_t vocab = b.shape()[0], dim = b.shape()[1];
  Checkpoint out = base;
  std::span<double> rows = out.at(key).mutable_values();
  for (std::size_t id : token_ids) {
    if (id >= vocab) throw ValueError("selective_embedding_merge: token id " + std::to_string(id) + " out of range");
    std::copy_n(d.values().begin() + static_cast<std::ptrdiff_t>(id * dim), dim,
                rows.begin() + static_cast<std::ptrdiff_t>(id * dim));
  }
  out.provenance = "selective_embedding_merge";
  return out;
}

}  // namespace alignlab
