// SPDX-License-Identifier: Apache-2.0
//
// Parameter-space checkpoint algebra: weighted linear merges and the operations built
// on them (merge trees, trajectory averaging, interpolation, leave-one-out, weight search).
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "alignlab/checkpoint.h"

namespace alignlab {

inline constexpr double kMergeWeightTolerance = 1e-12;

struct MergeSpec {
  std::vector<std::shared_ptr<const Checkpoint>> inputs;
  std::vector<double> weights;

  /// Same lengths, at least one input, finite weights summing to 1 within kMergeWeightTolerance.
  /// Never renormalizes.
  void validate() const;
};

/// Finite weights summing to 1 within kMergeWeightTolerance; the message reports the sum.
void validate_merge_weights(std::span<const double> weights);

/// sum_i w_i * theta_i for every parameter. Inputs must share one schema.
Checkpoint linear_merge(const MergeSpec& spec);

/// A merge-of-merges: either a leaf checkpoint or a weighted list of subtrees.
struct MergeTree {
  std::shared_ptr<const Checkpoint> leaf;
  std::vector<double> weights;
  std::vector<MergeTree> children;

  static MergeTree of(std::shared_ptr<const Checkpoint> checkpoint);
  static MergeTree node(std::vector<MergeTree> children, std::vector<double> weights);
};

/// Merges bottom-up, one linear_merge per internal node.
Checkpoint evaluate_tree(const MergeTree& tree);

/// Single-level spec with path-product weights; one entry per leaf occurrence.
MergeSpec compose_merge(const MergeTree& tree);

Checkpoint polyak_average(std::span<const std::shared_ptr<const Checkpoint>> trajectory);

/// alpha * child + (1 - alpha) * parent, alpha in [0, 1].
Checkpoint interpolate_to_parent(const Checkpoint& child, const Checkpoint& parent, double alpha);

/// Drops one expert and renormalizes the remaining weights.
MergeSpec leave_one_out(const MergeSpec& spec, std::size_t excluded);

using MergeEvaluator = std::function<std::map<std::string, double>(const Checkpoint&)>;

struct PerturbCandidate {
  /// 0 for the base weights, then 2i+1 for +step and 2i+2 for -step on expert i.
  std::size_t id = 0;
  std::string label;
  std::vector<double> weights;
  std::map<std::string, double> scores;
  /// Mean over the evaluator's scores; the ranking key.
  double score = 0.0;
};

struct PerturbResult {
  /// Sorted by score, highest first; ties keep candidate id order.
  std::vector<PerturbCandidate> ranked;
  /// Labels of perturbations that left the probability simplex.
  std::vector<std::string> skipped;
};

/// Moves `step` of mass onto (or off) each expert in turn, rescaling the others
/// proportionally, and scores every valid merged candidate including the base.
PerturbResult perturb_search(const MergeSpec& base, double step, const MergeEvaluator& evaluator);

/// Copy of `base` whose embedding rows for `token_ids` come from `donor`.
Checkpoint selective_embedding_merge(const Checkpoint& base, const Checkpoint& donor,
                                     std::span<const std::size_t> token_ids);

}  // namespace alignlab
