// SPDX-License-Identifier: Apache-2.0
//
// Bradley-Terry reward model on top of the decoder: a linear head on the final-token
// hidden state, pair padding and row packing with segment-isolating masks, and the
// two-stage training plan.
#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "alignlab/checkpoint.h"
#include "alignlab/model.h"
#include "alignlab/optim.h"

namespace alignlab {

inline constexpr const char* kRewardHead = "reward_head.weight";
inline constexpr std::size_t kPadToken = 0;
inline constexpr double kDefaultTargetFill = 0.75;

/// Decoder parameters plus a reward head [d_model] drawn from N(0, 1/d_model).
Checkpoint init_reward_params(const ModelConfig& config, std::uint64_t seed);

/// Head applied to the final hidden state of the last token.
double score(const ModelConfig& config, const Checkpoint& params, std::span<const std::size_t> tokens);

/// Scores [n] read at flat (row * seq + position) indices of the batch.
Var reward_scores(Graph& g, const ModelConfig& config, const BoundParams& params, const SequenceBatch& batch,
                  std::span<const std::size_t> flat_indices);

struct TokenPair {
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> rejected;
  double label = 1.0;
};

/// Left-pads the shorter member with kPadToken so both end at the same index.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> pad_pair(std::span<const std::size_t> chosen,
                                                                       std::span<const std::size_t> rejected);

struct PackItem {
  std::size_t pair_id = 0;
  std::size_t chosen_length = 0;
  std::size_t rejected_length = 0;

  std::size_t padded_length() const { return std::max(chosen_length, rejected_length); }
  /// Both members at the padded length.
  std::size_t footprint() const { return 2 * padded_length(); }
};

std::vector<PackItem> pack_items(std::span<const TokenPair> pairs);

enum class PairMember { Chosen, Rejected };

struct PackedSegment {
  std::size_t pair_id = 0;
  PairMember member = PairMember::Chosen;
  std::size_t start = 0;
  std::size_t pad = 0;
  std::size_t length = 0;

  std::size_t end() const { return start + pad + length; }
  std::size_t last_token() const { return end() - 1; }
};

struct PackedRow {
  std::size_t capacity = 0;
  std::vector<PackedSegment> segments;
  std::vector<std::size_t> pair_ids;
  /// 1 / pairs in this row, applied to every pair's loss.
  double loss_weight = 0.0;

  std::size_t used() const;
  double fill() const { return static_cast<double>(used()) / static_cast<double>(capacity); }
};

struct PackingResult {
  std::vector<PackedRow> rows;
  double target_fill = kDefaultTargetFill;
  double mean_fill = 0.0;
  std::size_t rows_below_target = 0;
};

/// First-fit-decreasing into the fewest rows for which the pairs-per-row counts can be
/// kept within one of each other. When the greedy pass fails for a row count, a bounded
/// backtracking search is tried before adding a row.
PackingResult pack_pairs(std::span<const PackItem> items, std::size_t capacity,
                         double target_fill = kDefaultTargetFill);

/// [capacity, capacity], 1 = blocked. Real tokens see earlier real tokens of their own
/// segment; every pad position sees only itself.
std::vector<std::uint8_t> packed_mask(const PackedRow& row);

/// One-row batch for a packed row: each segment gets its own document id, every pad its
/// own id, and positions restart at 0 on each segment's first real token.
SequenceBatch packed_sequence(const PackedRow& row, std::span<const TokenPair> pairs);

/// Sum over rows and pairs of loss_weight * bt_rm_loss(chosen, rejected, label).
Var packed_rm_loss(Graph& g, const ModelConfig& config, const BoundParams& params,
                   std::span<const PackedRow> rows, std::span<const TokenPair> pairs);

struct LabelPolicy {
  double tie = 0.5;
  double gold = 0.999;
  /// Piecewise map from a rating gap to a soft label; empty is the identity.
  std::vector<std::pair<double, double>> rating_map;

  double label_for_rating(double rating) const;
};

struct RmStage {
  std::string name;
  std::string pool;
  std::uint64_t sample_count = 0;
  std::size_t batch_size = 0;
  std::size_t epochs = 1;
  SchedulePlan schedule;
};

struct StagePlan {
  std::vector<RmStage> stages;
  LabelPolicy labels;

  /// Exactly two stages, in order.
  void validate() const;
};

StagePlan build_stage_plan();

struct RmTrainOptions {
  std::size_t steps = 50;
  std::size_t capacity = 32;
  SchedulePlan schedule;
};

struct RmTrainResult {
  Checkpoint params;
  std::vector<double> loss_trace;
  double accuracy = 0.0;
  double mean_fill = 0.0;
};

/// Full-batch training over all packed rows; accuracy is the share of pairs whose chosen
/// member outscores the rejected one after training.
RmTrainResult train_reward_model(const ModelConfig& config, Checkpoint params, std::span<const TokenPair> pairs,
                                 const RmTrainOptions& options);

}  // namespace alignlab
