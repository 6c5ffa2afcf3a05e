// SPDX-License-Identifier: Apache-2.0
#include "alignlab/reward_model.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "alignlab/errors.h"
#include "alignlab/rng.h"

namespace alignlab {

Checkpoint init_reward_params(const ModelConfig& config, std::uint64_t seed) {
  Checkpoint params = init_params(config, seed);
  // A separate stream so the decoder weights match init_params(config, seed) exactly.
  Rng rng(seed ^ 0x5265776172644864ULL);
  std::vector<double> head(config.d_model);
  const double sd = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (double& v : head) v = sd * rng.normal();
  params.insert(kRewardHead, Tensor({config.d_model}, std::move(head)));
  params.provenance = "init_reward_params";
  return params;
}

Var reward_scores(Graph& g, const ModelConfig& config, const BoundParams& params, const SequenceBatch& batch,
                  std::span<const std::size_t> flat_indices) {
  if (flat_indices.empty()) throw ValueError("reward_scores: no positions requested");
  Var hidden = model_hidden(g, config, params, batch);
  Var flat = g.reshape(hidden, Shape{batch.batch * batch.seq, config.d_model});
  Var picked = g.embed(flat, std::vector<std::size_t>(flat_indices.begin(), flat_indices.end()),
                       Shape{flat_indices.size()});
  Var head = g.reshape(params[kRewardHead], Shape{config.d_model, 1});
  return g.reshape(g.matmul(picked, head), Shape{flat_indices.size()});
}

double score(const ModelConfig& config, const Checkpoint& params, std::span<const std::size_t> tokens) {
  if (tokens.empty()) throw ValueError("score: empty sequence");
  validate_params(config, params);
  if (!params.contains(kRewardHead)) throw ValueError("score: parameters have no '" + std::string(kRewardHead) + "'");
  const SequenceBatch batch = SequenceBatch::from_tokens(1, tokens.size(), {tokens.begin(), tokens.end()});
  Graph g;
  BoundParams bound(g, params, false);
  const std::size_t last = tokens.size() - 1;
  return g.value(reward_scores(g, config, bound, batch, std::span<const std::size_t>(&last, 1))).item();
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> pad_pair(std::span<const std::size_t> chosen,
                                                                       std::span<const std::size_t> rejected) {
  const std::size_t len = std::max(chosen.size(), rejected.size());
  auto pad = [len](std::span<const std::size_t> s) {
    std::vector<std::size_t> out(len - s.size(), kPadToken);
    out.insert(out.end(), s.begin(), s.end());
    return out;
  };
  return {pad(chosen), pad(rejected)};
}

std::vector<PackItem> pack_items(std::span<const TokenPair> pairs) {
  std::vector<PackItem> items;
  items.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) items.push_back({i, pairs[i].chosen.size(), pairs[i].rejected.size()});
  return items;
}

std::size_t PackedRow::used() const {
  std::size_t total = 0;
  for (const auto& s : segments) total += s.pad + s.length;
  return total;
}

namespace {

struct Assignment {
  std::vector<std::vector<std::size_t>> rows;  // indices into items
  std::vector<std::size_t> load;
};

// FFD under a per-row count cap, then moves items into rows below the floor count.
bool try_pack(std::span<const PackItem> items, const std::vector<std::size_t>& order, std::size_t capacity,
              std::size_t n_rows, Assignment& out) {
  const std::size_t n = items.size();
  const std::size_t hi = (n + n_rows - 1) / n_rows;
  const std::size_t lo = n / n_rows;
  out.rows.assign(n_rows, {});
  out.load.assign(n_rows, 0);
  for (std::size_t idx : order) {
    const std::size_t fp = items[idx].footprint();
    bool placed = false;
    for (std::size_t r = 0; r < n_rows && !placed; ++r) {
      if (out.rows[r].size() < hi && out.load[r] + fp <= capacity) {
        out.rows[r].push_back(idx);
        out.load[r] += fp;
        placed = true;
      }
    }
    if (!placed) return false;
  }
  for (std::size_t r = 0; r < n_rows; ++r) {
    while (out.rows[r].size() < lo) {
      // Smallest movable item from any row holding more than the floor.
      std::size_t best_row = n_rows, best_pos = 0, best_fp = capacity + 1;
      for (std::size_t d = 0; d < n_rows; ++d) {
        if (d == r || out.rows[d].size() <= lo) continue;
        for (std::size_t p = 0; p < out.rows[d].size(); ++p) {
          const std::size_t fp = items[out.rows[d][p]].footprint();
          if (out.load[r] + fp <= capacity && fp < best_fp) {
            best_row = d;
            best_pos = p;
            best_fp = fp;
          }
        }
      }
      if (best_row == n_rows) return false;
      const std::size_t idx = out.rows[best_row][best_pos];
      out.rows[best_row].erase(out.rows[best_row].begin() + static_cast<std::ptrdiff_t>(best_pos));
      out.load[best_row] -= best_fp;
      out.rows[r].push_back(idx);
      out.load[r] += best_fp;
    }
  }
  return true;
}

// Backtracking over row choices in FFD order, for instances where the greedy pass
// misses a feasible balanced assignment. Gives up after `budget` placements.
bool search_pack(std::span<const PackItem> items, const std::vector<std::size_t>& order, std::size_t capacity,
                 std::size_t n_rows, std::size_t budget, Assignment& out) {
  const std::size_t n = items.size();
  const std::size_t hi = (n + n_rows - 1) / n_rows;
  const std::size_t lo = n / n_rows;
  out.rows.assign(n_rows, {});
  out.load.assign(n_rows, 0);
  std::size_t spent = 0;
  std::size_t short_rows = n_rows;  // rows still below the floor count
  auto go = [&](auto&& self, std::size_t i) -> bool {
    if (i == n) return short_rows == 0;
    // Remaining items must be able to lift every short row to the floor.
    std::size_t deficit = 0;
    for (const auto& r : out.rows) deficit += r.size() < lo ? lo - r.size() : 0;
    if (deficit > n - i) return false;
    const std::size_t idx = order[i];
    const std::size_t fp = items[idx].footprint();
    std::vector<std::pair<std::size_t, std::size_t>> tried;
    for (std::size_t r = 0; r < n_rows; ++r) {
      if (out.rows[r].size() >= hi || out.load[r] + fp > capacity) continue;
      const std::pair<std::size_t, std::size_t> key{out.load[r], out.rows[r].size()};
      if (std::find(tried.begin(), tried.end(), key) != tried.end()) continue;
      tried.push_back(key);
      if (++spent > budget) return false;
      const bool was_short = out.rows[r].size() < lo;
      out.rows[r].push_back(idx);
      out.load[r] += fp;
      if (was_short && out.rows[r].size() == lo) --short_rows;
      if (self(self, i + 1)) return true;
      if (was_short && out.rows[r].size() == lo) ++short_rows;
      out.rows[r].pop_back();
      out.load[r] -= fp;
    }
    return false;
  };
  if (lo == 0) short_rows = 0;
  return go(go, 0);
}

constexpr std::size_t kSearchBudget = 200'000;

}  // namespace

PackingResult pack_pairs(std::span<const PackItem> items, std::size_t capacity, double target_fill) {
  if (capacity == 0) throw ValueError("pack_pairs: capacity must be positive");
  if (!(target_fill > 0.0 && target_fill <= 1.0)) throw ValueError("pack_pairs: target fill outside (0, 1]");
  PackingResult result;
  result.target_fill = target_fill;
  if (items.empty()) return result;

  std::size_t total = 0;
  for (const PackItem& it : items) {
    if (it.chosen_length == 0 || it.rejected_length == 0) {
      throw ValueError("pack_pairs: pair " + std::to_string(it.pair_id) + " has an empty member");
    }
    if (it.footprint() > capacity) {
      throw ValueError("pack_pairs: pair " + std::to_string(it.pair_id) + " needs " + std::to_string(it.footprint()) +
                       " tokens but a row holds " + std::to_string(capacity));
    }
    total += it.footprint();
  }
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].footprint() > items[b].footprint(); });

  Assignment assignment;
  std::size_t n_rows = std::max<std::size_t>(1, (total + capacity - 1) / capacity);
  while (!try_pack(items, order, capacity, n_rows, assignment) &&
         !search_pack(items, order, capacity, n_rows, kSearchBudget, assignment)) {
    ++n_rows;
  }

  std::size_t used = 0;
  for (const auto& members : assignment.rows) {
    PackedRow row;
    row.capacity = capacity;
    std::size_t cursor = 0;
    for (std::size_t idx : members) {
      const PackItem& it = items[idx];
      const std::size_t len = it.padded_length();
      row.pair_ids.push_back(it.pair_id);
      row.segments.push_back({it.pair_id, PairMember::Chosen, cursor, len - it.chosen_length, it.chosen_length});
      cursor += len;
      row.segments.push_back({it.pair_id, PairMember::Rejected, cursor, len - it.rejected_length, it.rejected_length});
      cursor += len;
    }
    row.loss_weight = 1.0 / static_cast<double>(members.size());
    used += row.used();
    if (row.fill() < target_fill) ++result.rows_below_target;
    result.rows.push_back(std::move(row));
  }
  result.mean_fill = static_cast<double>(used) / static_cast<double>(capacity * result.rows.size());
  return result;
}

std::vector<std::uint8_t> packed_mask(const PackedRow& row) {
  const std::size_t cap = row.capacity;
  std::vector<std::uint8_t> mask(cap * cap, 1);
  for (std::size_t i = 0; i < cap; ++i) mask[i * cap + i] = 0;
  for (const PackedSegment& s : row.segments) {
    const std::size_t first = s.start + s.pad;
    for (std::size_t q = first; q < s.end(); ++q)
      for (std::size_t k = first; k <= q; ++k) mask[q * cap + k] = 0;
  }
  return mask;
}

SequenceBatch packed_sequence(const PackedRow& row, std::span<const TokenPair> pairs) {
  SequenceBatch batch;
  batch.batch = 1;
  batch.seq = row.capacity;
  batch.token_ids.assign(row.capacity, kPadToken);
  batch.doc_ids.assign(row.capacity, 0);
  batch.positions.assign(row.capacity, 0.0);
  std::size_t doc = 0;
  std::size_t cursor = 0;
  auto pad_until = [&](std::size_t stop) {
    for (; cursor < stop; ++cursor) batch.doc_ids[cursor] = doc++;
  };
  for (const PackedSegment& s : row.segments) {
    if (s.pair_id >= pairs.size()) throw ValueError("packed_sequence: unknown pair " + std::to_string(s.pair_id));
    const TokenPair& p = pairs[s.pair_id];
    const std::vector<std::size_t>& tokens = s.member == PairMember::Chosen ? p.chosen : p.rejected;
    if (tokens.size() != s.length) throw ValueError("packed_sequence: segment length disagrees with its pair");
    pad_until(s.start + s.pad);
    for (std::size_t i = 0; i < s.length; ++i, ++cursor) {
      batch.token_ids[cursor] = tokens[i];
      batch.doc_ids[cursor] = doc;
      batch.positions[cursor] = static_cast<double>(i);
    }
    ++doc;
  }
  pad_until(row.capacity);
  return batch;
}

Var packed_rm_loss(Graph& g, const ModelConfig& config, const BoundParams& params, std::span<const PackedRow> rows,
                   std::span<const TokenPair> pairs) {
  if (rows.empty()) throw ValueError("packed_rm_loss: no rows");
  const std::size_t cap = rows.front().capacity;
  SequenceBatch batch;
  batch.batch = rows.size();
  batch.seq = cap;
  std::vector<std::size_t> indices;
  std::vector<double> w_pos, w_neg;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].capacity != cap) throw ValueError("packed_rm_loss: rows differ in capacity");
    const SequenceBatch one = packed_sequence(rows[r], pairs);
    batch.token_ids.insert(batch.token_ids.end(), one.token_ids.begin(), one.token_ids.end());
    // Offset doc ids so rows stay distinct and non-decreasing.
    const std::size_t offset = batch.doc_ids.empty() ? 0 : batch.doc_ids.back() + 1;
    for (std::size_t d : one.doc_ids) batch.doc_ids.push_back(d + offset);
    batch.positions.insert(batch.positions.end(), one.positions.begin(), one.positions.end());
    const auto& segs = rows[r].segments;
    for (std::size_t s = 0; s + 1 < segs.size(); s += 2) {
      indices.push_back(r * cap + segs[s].last_token());
      indices.push_back(r * cap + segs[s + 1].last_token());
      const double label = pairs[segs[s].pair_id].label;
      if (!(label >= 0.0 && label <= 1.0)) throw ValueError("packed_rm_loss: label outside [0, 1]");
      w_pos.push_back(rows[r].loss_weight * label);
      w_neg.push_back(rows[r].loss_weight * (1.0 - label));
    }
  }
  const std::size_t n_pairs = w_pos.size();
  Var scores = g.reshape(reward_scores(g, config, params, batch, indices), Shape{n_pairs, 2});
  Var margin = g.add(g.slice(scores, 1, 0, 1), g.scale(g.slice(scores, 1, 1, 2), -1.0));  // [P, 1]
  Var lose = g.mul(g.softplus(g.scale(margin, -1.0)), g.constant(Tensor({n_pairs, 1}, std::move(w_pos))));
  Var flip = g.mul(g.softplus(margin), g.constant(Tensor({n_pairs, 1}, std::move(w_neg))));
  return g.add(g.sum(lose), g.sum(flip));
}

double LabelPolicy::label_for_rating(double rating) const {
  if (rating_map.empty()) {
    if (!(rating >= 0.0 && rating <= 1.0)) throw ValueError("label policy: identity map needs a rating in [0, 1]");
    return rating;
  }
  if (rating <= rating_map.front().first) return rating_map.front().second;
  if (rating >= rating_map.back().first) return rating_map.back().second;
  for (std::size_t i = 1; i < rating_map.size(); ++i) {
    const auto& [x1, y1] = rating_map[i];
    if (rating <= x1) {
      const auto& [x0, y0] = rating_map[i - 1];
      return y0 + (y1 - y0) * (rating - x0) / (x1 - x0);
    }
  }
  return rating_map.back().second;
}

void StagePlan::validate() const {
  if (stages.size() != 2) throw ValueError("stage plan: exactly two stages required");
  for (const RmStage& s : stages) {
    if (s.batch_size == 0 || s.sample_count == 0) throw ValueError("stage plan: empty stage '" + s.name + "'");
    s.schedule.validate();
  }
  for (std::size_t i = 1; i < labels.rating_map.size(); ++i) {
    if (!(labels.rating_map[i].first > labels.rating_map[i - 1].first)) {
      throw ValueError("stage plan: rating map must be strictly increasing");
    }
  }
}

StagePlan build_stage_plan() {
  auto stage = [](std::string name, std::string pool, std::uint64_t samples, std::size_t batch, double peak) {
    RmStage s;
    s.name = std::move(name);
    s.pool = std::move(pool);
    s.sample_count = samples;
    s.batch_size = batch;
    s.epochs = 1;
    s.schedule.kind = ScheduleKind::Cosine;
    s.schedule.peak = peak;
    s.schedule.end = 0.0;
    s.schedule.steps = static_cast<std::size_t>((samples + batch - 1) / batch);
    return s;
  };
  StagePlan plan;
  plan.stages.push_back(stage("stage-1", "relabelled-lower-quality", 4'000'000, 1024, 4e-5));
  plan.stages.push_back(stage("stage-2", "high-quality", 350'000, 16, 3e-6));
  plan.validate();
  return plan;
}

RmTrainResult train_reward_model(const ModelConfig& config, Checkpoint params, std::span<const TokenPair> pairs,
                                 const RmTrainOptions& options) {
  if (pairs.empty()) throw ValueError("train_reward_model: no pairs");
  if (!params.contains(kRewardHead)) throw ValueError("train_reward_model: parameters have no reward head");
  validate_params(config, params);
  if (options.capacity > config.max_seq) throw ValueError("train_reward_model: row capacity exceeds max_seq");
  const PackingResult packing = pack_pairs(pack_items(pairs), options.capacity);

  SchedulePlan plan = options.schedule;
  plan.steps = std::max<std::size_t>(options.steps, 1);
  AdamW opt(plan);
  RmTrainResult result;
  result.mean_fill = packing.mean_fill;
  const double inv_rows = 1.0 / static_cast<double>(packing.rows.size());
  for (std::size_t step = 0; step < options.steps; ++step) {
    try {
      Graph g;
      BoundParams bound(g, params, true);
      Var loss = g.scale(packed_rm_loss(g, config, bound, packing.rows, pairs), inv_rows);
      result.loss_trace.push_back(g.value(loss).item());
      opt.step(params, bound, g.backward(loss));
    } catch (const NonFiniteError& e) {
      throw NumericError(std::string("train_reward_model: ") + e.what(), step);
    }
  }

  std::size_t correct = 0;
  for (const TokenPair& p : pairs) correct += score(config, params, p.chosen) > score(config, params, p.rejected);
  result.accuracy = static_cast<double>(correct) / static_cast<double>(pairs.size());
  params.step += options.steps;
  params.provenance = "train_reward_model";
  result.params = std::move(params);
  return result;
}

}  // namespace alignlab
