// SPDX-License-Identifier: Apache-2.0
//
// Persistence: the single-file checkpoint format, run configurations, preset
// serialization and metric files.
//
// Checkpoint layout:
//   line 1   "alignlab-checkpoint"
//   line 2   manifest length in bytes, decimal
//   manifest JSON object: format_version, dtype ("f64le"), metadata
//            {provenance, step}, tensors [{name, shape, offset, count}],
//            body_bytes
//   body     little-endian IEEE-754 doubles; tensor i occupies
//            [offset_i, offset_i + 8 * count_i)
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "alignlab/checkpoint.h"
#include "alignlab/model.h"
#include "alignlab/optim.h"
#include "alignlab/presets.h"
#include "alignlab/shard_cost.h"

namespace alignlab {

inline constexpr int kCheckpointFormatVersion = 1;

/// Serialize with tensors in `order` (a permutation of the checkpoint's names);
/// an empty order keeps insertion order.
std::string encode_checkpoint(const Checkpoint& ckpt, std::span<const std::string> order = {});
/// Throws FormatError on a bad magic line, unknown version or dtype, offsets
/// that overlap, leave gaps or run past the body, and bodies of the wrong size.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::string& path, const Checkpoint& ckpt, std::span<const std::string> order = {});
Checkpoint load_checkpoint(const std::string& path);

/// Write to a sibling temporary file, then rename over `path`.
void write_file_atomic(const std::string& path, std::string_view contents);
std::string read_file(const std::string& path);

// --- run configuration -----------------------------------------------------------

struct ObjectiveSection {
  /// dpo, ipo or slic for train-pref.
  std::string loss = "ipo";
  double beta = 0.1;
  double margin = 1.0;
  bool length_normalized = true;
  double sft_weight = 0.0;
  double l2_to_reference = 0.0;
  std::size_t batch_size = 16;
  bool operator==(const ObjectiveSection&) const = default;
};

struct DataSection {
  std::uint64_t task_seed = 7;
  std::size_t train_per_task = 192;
  std::size_t eval_per_task = 64;
  /// Subset of {copy, reverse, shift}; empty means all three.
  std::vector<std::string> tasks;
  std::size_t batch_size = 32;
  bool operator==(const DataSection&) const = default;
};

struct MergeSection {
  std::vector<double> weights;
  bool operator==(const MergeSection&) const = default;
};

struct SoupSection {
  std::size_t instruct_steps = 100;
  std::size_t expert_steps = 600;
  std::size_t polish_steps = 150;
  std::size_t seeds_per_expert = 1;
  double cross_domain_fraction = 0.05;
  double polish_lr_divisor = 15.0;
  bool operator==(const SoupSection&) const = default;
};

struct TabularSection {
  /// copg-optimality or srpo.
  std::string scenario = "copg-optimality";
  std::size_t instances = 5;
  std::size_t prompts = 4;
  std::size_t completions = 5;
  double beta = 0.5;
  std::size_t steps = 10000;
  bool operator==(const TabularSection&) const = default;
};

struct MeshSection {
  MeshConfig mesh;
  /// 0 means the mesh's own product.
  std::size_t devices = 0;
  std::size_t batch = 1;
  std::size_t seq = 4096;
  std::size_t bytes_per_element = 2;
  double link_bytes_per_second = 1e11;
  double flops_per_second = 1e14;
  bool parallel_block = true;
  bool operator==(const MeshSection&) const = default;
};

struct EvalSection {
  double tie_tolerance = 0.0;
  bool operator==(const EvalSection&) const = default;
};

struct RmSection {
  std::size_t pairs = 64;
  /// Packed row length; also raises the model's max_seq for train-rm.
  std::size_t capacity = 64;
  double tie_label = 0.5;
  double gold_label = 0.999;
  bool operator==(const RmSection&) const = default;
};

struct PolishSection {
  std::size_t rounds = 1;
  std::size_t best_of_n = 4;
  std::size_t generations = 2;
  double offline_beta = 0.1;
  double online_beta = 0.1;
  double temperature = 1.0;
  std::size_t prompts = 32;
  bool operator==(const PolishSection&) const = default;
};

struct InputsSection {
  /// Starting policy; empty trains from a fresh initialization.
  std::string checkpoint;
  /// Reference policy for preference training or comparison model for eval.
  std::string reference;
  /// Learned reward model used as the polish reward instead of the task checker.
  std::string reward_model;
  /// Checkpoints to merge.
  std::vector<std::string> checkpoints;
  bool operator==(const InputsSection&) const = default;
};

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string preset;
  /// Explicit schedule; wins over the preset's schedule when present.
  std::optional<SchedulePlan> schedule;
  ObjectiveSection objective;
  ModelConfig model;
  DataSection data;
  MergeSection merge;
  SoupSection soup;
  TabularSection tabular;
  MeshSection mesh;
  EvalSection eval;
  RmSection rm;
  PolishSection polish;
  InputsSection inputs;

  /// Defaults: toy model, empty command.
  RunConfig();
  bool operator==(const RunConfig&) const = default;
};

/// Throws FormatError naming the dotted path of any unknown key or wrongly
/// typed value.
RunConfig parse_run_config(std::string_view json_text);
std::string dump_run_config(const RunConfig& config);

std::string dump_preset(const Preset& preset);
Preset parse_preset(std::string_view json_text);

/// The schedule a run will use: explicit schedule, else the preset's, else
/// toy_plan-like fallback supplied by the caller.
SchedulePlan effective_schedule(const RunConfig& config, const SchedulePlan& fallback);

// --- metrics -----------------------------------------------------------------------

/// Named scalars and named series, in insertion order.
struct Metrics {
  std::vector<std::pair<std::string, double>> scalars;
  std::vector<std::pair<std::string, std::vector<double>>> series;
  std::vector<std::pair<std::string, std::string>> labels;

  void scalar(std::string name, double value) { scalars.emplace_back(std::move(name), value); }
  void add_series(std::string name, std::vector<double> values) { series.emplace_back(std::move(name), std::move(values)); }
  void label(std::string name, std::string value) { labels.emplace_back(std::move(name), std::move(value)); }
};

/// {"labels": {...}, "scalars": {...}, "series": {...}}
std::string metrics_json(const Metrics& m);
/// Header "name,index,value"; scalars use an empty index, labels are quoted.
std::string metrics_csv(const Metrics& m);
/// Shortest decimal text that parses back to the same double, '.' separator.
std::string format_double(double value);

}  // namespace alignlab
