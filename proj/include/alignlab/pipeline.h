// SPDX-License-Identifier: Apache-2.0
//
// Toy-scale post-training flow: synthetic capability tasks, a generic AdamW training
// loop with SFT / preference / online CoPG objectives, best-of-N sampling, the
// polishing ping-pong, expert soups and the pairwise win-rate metric.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "alignlab/checkpoint.h"
#include "alignlab/model.h"
#include "alignlab/objectives.h"
#include "alignlab/optim.h"
#include "alignlab/rng.h"

namespace alignlab {

namespace toy {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kSep = 1;
inline constexpr std::size_t kFirstTaskToken = 2;
inline constexpr std::size_t kFirstSymbol = 8;
inline constexpr std::size_t kAlphabet = 8;
/// Symbols per input; the completion has the same length.
inline constexpr std::size_t kSymbols = 4;
inline constexpr std::size_t kPromptLength = kSymbols + 2;
inline constexpr std::size_t kExampleLength = kPromptLength + kSymbols;
inline constexpr std::size_t kShift = 3;
}  // namespace toy

/// vocab 32, d_model 32, 4 layers (3 sliding + 1 full), 4 query heads over 2 KV heads.
ModelConfig toy_model_config();

enum class TaskKind { Copy, Reverse, Shift };

const char* task_kind_name(TaskKind kind);

struct Example {
  /// Prompt followed by completion.
  std::vector<std::size_t> tokens;
  std::size_t prompt_length = 0;

  std::span<const std::size_t> prompt() const { return {tokens.data(), prompt_length}; }
  std::span<const std::size_t> completion() const {
    return {tokens.data() + prompt_length, tokens.size() - prompt_length};
  }
};

/// Prompt [task token, symbols..., SEP] followed by the task's output symbols.
Example make_example(TaskKind kind, std::span<const std::size_t> symbols);

struct TaskSpec {
  std::string name;
  /// Which expert domain the task stands in for.
  std::string capability;
  TaskKind kind = TaskKind::Copy;
  std::uint64_t seed = 0;
  std::size_t example_count = 0;
  std::vector<Example> train;
  std::vector<Example> eval;

  /// Output symbols for an input, i.e. the task's target mapping.
  std::vector<std::size_t> target(std::span<const std::size_t> symbols) const;
};

struct ToyTaskOptions {
  std::size_t train_examples = 192;
  std::size_t eval_examples = 64;
};

/// copy, reverse and shift (+3 mod alphabet); train and eval inputs are disjoint per task.
std::vector<TaskSpec> make_toy_tasks(std::uint64_t seed, const ToyTaskOptions& options = {});

/// Next-token batch: inputs are tokens[0..L-2], targets tokens[1..L-1]. Shorter examples
/// are right-padded; mask is 1 on prompt and pad targets.
struct LmBatch {
  SequenceBatch batch;
  std::vector<std::size_t> targets;
  std::vector<std::uint8_t> mask;
};

LmBatch make_lm_batch(std::span<const Example> examples, std::span<const std::size_t> indices);

/// Teacher-forced share of completion tokens whose argmax prediction is correct.
double task_accuracy(const ModelConfig& config, const Checkpoint& params, std::span<const Example> examples);

// --- training ----------------------------------------------------------------

/// Cosine peak -> peak/10 with betas 0.9/0.95, no weight decay and clipping at 1; the
/// learning rates that toy models need, far above the large-model presets.
SchedulePlan toy_plan(std::size_t steps, double peak = 3e-3);

struct RunMetrics {
  std::vector<double> loss;
  std::vector<std::pair<std::string, double>> accuracy;
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;
};

struct TrainOutcome {
  Checkpoint params;
  RunMetrics metrics;
};

/// Builds the scalar loss for one optimizer step; `current` holds the values bound in `params`.
using LossBuilder =
    std::function<Var(Graph& g, const BoundParams& params, const Checkpoint& current, std::size_t step)>;

/// plan.steps AdamW updates. A non-finite loss or gradient raises NumericError with the
/// step index.
TrainOutcome train(Checkpoint params, const SchedulePlan& plan, const LossBuilder& build);

struct SftOptions {
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  /// Each batch slot is drawn from `auxiliary` with this probability.
  double auxiliary_fraction = 0.0;
  std::vector<Example> auxiliary;
  /// coefficient * sum (theta - reference)^2 when positive.
  double l2_to_reference = 0.0;
};

TrainOutcome train_sft(const ModelConfig& config, Checkpoint params, std::span<const Example> data,
                       const SchedulePlan& plan, const SftOptions& options);

/// Per-row log-probability of each example's completion under the model, as a [n] Var.
Var completion_logprobs(Graph& g, const ModelConfig& config, const BoundParams& params,
                        std::span<const Example> examples, bool length_normalized);

/// Same quantity evaluated without a tape.
std::vector<double> completion_logprobs(const ModelConfig& config, const Checkpoint& params,
                                        std::span<const Example> examples, bool length_normalized);

struct PreferenceExample {
  Example chosen;
  Example rejected;
};

struct PrefOptions {
  PrefLoss loss = PrefLoss::Ipo;
  double beta = 0.1;
  double margin = 1.0;
  bool length_normalized = true;
  /// combined_loss weight on an SFT term over the chosen completions; 0 disables it.
  double sft_weight = 0.0;
  double l2_to_reference = 0.0;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

TrainOutcome train_preference(const ModelConfig& config, Checkpoint params, const Checkpoint& reference,
                              std::span<const PreferenceExample> pairs, const SchedulePlan& plan,
                              const PrefOptions& options);

/// Reward for a completion of a prompt.
using RewardFn = std::function<double(std::span<const std::size_t> prompt, std::span<const std::size_t> completion)>;

/// Share of completion tokens matching the task's target.
RewardFn task_reward(const std::vector<TaskSpec>& tasks);

struct SamplingOptions {
  double temperature = 1.0;
};

/// Ancestral sampling of `length` tokens after the prompt.
std::vector<std::size_t> sample_completion(const ModelConfig& config, const Checkpoint& params,
                                           std::span<const std::size_t> prompt, std::size_t length, Rng& rng,
                                           const SamplingOptions& options = {});

std::vector<std::size_t> greedy_completion(const ModelConfig& config, const Checkpoint& params,
                                           std::span<const std::size_t> prompt, std::size_t length);

/// Index of the largest value; the first one on ties.
std::size_t argmax_first(std::span<const double> values);

struct BestOfN {
  std::size_t index = 0;
  std::vector<std::size_t> completion;
  std::vector<std::vector<std::size_t>> samples;
  std::vector<double> scores;
};

BestOfN best_of_n(const ModelConfig& config, const Checkpoint& params, std::span<const std::size_t> prompt,
                  std::size_t length, const RewardFn& scorer, std::size_t n, std::uint64_t seed,
                  const SamplingOptions& options = {});

struct CopgOnlineOptions {
  std::size_t k = 2;
  double beta = 0.1;
  std::size_t prompts_per_step = 8;
  double sft_weight = 0.0;
  double l2_to_reference = 0.0;
  std::uint64_t seed = 0;
  SamplingOptions sampling;
};

/// Each step samples k completions per prompt from the current policy and minimises the
/// CoPG loss against the fixed reference.
TrainOutcome train_copg_online(const ModelConfig& config, Checkpoint params, const Checkpoint& reference,
                               std::span<const Example> prompts, const RewardFn& reward, const SchedulePlan& plan,
                               const CopgOnlineOptions& options);

// --- polishing -----------------------------------------------------------------

struct PolishConfig {
  std::size_t rounds = 1;
  std::size_t best_of_n = 4;
  std::size_t generations = 2;
  std::size_t batch_size = 16;
  double offline_beta = 0.1;
  double online_beta = 0.1;
  double l2_to_reference = 1e-3;
  double sft_weight = 0.5;
  std::uint64_t seed = 0;
  SamplingOptions sampling;
  SchedulePlan bon_plan = toy_plan(40, 1e-3);
  SchedulePlan offline_plan = toy_plan(30, 3e-4);
  SchedulePlan online_plan = toy_plan(20, 3e-4);
};

struct PhaseReport {
  std::string name;
  Checkpoint params;
  std::vector<double> loss;
  /// Mean reward of greedy completions on held-out prompts.
  double heldout_reward = 0.0;
};

/// Best-of-N SFT once, then `rounds` repetitions of offline preference and online CoPG.
std::vector<PhaseReport> polish(const ModelConfig& config, Checkpoint params, std::span<const Example> prompts,
                                std::span<const Example> heldout, const RewardFn& reward,
                                const PolishConfig& polish_config);

// --- evaluation ----------------------------------------------------------------

/// (wins + ties / 2) / (wins + ties + losses).
double win_rate(std::size_t wins, std::size_t ties, std::size_t losses);

/// Counts a beating b, ties within `tie_tolerance`, and b beating a.
RunMetrics pairwise_outcomes(std::span<const double> a, std::span<const double> b, double tie_tolerance = 0.0);

// --- expert soups --------------------------------------------------------------

struct SoupConfig {
  std::size_t instruct_steps = 100;
  std::size_t expert_steps = 600;
  std::size_t polish_steps = 150;
  std::size_t batch_size = 32;
  std::size_t seeds_per_expert = 1;
  double cross_domain_fraction = 0.05;
  double polish_lr_divisor = 15.0;
  /// Peak, end and optimizer settings; steps come from the fields above.
  SchedulePlan sft_plan = toy_plan(1);
};

struct SoupReport {
  std::vector<std::string> tasks;
  /// [expert][task]
  std::vector<std::vector<double>> expert_accuracy;
  std::vector<double> soup_accuracy;
  std::vector<double> polished_accuracy;
  /// soup / best expert per task, in percent.
  std::vector<double> soup_preservation;
  std::vector<double> polished_preservation;
  /// [left-out expert][task]; empty with a single expert.
  std::vector<std::vector<double>> leave_one_out;
  Checkpoint soup;
  Checkpoint polished;
};

SoupReport expert_soup_experiment(const std::vector<TaskSpec>& tasks, const ModelConfig& config,
                                  const SoupConfig& soup_config, std::uint64_t seed);

}  // namespace alignlab
