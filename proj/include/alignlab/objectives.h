// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: supervised fine-tuning with prompt masking, offline pairwise
// preference losses, contrastive policy gradient, Bradley-Terry reward modelling, and
// the KL-regularised RL objective with its closed-form maximizer.
//
// Each differentiable loss comes in two forms: a graph builder (for training and
// gradient checks) and a scalar evaluator.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "alignlab/tensor.h"

namespace alignlab {

inline constexpr double kGoldLabel = 0.999;
inline constexpr double kTieLabel = 0.5;
/// Weight of the SFT term when it is mixed equally with a preference loss.
inline constexpr double kEqualWeight = 1.0;

struct PreferencePair {
  std::vector<std::size_t> prompt;
  std::vector<std::size_t> chosen;
  std::vector<std::size_t> rejected;
  double soft_label = 1.0;
  double policy_chosen = 0.0;
  double policy_rejected = 0.0;
  double ref_chosen = 0.0;
  double ref_rejected = 0.0;
  bool length_normalized = false;

  void validate() const;
  double delta_policy() const { return policy_chosen - policy_rejected; }
  double delta_ref() const { return ref_chosen - ref_rejected; }
};

/// One prompt with k >= 2 completions of arbitrary origin.
struct CompletionBatch {
  std::size_t prompt = 0;
  std::vector<std::size_t> completions;
  std::vector<double> rewards;
  std::vector<double> policy_logprobs;
  std::vector<double> ref_logprobs;
  double beta = 0.1;

  void validate() const;
  std::size_t k() const { return rewards.size(); }
};

// --- SFT ------------------------------------------------------------------

struct NoRegulariser {};

/// Adds fraction * mean CE over a pretraining batch (no masking).
struct PretrainMix {
  double fraction = 0.0;
  Var logits;
  std::vector<std::size_t> targets;
};

/// Adds coefficient * sum ||theta - theta_ref||^2 over the listed parameters.
struct L2ToReference {
  double coefficient = 0.0;
  std::vector<std::pair<Var, Tensor>> params;
};

using Regulariser = std::variant<NoRegulariser, PretrainMix, L2ToReference>;

/// Mean cross-entropy over positions whose prompt_mask entry is 0, plus the regulariser.
Var sft_loss(Graph& g, Var logits, std::span<const std::size_t> targets, std::span<const std::uint8_t> prompt_mask,
             const Regulariser& regulariser = NoRegulariser{});

// --- pairwise preference losses -------------------------------------------

enum class PrefLoss { Dpo, Ipo, Slic };

const char* pref_loss_name(PrefLoss kind);
PrefLoss pref_loss_from_name(const std::string& name);

/// dpo  -log sigmoid(beta * z)
/// ipo  (z - 1/(2 beta))^2
/// slic max(0, margin - z)
/// where z = delta_policy - delta_ref.
double pref_pair_loss(PrefLoss kind, double delta_policy, double delta_ref, double beta, double margin = 1.0);
Var pref_pair_loss(Graph& g, PrefLoss kind, Var delta_policy, double delta_ref, double beta, double margin = 1.0);

// --- contrastive policy gradient -------------------------------------------

/// R - beta * (log pi - log pi_ref), one entry per completion.
std::vector<double> calibrated_rewards(const CompletionBatch& batch);

/// 1/(k-1) * sum_{i>j} (Rc_i - Rc_j)^2 over calibrated rewards Rc.
double copg_loss(const CompletionBatch& batch);
Var copg_loss(Graph& g, Var policy_logprobs, std::span<const double> ref_logprobs, std::span<const double> rewards,
              double beta);

// --- reward model ------------------------------------------------------------

/// -[s log sigmoid(rc - rr) + (1 - s) log sigmoid(rr - rc)]
double bt_rm_loss(double r_chosen, double r_rejected, double soft_label);
Var bt_rm_loss(Graph& g, Var r_chosen, Var r_rejected, double soft_label);

// --- KL-regularised RL --------------------------------------------------------

/// E_{y~pi}[R] - beta * KL(pi || pi_ref), by enumeration.
double kl_reg_objective(std::span<const double> policy, std::span<const double> reference,
                        std::span<const double> rewards, double beta);

/// pi*(y) proportional to pi_ref(y) exp(R(y) / beta).
std::vector<double> optimal_policy(std::span<const double> reference, std::span<const double> rewards, double beta);

// --- combination & sequence scoring ------------------------------------------

double combined_loss(double pref_or_rl_loss, double sft_loss, double weight);
Var combined_loss(Graph& g, Var pref_or_rl_loss, Var sft_loss, double weight);

/// Sum of per-token log-probabilities, or their mean when length_normalized.
double sequence_logprob(std::span<const double> token_logprobs, bool length_normalized);
/// Same, read from logits [T, V] at the given targets.
Var sequence_logprob(Graph& g, Var logits, std::span<const std::size_t> targets, bool length_normalized);

}  // namespace alignlab
