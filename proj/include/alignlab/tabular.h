// SPDX-License-Identifier: Apache-2.0
//
// Tabular policies over small prompt/completion spaces. Every expectation and KL here
// is an exact finite sum, which makes these types the reference bench for the
// preference and policy-gradient objectives.
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "alignlab/objectives.h"

namespace alignlab {

/// Logit used for completions that carry exactly zero probability.
inline constexpr double kZeroLogit = -1e300;

/// Row-stochastic table with a softmax parameterization; probs always match logits.
class PolicyTable {
 public:
  /// Uniform rows.
  PolicyTable(std::size_t n_prompts, std::size_t n_completions);

  static PolicyTable from_logits(std::size_t n_prompts, std::size_t n_completions, std::vector<double> logits);
  /// Rows must be simplices within 1e-12; zero entries map to kZeroLogit.
  static PolicyTable from_probs(std::size_t n_prompts, std::size_t n_completions, std::vector<double> probs);

  std::size_t n_prompts() const noexcept { return n_prompts_; }
  std::size_t n_completions() const noexcept { return n_completions_; }

  std::span<const double> row(std::size_t x) const;
  std::span<const double> logits(std::size_t x) const;
  void set_logits(std::size_t x, std::span<const double> logits);

  const std::vector<double>& probs() const noexcept { return probs_; }
  const std::vector<double>& all_logits() const noexcept { return logits_; }

 private:
  std::size_t n_prompts_;
  std::size_t n_completions_;
  std::vector<double> logits_;
  std::vector<double> probs_;
};

/// pi_dagger(y2 | x, y1): one simplex row per (prompt, prior completion).
class ConditionalPolicyTable {
 public:
  ConditionalPolicyTable(std::size_t n_prompts, std::size_t n_completions);

  /// Every conditional row equals the prompt's row of `base`.
  static ConditionalPolicyTable broadcast(const PolicyTable& base);
  /// The refiner that returns its input unchanged.
  static ConditionalPolicyTable identity(std::size_t n_prompts, std::size_t n_completions);
  /// choice[x * n + y1] is the completion produced from y1.
  static ConditionalPolicyTable deterministic(std::size_t n_prompts, std::size_t n_completions,
                                              std::span<const std::size_t> choice);

  std::size_t n_prompts() const noexcept { return n_prompts_; }
  std::size_t n_completions() const noexcept { return n_completions_; }

  std::span<const double> row(std::size_t x, std::size_t y1) const { return table_.row(x * n_completions_ + y1); }
  std::span<const double> logits(std::size_t x, std::size_t y1) const {
    return table_.logits(x * n_completions_ + y1);
  }
  void set_logits(std::size_t x, std::size_t y1, std::span<const double> logits) {
    table_.set_logits(x * n_completions_ + y1, logits);
  }

 private:
  explicit ConditionalPolicyTable(std::size_t n_prompts, std::size_t n_completions, PolicyTable table)
      : n_prompts_(n_prompts), n_completions_(n_completions), table_(std::move(table)) {}

  std::size_t n_prompts_;
  std::size_t n_completions_;
  PolicyTable table_;
};

/// P(y_i > y_j | x) for every prompt.
class PreferenceOracle {
 public:
  /// Entries row-major per prompt; enforces P_ij + P_ji = 1 (1e-12), diagonal 0.5, range [0, 1].
  PreferenceOracle(std::size_t n_prompts, std::size_t n_completions, std::vector<double> matrix);

  static PreferenceOracle indifferent(std::size_t n_prompts, std::size_t n_completions);
  /// P_ij = sigmoid(s_i - s_j) from per-prompt scores.
  static PreferenceOracle bradley_terry(std::size_t n_prompts, std::size_t n_completions,
                                        std::span<const double> scores);

  std::size_t n_prompts() const noexcept { return n_prompts_; }
  std::size_t n_completions() const noexcept { return n_completions_; }
  double operator()(std::size_t x, std::size_t i, std::size_t j) const {
    return p_[(x * n_completions_ + i) * n_completions_ + j];
  }

 private:
  std::size_t n_prompts_;
  std::size_t n_completions_;
  std::vector<double> p_;
};

// --- SRPO ---------------------------------------------------------------------------

/// E_x E_{y1~pi, y2~pi_dagger}[P(y2 > y1) - beta KL(pi_dagger(.|x,y1) || ref(.|x)) + beta KL(pi || ref | x)].
/// Empty prompt_weights means uniform over prompts.
double srpo_objective(const PolicyTable& pi, const ConditionalPolicyTable& dagger, const PreferenceOracle& pref,
                      const PolicyTable& reference, double beta, std::span<const double> prompt_weights = {});

enum class SrpoInit { Reference, Uniform, Random };

struct SrpoOptions {
  double beta = 0.1;
  std::size_t steps = 2000;
  double lr = 1.0;
  SrpoInit init = SrpoInit::Reference;
  std::uint64_t seed = 0;
  std::vector<double> prompt_weights;
};

struct SrpoResult {
  PolicyTable pi;
  ConditionalPolicyTable dagger;
  double objective = 0.0;
  /// Norm of the per-row logit gradients of both players at the returned point.
  double grad_norm = 0.0;
  /// max over pi_dagger minus min over pi with the other player fixed; 0 at a saddle point.
  double gap = 0.0;
  std::vector<double> objective_trace;
};

/// Alternating ascent on pi_dagger's logits then descent on pi's logits. Each row's step
/// follows the gradient of its own conditional term, i.e. the objective's gradient with
/// the positive row weight (prompt weight, and pi(y1) for refiner rows) divided out.
SrpoResult srpo_solve(const PreferenceOracle& pref, const PolicyTable& reference, const SrpoOptions& options);

/// Closed-form saddle point: pi_dagger(.|y1) ~ ref exp(P(. > y1) / beta), pi ~ ref exp(-f / beta).
SrpoResult srpo_closed_form(const PreferenceOracle& pref, const PolicyTable& reference, double beta,
                            std::span<const double> prompt_weights = {});

/// y0 ~ pi(.|x), then y_{t+1} ~ pi_dagger(.|x, y_t).
std::vector<std::size_t> self_refine(std::size_t x, const PolicyTable& pi, const ConditionalPolicyTable& dagger,
                                     std::size_t n_steps, std::uint64_t seed);

struct RefinementCurve {
  /// Estimates of E[P(y_t > y_0)] for t = 0..n_steps.
  std::vector<double> mean;
  std::vector<double> standard_error;
};

RefinementCurve refinement_curve(std::size_t x, const PolicyTable& pi, const ConditionalPolicyTable& dagger,
                                 const PreferenceOracle& pref, std::size_t n_steps, std::size_t chains,
                                 std::uint64_t seed);

// --- CoPG on tables -------------------------------------------------------------------

struct OfflineBatch {
  std::size_t prompt = 0;
  std::vector<std::size_t> completions;
  std::vector<double> rewards;
};

struct CopgTrainOptions {
  double beta = 0.1;
  std::size_t steps = 10000;
  /// Non-positive selects 1 / (upper bound on the loss curvature in logit space).
  double lr = 0.0;
  /// Stop early once the summed loss falls below this value.
  double tolerance = 0.0;
};

struct CopgTrainResult {
  PolicyTable policy;
  std::vector<double> loss_trace;
  std::vector<std::string> warnings;
  double lr = 0.0;
};

/// Full-batch gradient descent on the summed CoPG loss, starting from the reference.
CopgTrainResult train_copg_offline(std::span<const OfflineBatch> dataset, const PolicyTable& reference,
                                   const CopgTrainOptions& options);

double copg_dataset_loss(std::span<const OfflineBatch> dataset, const PolicyTable& policy,
                         const PolicyTable& reference, double beta);

/// pi*(y|x) proportional to ref(y|x) exp(R(x, y) / beta); rewards row-major per prompt.
PolicyTable kl_optimal_policy(const PolicyTable& reference, std::span<const double> rewards, double beta);

/// Largest per-prompt total variation distance between two tables of equal shape.
double max_total_variation(const PolicyTable& a, const PolicyTable& b);

/// R_i - mean_{j != i} R_j.
std::vector<double> rloo_advantages(std::span<const double> rewards);

/// (1/k) sum_i A_i grad_logits log pi(y_i | x), for completions indexed into policy_row.
std::vector<double> rloo_gradient(const CompletionBatch& batch, std::span<const double> policy_row);

/// Gradient of copg_loss w.r.t. the logits of a tabular policy row.
std::vector<double> copg_logit_gradient(const CompletionBatch& batch, std::span<const double> policy_row,
                                        std::span<const double> reference_row);

/// Cosine between the descent direction of CoPG and the RLOO estimate; 1 at pi = pi_ref.
double copg_rloo_cosine(const CompletionBatch& batch, std::span<const double> policy_row,
                        std::span<const double> reference_row);

}  // namespace alignlab
