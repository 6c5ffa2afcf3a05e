// SPDX-License-Identifier: Apache-2.0
#include "alignlab/objectives.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "alignlab/errors.h"
#include "alignlab/simplex.h"

namespace alignlab {

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void check_beta(double beta) {
  if (!(beta > 0.0)) throw ValueError("beta must be positive, got " + std::to_string(beta));
}

}  // namespace

void PreferencePair::validate() const {
  if (!(soft_label >= 0.0 && soft_label <= 1.0)) throw ValueError("preference pair: soft_label outside [0, 1]");
  for (double lp : {policy_chosen, policy_rejected, ref_chosen, ref_rejected}) {
    if (!(lp <= 0.0)) throw ValueError("preference pair: log-probabilities must be <= 0");
  }
}

void CompletionBatch::validate() const {
  if (rewards.size() < 2) throw ValueError("completion batch: need k >= 2 completions, got " + std::to_string(rewards.size()));
  if (policy_logprobs.size() != rewards.size() || ref_logprobs.size() != rewards.size() ||
      (!completions.empty() && completions.size() != rewards.size())) {
    throw ValueError("completion batch: rewards/log-probability lengths differ");
  }
  check_beta(beta);
}

Var sft_loss(Graph& g, Var logits, std::span<const std::size_t> targets, std::span<const std::uint8_t> prompt_mask,
             const Regulariser& regulariser) {
  const Shape& s = g.shape(logits);
  if (s.size() != 2 || targets.size() != s[0] || prompt_mask.size() != s[0]) {
    throw ShapeError("sft_loss: logits " + shape_str(s) + " with " + std::to_string(targets.size()) + " targets and " +
                     std::to_string(prompt_mask.size()) + " mask entries");
  }
  std::size_t kept = 0;
  for (auto m : prompt_mask) kept += m ? 0 : 1;
  if (kept == 0) throw ValueError("sft_loss: every position is masked");
  std::vector<double> weights(prompt_mask.size());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = prompt_mask[i] ? 0.0 : 1.0 / static_cast<double>(kept);
  Var loss = g.cross_entropy(logits, std::vector<std::size_t>(targets.begin(), targets.end()), std::move(weights));

  if (const auto* mix = std::get_if<PretrainMix>(&regulariser)) {
    if (!(mix->fraction >= 0.0)) throw ValueError("sft_loss: pretrain fraction must be >= 0");
    const std::size_t n = mix->targets.size();
    if (n == 0) throw ValueError("sft_loss: empty pretraining batch");
    Var pre = g.cross_entropy(mix->logits, mix->targets, std::vector<double>(n, 1.0 / static_cast<double>(n)));
    loss = g.add(loss, g.scale(pre, mix->fraction));
  } else if (const auto* l2 = std::get_if<L2ToReference>(&regulariser)) {
    if (!(l2->coefficient >= 0.0)) throw ValueError("sft_loss: L2 coefficient must be >= 0");
    for (const auto& [param, ref] : l2->params) {
      std::vector<double> neg(ref.values().begin(), ref.values().end());
      for (double& v : neg) v = -v;
      Var diff = g.add(param, g.constant(Tensor(ref.shape(), std::move(neg))));
      loss = g.add(loss, g.scale(g.sum(g.mul(diff, diff)), l2->coefficient));
    }
  }
  return loss;
}

const char* pref_loss_name(PrefLoss kind) {
  switch (kind) {
    case PrefLoss::Dpo: return "dpo";
    case PrefLoss::Ipo: return "ipo";
    case PrefLoss::Slic: return "slic";
  }
  return "?";
}

PrefLoss pref_loss_from_name(const std::string& name) {
  if (name == "dpo") return PrefLoss::Dpo;
  if (name == "ipo") return PrefLoss::Ipo;
  if (name == "slic") return PrefLoss::Slic;
  throw ValueError("unknown preference loss '" + name + "'");
}

double pref_pair_loss(PrefLoss kind, double delta_policy, double delta_ref, double beta, double margin) {
  const double z = delta_policy - delta_ref;
  switch (kind) {
    case PrefLoss::Dpo:
      check_beta(beta);
      return softplus(-beta * z);
    case PrefLoss::Ipo: {
      check_beta(beta);
      const double r = z - 1.0 / (2.0 * beta);
      return r * r;
    }
    case PrefLoss::Slic:
      if (!(margin >= 0.0)) throw ValueError("slic: margin must be >= 0");
      return std::max(0.0, margin - z);
  }
  return 0.0;
}

Var pref_pair_loss(Graph& g, PrefLoss kind, Var delta_policy, double delta_ref, double beta, double margin) {
  switch (kind) {
    case PrefLoss::Dpo:
      check_beta(beta);
      return g.sum(g.softplus(g.add_scalar(g.scale(delta_policy, -beta), beta * delta_ref)));
    case PrefLoss::Ipo: {
      check_beta(beta);
      Var r = g.add_scalar(delta_policy, -delta_ref - 1.0 / (2.0 * beta));
      return g.sum(g.mul(r, r));
    }
    case PrefLoss::Slic:
      if (!(margin >= 0.0)) throw ValueError("slic: margin must be >= 0");
      return g.sum(g.relu(g.add_scalar(g.scale(delta_policy, -1.0), margin + delta_ref)));
  }
  throw ValueError("unknown preference loss");
}

std::vector<double> calibrated_rewards(const CompletionBatch& batch) {
  batch.validate();
  std::vector<double> out(batch.k());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = batch.rewards[i] - batch.beta * (batch.policy_logprobs[i] - batch.ref_logprobs[i]);
  }
  return out;
}

double copg_loss(const CompletionBatch& batch) {
  const std::vector<double> rc = calibrated_rewards(batch);
  double total = 0.0;
  for (std::size_t i = 0; i < rc.size(); ++i)
    for (std::size_t j = 0; j < i; ++j) total += (rc[i] - rc[j]) * (rc[i] - rc[j]);
  return total / static_cast<double>(rc.size() - 1);
}

Var copg_loss(Graph& g, Var policy_logprobs, std::span<const double> ref_logprobs, std::span<const double> rewards,
              double beta) {
  check_beta(beta);
  const std::size_t k = rewards.size();
  if (k < 2) throw ValueError("copg_loss: need k >= 2 completions, got " + std::to_string(k));
  if (g.value(policy_logprobs).size() != k || ref_logprobs.size() != k) {
    throw ShapeError("copg_loss: expected " + std::to_string(k) + " log-probabilities");
  }
  std::vector<double> offset(k);
  for (std::size_t i = 0; i < k; ++i) offset[i] = rewards[i] + beta * ref_logprobs[i];
  Var lp = g.reshape(policy_logprobs, Shape{k, 1});
  Var calibrated = g.add(g.scale(lp, -beta), g.constant(Tensor({k, 1}, std::move(offset))));
  // one +1/-1 row per ordered pair i > j
  const std::size_t pairs = k * (k - 1) / 2;
  std::vector<double> diff(pairs * k, 0.0);
  std::size_t row = 0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < i; ++j, ++row) {
      diff[row * k + i] = 1.0;
      diff[row * k + j] = -1.0;
    }
  Var d = g.matmul(g.constant(Tensor({pairs, k}, std::move(diff))), calibrated);
  return g.scale(g.sum(g.mul(d, d)), 1.0 / static_cast<double>(k - 1));
}

double bt_rm_loss(double r_chosen, double r_rejected, double soft_label) {
  if (!(soft_label >= 0.0 && soft_label <= 1.0)) throw ValueError("bt_rm_loss: soft label outside [0, 1]");
  const double margin = r_chosen - r_rejected;
  // -log sigmoid(m) = softplus(-m)
  return soft_label * softplus(-margin) + (1.0 - soft_label) * softplus(margin);
}

Var bt_rm_loss(Graph& g, Var r_chosen, Var r_rejected, double soft_label) {
  if (!(soft_label >= 0.0 && soft_label <= 1.0)) throw ValueError("bt_rm_loss: soft label outside [0, 1]");
  Var margin = g.add(r_chosen, g.scale(r_rejected, -1.0));
  Var loss = g.scale(g.sum(g.softplus(g.scale(margin, -1.0))), soft_label);
  return g.add(loss, g.scale(g.sum(g.softplus(margin)), 1.0 - soft_label));
}

double kl_reg_objective(std::span<const double> policy, std::span<const double> reference,
                        std::span<const double> rewards, double beta) {
  check_simplex(policy, 1e-9, "policy");
  check_simplex(reference, 1e-9, "reference");
  if (rewards.size() != policy.size()) throw ValueError("kl_reg_objective: reward count mismatch");
  double expected = 0.0;
  for (std::size_t i = 0; i < policy.size(); ++i) expected += policy[i] * rewards[i];
  return expected - beta * exact_kl(policy, reference);
}

std::vector<double> optimal_policy(std::span<const double> reference, std::span<const double> rewards, double beta) {
  check_beta(beta);
  check_simplex(reference, 1e-9, "reference");
  if (rewards.size() != reference.size()) throw ValueError("optimal_policy: reward count mismatch");
  std::vector<double> logits(reference.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (reference[i] <= 0.0) continue;
    logits[i] = std::log(reference[i]) + rewards[i] / beta;
    mx = std::max(mx, logits[i]);
  }
  std::vector<double> out(logits.size(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (reference[i] > 0.0) total += (out[i] = std::exp(logits[i] - mx));
  }
  for (double& v : out) v /= total;
  return out;
}

double combined_loss(double pref_or_rl_loss, double sft, double weight) {
  if (!(weight >= 0.0)) throw ValueError("combined_loss: weight must be >= 0");
  return pref_or_rl_loss + weight * sft;
}

Var combined_loss(Graph& g, Var pref_or_rl_loss, Var sft, double weight) {
  if (!(weight >= 0.0)) throw ValueError("combined_loss: weight must be >= 0");
  return g.add(pref_or_rl_loss, g.scale(sft, weight));
}

double sequence_logprob(std::span<const double> token_logprobs, bool length_normalized) {
  if (token_logprobs.empty()) throw ValueError("sequence_logprob: empty completion");
  double total = 0.0;
  for (double lp : token_logprobs) total += lp;
  return length_normalized ? total / static_cast<double>(token_logprobs.size()) : total;
}

Var sequence_logprob(Graph& g, Var logits, std::span<const std::size_t> targets, bool length_normalized) {
  if (targets.empty()) throw ValueError("sequence_logprob: empty completion");
  const double w = length_normalized ? -1.0 / static_cast<double>(targets.size()) : -1.0;
  return g.cross_entropy(logits, std::vector<std::size_t>(targets.begin(), targets.end()),
                         std::vector<double>(targets.size(), w));
}

}  // namespace alignlab
