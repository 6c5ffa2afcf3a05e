// SPDX-License-Identifier: Apache-2.0
#include "alignlab/tabular.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "alignlab/errors.h"
#include "alignlab/rng.h"
#include "alignlab/simplex.h"

namespace alignlab {

namespace {

double log_sum_exp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double x : v) total += std::exp(x - mx);
  return mx + std::log(total);
}

// Softmax chain rule: d/dlogits given d/dprobs.
std::vector<double> softmax_backward(std::span<const double> probs, std::span<const double> dprobs) {
  double mean = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) mean += probs[i] * dprobs[i];
  std::vector<double> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) out[i] = probs[i] * (dprobs[i] - mean);
  return out;
}

std::vector<double> resolve_weights(std::span<const double> weights, std::size_t n_prompts) {
  if (weights.empty()) return std::vector<double>(n_prompts, 1.0 / static_cast<double>(n_prompts));
  if (weights.size() != n_prompts) throw ValueError("prompt weights: expected one weight per prompt");
  check_simplex(weights, 1e-12, "prompt weights");
  return {weights.begin(), weights.end()};
}

void check_same_space(const PolicyTable& a, std::size_t n_prompts, std::size_t n_completions, const char* what) {
  if (a.n_prompts() != n_prompts || a.n_completions() != n_completions) {
    std::ostringstream os;
    os << what << ": table is " << a.n_prompts() << "x" << a.n_completions() << ", expected " << n_prompts << "x"
       << n_completions;
    throw ShapeError(os.str());
  }
}

void require_full_support(const PolicyTable& reference) {
  for (double p : reference.probs()) {
    if (!(p > 0.0)) throw ValueError("reference policy must put positive mass on every completion");
  }
}

double log_ratio(double p, double q) { return std::log(p) - std::log(q); }

// f(y1) = E_{y2 ~ dagger}[P(y2 > y1)] - beta KL(dagger(.|y1) || ref).
std::vector<double> refiner_values(std::size_t x, const ConditionalPolicyTable& dagger, const PreferenceOracle& pref,
                                   std::span<const double> ref, double beta) {
  const std::size_t n = dagger.n_completions();
  std::vector<double> f(n);
  for (std::size_t y1 = 0; y1 < n; ++y1) {
    const auto q = dagger.row(x, y1);
    double win = 0.0;
    for (std::size_t y2 = 0; y2 < n; ++y2) win += q[y2] * pref(x, y2, y1);
    f[y1] = win - (beta == 0.0 ? 0.0 : beta * exact_kl(q, ref));
  }
  return f;
}

}  // namespace

// --- tables -------------------------------------------------------------------------

PolicyTable::PolicyTable(std::size_t n_prompts, std::size_t n_completions)
    : n_prompts_(n_prompts),
      n_completions_(n_completions),
      logits_(n_prompts * n_completions, 0.0),
      probs_(n_prompts * n_completions, n_completions ? 1.0 / static_cast<double>(n_completions) : 0.0) {
  if (n_prompts == 0 || n_completions == 0) throw ValueError("policy table: empty dimensions");
}

PolicyTable PolicyTable::from_logits(std::size_t n_prompts, std::size_t n_completions, std::vector<double> logits) {
  PolicyTable t(n_prompts, n_completions);
  if (logits.size() != n_prompts * n_completions) throw ShapeError("policy table: wrong number of logits");
  for (std::size_t x = 0; x < n_prompts; ++x) {
    t.set_logits(x, std::span<const double>(logits).subspan(x * n_completions, n_completions));
  }
  return t;
}

PolicyTable PolicyTable::from_probs(std::size_t n_prompts, std::size_t n_completions, std::vector<double> probs) {
  if (probs.size() != n_prompts * n_completions) throw ShapeError("policy table: wrong number of probabilities");
  std::vector<double> logits(probs.size());
  for (std::size_t x = 0; x < n_prompts; ++x) {
    check_simplex(std::span<const double>(probs).subspan(x * n_completions, n_completions), 1e-12, "policy row");
  }
  for (std::size_t i = 0; i < probs.size(); ++i) logits[i] = probs[i] > 0.0 ? std::log(probs[i]) : kZeroLogit;
  return from_logits(n_prompts, n_completions, std::move(logits));
}

std::span<const double> PolicyTable::row(std::size_t x) const {
  if (x >= n_prompts_) throw ValueError("policy table: prompt index out of range");
  return std::span<const double>(probs_).subspan(x * n_completions_, n_completions_);
}

std::span<const double> PolicyTable::logits(std::size_t x) const {
  if (x >= n_prompts_) throw ValueError("policy table: prompt index out of range");
  return std::span<const double>(logits_).subspan(x * n_completions_, n_completions_);
}

void PolicyTable::set_logits(std::size_t x, std::span<const double> logits) {
  if (x >= n_prompts_) throw ValueError("policy table: prompt index out of range");
  if (logits.size() != n_completions_) throw ShapeError("policy table: wrong row length");
  for (double v : logits) {
    if (std::isnan(v) || std::isinf(v)) throw ValueError("policy table: non-finite logit");
  }
  std::copy(logits.begin(), logits.end(), logits_.begin() + static_cast<std::ptrdiff_t>(x * n_completions_));
  const std::vector<double> p = softmax_row(logits);
  std::copy(p.begin(), p.end(), probs_.begin() + static_cast<std::ptrdiff_t>(x * n_completions_));
}

ConditionalPolicyTable::ConditionalPolicyTable(std::size_t n_prompts, std::size_t n_completions)
    : n_prompts_(n_prompts), n_completions_(n_completions), table_(n_prompts * n_completions, n_completions) {}

ConditionalPolicyTable ConditionalPolicyTable::broadcast(const PolicyTable& base) {
  ConditionalPolicyTable t(base.n_prompts(), base.n_completions());
  for (std::size_t x = 0; x < base.n_prompts(); ++x)
    for (std::size_t y1 = 0; y1 < base.n_completions(); ++y1) t.set_logits(x, y1, base.logits(x));
  return t;
}

ConditionalPolicyTable ConditionalPolicyTable::identity(std::size_t n_prompts, std::size_t n_completions) {
  std::vector<std::size_t> choice(n_prompts * n_completions);
  for (std::size_t i = 0; i < choice.size(); ++i) choice[i] = i % n_completions;
  return deterministic(n_prompts, n_completions, choice);
}

ConditionalPolicyTable ConditionalPolicyTable::deterministic(std::size_t n_prompts, std::size_t n_completions,
                                                             std::span<const std::size_t> choice) {
  if (choice.size() != n_prompts * n_completions) throw ShapeError("deterministic refiner: wrong choice count");
  std::vector<double> probs(n_prompts * n_completions * n_completions, 0.0);
  for (std::size_t r = 0; r < choice.size(); ++r) {
    if (choice[r] >= n_completions) throw ValueError("deterministic refiner: completion index out of range");
    probs[r * n_completions + choice[r]] = 1.0;
  }
  return ConditionalPolicyTable(n_prompts, n_completions,
                                PolicyTable::from_probs(n_prompts * n_completions, n_completions, std::move(probs)));
}

PreferenceOracle::PreferenceOracle(std::size_t n_prompts, std::size_t n_completions, std::vector<double> matrix)
    : n_prompts_(n_prompts), n_completions_(n_completions), p_(std::move(matrix)) {
  if (n_prompts == 0 || n_completions == 0) throw ValueError("preference oracle: empty dimensions");
  if (p_.size() != n_prompts * n_completions * n_completions) throw ShapeError("preference oracle: wrong size");
  for (std::size_t x = 0; x < n_prompts; ++x) {
    for (std::size_t i = 0; i < n_completions; ++i) {
      if ((*this)(x, i, i) != 0.5) throw ValueError("preference oracle: diagonal must be 0.5");
      for (std::size_t j = 0; j < n_completions; ++j) {
        const double pij = (*this)(x, i, j);
        if (!(pij >= 0.0 && pij <= 1.0)) throw ValueError("preference oracle: probability outside [0, 1]");
        if (std::abs(pij + (*this)(x, j, i) - 1.0) > 1e-12) {
          std::ostringstream os;
          os << "preference oracle: P[" << i << "][" << j << "] + P[" << j << "][" << i << "] != 1 for prompt " << x;
          throw ValueError(os.str());
        }
      }
    }
  }
}

PreferenceOracle PreferenceOracle::indifferent(std::size_t n_prompts, std::size_t n_completions) {
  return PreferenceOracle(n_prompts, n_completions, std::vector<double>(n_prompts * n_completions * n_completions, 0.5));
}

PreferenceOracle PreferenceOracle::bradley_terry(std::size_t n_prompts, std::size_t n_completions,
                                                 std::span<const double> scores) {
  if (scores.size() != n_prompts * n_completions) throw ShapeError("bradley_terry: one score per completion");
  const std::size_t n = n_completions;
  std::vector<double> p(n_prompts * n * n);
  for (std::size_t x = 0; x < n_prompts; ++x)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double v = 0.5;
        if (i < j) v = 1.0 / (1.0 + std::exp(scores[x * n + j] - scores[x * n + i]));
        if (i > j) v = 1.0 - p[(x * n + j) * n + i];
        p[(x * n + i) * n + j] = v;
      }
  return PreferenceOracle(n_prompts, n_completions, std::move(p));
}

// --- SRPO ---------------------------------------------------------------------------

double srpo_objective(const PolicyTable& pi, const ConditionalPolicyTable& dagger, const PreferenceOracle& pref,
                      const PolicyTable& reference, double beta, std::span<const double> prompt_weights) {
  const std::size_t np = pref.n_prompts(), n = pref.n_completions();
  check_same_space(pi, np, n, "srpo_objective(pi)");
  check_same_space(reference, np, n, "srpo_objective(reference)");
  if (dagger.n_prompts() != np || dagger.n_completions() != n) throw ShapeError("srpo_objective: refiner shape");
  if (!(beta >= 0.0)) throw ValueError("srpo_objective: beta must be >= 0");
  const std::vector<double> w = resolve_weights(prompt_weights, np);

  double total = 0.0;
  for (std::size_t x = 0; x < np; ++x) {
    const auto p = pi.row(x);
    const auto ref = reference.row(x);
    const std::vector<double> f = refiner_values(x, dagger, pref, ref, beta);
    double value = 0.0;
    for (std::size_t y1 = 0; y1 < n; ++y1) value += p[y1] * f[y1];
    if (beta != 0.0) value += beta * exact_kl(p, ref);
    total += w[x] * value;
  }
  return total;
}

namespace {

// Exploitability: best response of each player against the other, in closed form.
double srpo_gap(const PolicyTable& pi, const ConditionalPolicyTable& dagger, const PreferenceOracle& pref,
                const PolicyTable& reference, double beta, std::span<const double> w) {
  const std::size_t np = pref.n_prompts(), n = pref.n_completions();
  double gap = 0.0;
  std::vector<double> buf(n);
  for (std::size_t x = 0; x < np; ++x) {
    const auto p = pi.row(x);
    const auto ref = reference.row(x);
    double upper = beta * exact_kl(p, ref);
    for (std::size_t y1 = 0; y1 < n; ++y1) {
      for (std::size_t y2 = 0; y2 < n; ++y2) buf[y2] = std::log(ref[y2]) + pref(x, y2, y1) / beta;
      upper += p[y1] * beta * log_sum_exp(buf);
    }
    const std::vector<double> f = refiner_values(x, dagger, pref, ref, beta);
    for (std::size_t y1 = 0; y1 < n; ++y1) buf[y1] = std::log(ref[y1]) - f[y1] / beta;
    const double lower = -beta * log_sum_exp(buf);
    gap += w[x] * (upper - lower);
  }
  return gap;
}

}  // namespace

SrpoResult srpo_solve(const PreferenceOracle& pref, const PolicyTable& reference, const SrpoOptions& options) {
  const std::size_t np = pref.n_prompts(), n = pref.n_completions();
  const double beta = options.beta;
  if (!(beta > 0.0)) throw ValueError("srpo_solve: beta must be positive");
  if (!(options.lr > 0.0)) throw ValueError("srpo_solve: lr must be positive");
  check_same_space(reference, np, n, "srpo_solve(reference)");
  require_full_support(reference);
  const std::vector<double> w = resolve_weights(options.prompt_weights, np);

  PolicyTable pi(np, n);
  ConditionalPolicyTable dagger(np, n);
  switch (options.init) {
    case SrpoInit::Reference:
      pi = reference;
      dagger = ConditionalPolicyTable::broadcast(reference);
      break;
    case SrpoInit::Uniform:
      break;
    case SrpoInit::Random: {
      Rng rng(options.seed);
      std::vector<double> row(n);
      for (std::size_t x = 0; x < np; ++x) {
        for (double& v : row) v = rng.normal();
        pi.set_logits(x, row);
        for (std::size_t y1 = 0; y1 < n; ++y1) {
          for (double& v : row) v = rng.normal();
          dagger.set_logits(x, y1, row);
        }
      }
      break;
    }
  }

  SrpoResult result{pi, dagger, 0.0, 0.0, 0.0, {}};
  result.objective_trace.reserve(options.steps + 1);
  std::vector<double> dprobs(n), logits(n);
  double grad_sq = 0.0;

  auto step_dagger = [&](bool apply) {
    for (std::size_t x = 0; x < np; ++x) {
      const auto ref = reference.row(x);
      for (std::size_t y1 = 0; y1 < n; ++y1) {
        const auto q = dagger.row(x, y1);
        for (std::size_t y2 = 0; y2 < n; ++y2) dprobs[y2] = pref(x, y2, y1) - beta * log_ratio(q[y2], ref[y2]);
        const std::vector<double> g = softmax_backward(q, dprobs);
        for (double v : g) grad_sq += v * v;
        if (!apply) continue;
        const auto cur = dagger.logits(x, y1);
        for (std::size_t i = 0; i < n; ++i) logits[i] = cur[i] + options.lr * g[i];
        dagger.set_logits(x, y1, logits);
      }
    }
  };
  auto step_pi = [&](bool apply) {
    for (std::size_t x = 0; x < np; ++x) {
      const auto ref = reference.row(x);
      const auto p = pi.row(x);
      const std::vector<double> f = refiner_values(x, dagger, pref, ref, beta);
      for (std::size_t y1 = 0; y1 < n; ++y1) dprobs[y1] = f[y1] + beta * log_ratio(p[y1], ref[y1]);
      const std::vector<double> g = softmax_backward(p, dprobs);
      for (double v : g) grad_sq += v * v;
      if (!apply) continue;
      const auto cur = pi.logits(x);
      for (std::size_t i = 0; i < n; ++i) logits[i] = cur[i] - options.lr * g[i];
      pi.set_logits(x, logits);
    }
  };

  for (std::size_t step = 0; step < options.steps; ++step) {
    try {
      step_dagger(true);
      step_pi(true);
    } catch (const ValueError& e) {
      throw NumericError(std::string("srpo_solve: ") + e.what(), step);
    }
    const double value = srpo_objective(pi, dagger, pref, reference, beta, w);
    if (!std::isfinite(value)) throw NumericError("srpo_solve: non-finite objective", step);
    result.objective_trace.push_back(value);
  }

  grad_sq = 0.0;
  step_dagger(false);
  step_pi(false);
  result.grad_norm = std::sqrt(grad_sq);
  result.objective = srpo_objective(pi, dagger, pref, reference, beta, w);
  result.gap = srpo_gap(pi, dagger, pref, reference, beta, w);
  result.pi = std::move(pi);
  result.dagger = std::move(dagger);
  return result;
}

SrpoResult srpo_closed_form(const PreferenceOracle& pref, const PolicyTable& reference, double beta,
                            std::span<const double> prompt_weights) {
  const std::size_t np = pref.n_prompts(), n = pref.n_completions();
  if (!(beta > 0.0)) throw ValueError("srpo_closed_form: beta must be positive");
  check_same_space(reference, np, n, "srpo_closed_form(reference)");
  require_full_support(reference);
  const std::vector<double> w = resolve_weights(prompt_weights, np);

  PolicyTable pi(np, n);
  ConditionalPolicyTable dagger(np, n);
  std::vector<double> logits(n);
  for (std::size_t x = 0; x < np; ++x) {
    const auto ref = reference.row(x);
    for (std::size_t y1 = 0; y1 < n; ++y1) {
      for (std::size_t y2 = 0; y2 < n; ++y2) logits[y2] = std::log(ref[y2]) + pref(x, y2, y1) / beta;
      dagger.set_logits(x, y1, logits);
    }
    const std::vector<double> f = refiner_values(x, dagger, pref, ref, beta);
    for (std::size_t y1 = 0; y1 < n; ++y1) logits[y1] = std::log(ref[y1]) - f[y1] / beta;
    pi.set_logits(x, logits);
  }
  SrpoResult result{pi, dagger, 0.0, 0.0, 0.0, {}};
  result.objective = srpo_objective(pi, dagger, pref, reference, beta, w);
  result.gap = srpo_gap(pi, dagger, pref, reference, beta, w);
  return result;
}

std::vector<std::size_t> self_refine(std::size_t x, const PolicyTable& pi, const ConditionalPolicyTable& dagger,
                                     std::size_t n_steps, std::uint64_t seed) {
  if (dagger.n_prompts() != pi.n_prompts() || dagger.n_completions() != pi.n_completions()) {
    throw ShapeError("self_refine: policy and refiner cover different spaces");
  }
  Rng rng(seed);
  std::vector<std::size_t> chain;
  chain.reserve(n_steps + 1);
  chain.push_back(rng.categorical(pi.row(x)));
  for (std::size_t t = 0; t < n_steps; ++t) chain.push_back(rng.categorical(dagger.row(x, chain.back())));
  return chain;
}

RefinementCurve refinement_curve(std::size_t x, const PolicyTable& pi, const ConditionalPolicyTable& dagger,
                                 const PreferenceOracle& pref, std::size_t n_steps, std::size_t chains,
                                 std::uint64_t seed) {
  if (chains < 2) throw ValueError("refinement_curve: need at least two chains");
  std::vector<double> sum(n_steps + 1, 0.0), sum_sq(n_steps + 1, 0.0);
  Rng seeds(seed);
  for (std::size_t c = 0; c < chains; ++c) {
    const std::vector<std::size_t> chain = self_refine(x, pi, dagger, n_steps, seeds.next());
    for (std::size_t t = 0; t <= n_steps; ++t) {
      const double v = pref(x, chain[t], chain[0]);
      sum[t] += v;
      sum_sq[t] += v * v;
    }
  }
  RefinementCurve curve;
  const double m = static_cast<double>(chains);
  for (std::size_t t = 0; t <= n_steps; ++t) {
    const double mean = sum[t] / m;
    const double var = std::max(0.0, (sum_sq[t] - m * mean * mean) / (m - 1.0));
    curve.mean.push_back(mean);
    curve.standard_error.push_back(std::sqrt(var / m));
  }
  return curve;
}

// --- CoPG on tables -------------------------------------------------------------------

namespace {

CompletionBatch to_batch(const OfflineBatch& b, const PolicyTable& policy, const PolicyTable& reference,
                         double beta) {
  CompletionBatch out;
  out.prompt = b.prompt;
  out.completions = b.completions;
  out.rewards = b.rewards;
  out.beta = beta;
  const auto p = policy.row(b.prompt);
  const auto r = reference.row(b.prompt);
  for (std::size_t y : b.completions) {
    out.policy_logprobs.push_back(std::log(p[y]));
    out.ref_logprobs.push_back(std::log(r[y]));
  }
  return out;
}

void check_indices(const CompletionBatch& batch, std::size_t n) {
  batch.validate();
  if (batch.completions.size() != batch.k()) throw ValueError("completion batch: completions missing");
  for (std::size_t y : batch.completions) {
    if (y >= n) throw ValueError("completion batch: completion index out of range");
  }
}

}  // namespace

double copg_dataset_loss(std::span<const OfflineBatch> dataset, const PolicyTable& policy,
                         const PolicyTable& reference, double beta) {
  double total = 0.0;
  for (const OfflineBatch& b : dataset) total += copg_loss(to_batch(b, policy, reference, beta));
  return total;
}

std::vector<double> copg_logit_gradient(const CompletionBatch& batch, std::span<const double> policy_row,
                                        std::span<const double> reference_row) {
  const std::size_t n = policy_row.size();
  check_indices(batch, n);
  const std::size_t k = batch.k();
  std::vector<double> c(k);
  double sum_c = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t y = batch.completions[i];
    c[i] = batch.rewards[i] - batch.beta * log_ratio(policy_row[y], reference_row[y]);
    sum_c += c[i];
  }
  // dL/dc_i = 2/(k-1) (k c_i - sum c); dc_i/dlogits = -beta (e_{y_i} - pi).
  std::vector<double> grad(n, 0.0);
  const double kk = static_cast<double>(k);
  for (std::size_t i = 0; i < k; ++i) {
    const double coef = -batch.beta * 2.0 / (kk - 1.0) * (kk * c[i] - sum_c);
    grad[batch.completions[i]] += coef;
    for (std::size_t l = 0; l < n; ++l) grad[l] -= coef * policy_row[l];
  }
  return grad;
}

CopgTrainResult train_copg_offline(std::span<const OfflineBatch> dataset, const PolicyTable& reference,
                                   const CopgTrainOptions& options) {
  const double beta = options.beta;
  if (!(beta > 0.0)) throw ValueError("train_copg_offline: beta must be positive");
  if (dataset.empty()) throw ValueError("train_copg_offline: empty dataset");
  require_full_support(reference);
  const std::size_t np = reference.n_prompts(), n = reference.n_completions();

  CopgTrainResult result{reference, {}, {}, options.lr};
  std::vector<std::uint8_t> covered(np * n, 0);
  std::vector<double> curvature(np, 0.0);
  for (const OfflineBatch& b : dataset) {
    if (b.prompt >= np) throw ValueError("train_copg_offline: prompt index out of range");
    if (b.completions.size() < 2 || b.completions.size() != b.rewards.size()) {
      throw ValueError("train_copg_offline: each batch needs k >= 2 completions with rewards");
    }
    for (std::size_t y : b.completions) {
      if (y >= n) throw ValueError("train_copg_offline: completion index out of range");
      covered[b.prompt * n + y] = 1;
    }
    const double k = static_cast<double>(b.completions.size());
    curvature[b.prompt] += 2.0 * beta * beta * k / (k - 1.0);
  }
  for (std::size_t x = 0; x < np; ++x) {
    bool seen = false;
    for (std::size_t y = 0; y < n; ++y) seen = seen || covered[x * n + y];
    if (!seen) continue;
    for (std::size_t y = 0; y < n; ++y) {
      if (!covered[x * n + y]) {
        std::ostringstream os;
        os << "prompt " << x << ": completion " << y << " never appears in the dataset; optimality is not guaranteed";
        result.warnings.push_back(os.str());
      }
    }
  }
  if (!(result.lr > 0.0)) result.lr = 1.0 / *std::max_element(curvature.begin(), curvature.end());

  PolicyTable& policy = result.policy;
  std::vector<double> grad(np * n), logits(n);
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double loss = 0.0;
    for (const OfflineBatch& b : dataset) {
      const CompletionBatch batch = to_batch(b, policy, reference, beta);
      loss += copg_loss(batch);
      const std::vector<double> g = copg_logit_gradient(batch, policy.row(b.prompt), reference.row(b.prompt));
      for (std::size_t y = 0; y < n; ++y) grad[b.prompt * n + y] += g[y];
    }
    if (!std::isfinite(loss)) throw NumericError("train_copg_offline: non-finite loss", step);
    result.loss_trace.push_back(loss);
    if (loss <= options.tolerance) break;
    for (std::size_t x = 0; x < np; ++x) {
      const auto cur = policy.logits(x);
      for (std::size_t y = 0; y < n; ++y) logits[y] = cur[y] - result.lr * grad[x * n + y];
      policy.set_logits(x, logits);
    }
  }
  return result;
}

PolicyTable kl_optimal_policy(const PolicyTable& reference, std::span<const double> rewards, double beta) {
  const std::size_t np = reference.n_prompts(), n = reference.n_completions();
  if (rewards.size() != np * n) throw ShapeError("kl_optimal_policy: need one reward per (prompt, completion)");
  if (!(beta > 0.0)) throw ValueError("kl_optimal_policy: beta must be > 0");
  std::vector<double> logits(np * n);
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = reference.all_logits()[i] + rewards[i] / beta;
  return PolicyTable::from_logits(np, n, std::move(logits));
}

double max_total_variation(const PolicyTable& a, const PolicyTable& b) {
  check_same_space(b, a.n_prompts(), a.n_completions(), "max_total_variation");
  double worst = 0.0;
  for (std::size_t x = 0; x < a.n_prompts(); ++x) worst = std::max(worst, total_variation(a.row(x), b.row(x)));
  return worst;
}

std::vector<double> rloo_advantages(std::span<const double> rewards) {
  const std::size_t k = rewards.size();
  if (k < 2) throw ValueError("rloo: need k >= 2 completions, got " + std::to_string(k));
  std::vector<double> adv(k);
  for (std::size_t i = 0; i < k; ++i) {
    double others = 0.0;
    for (std::size_t j = 0; j < k; ++j) others += j == i ? 0.0 : rewards[j];
    adv[i] = rewards[i] - others / static_cast<double>(k - 1);
  }
  return adv;
}

std::vector<double> rloo_gradient(const CompletionBatch& batch, std::span<const double> policy_row) {
  const std::size_t n = policy_row.size();
  check_indices(batch, n);
  const std::vector<double> adv = rloo_advantages(batch.rewards);
  const double inv_k = 1.0 / static_cast<double>(batch.k());
  std::vector<double> grad(n, 0.0);
  for (std::size_t i = 0; i < adv.size(); ++i) {
    grad[batch.completions[i]] += inv_k * adv[i];
    for (std::size_t l = 0; l < n; ++l) grad[l] -= inv_k * adv[i] * policy_row[l];
  }
  return grad;
}

double copg_rloo_cosine(const CompletionBatch& batch, std::span<const double> policy_row,
                        std::span<const double> reference_row) {
  const std::vector<double> a = copg_logit_gradient(batch, policy_row, reference_row);
  // A batch that repeats one completion gives two zero gradients, which point the same way.
  if (std::all_of(batch.completions.begin(), batch.completions.end(),
                  [&](std::size_t y) { return y == batch.completions.front(); })) {
    return 1.0;
  }
  const std::vector<double> b = rloo_gradient(batch, policy_row);
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += -a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return na == nb ? 1.0 : 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace alignlab
