// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>

#include "alignlab/errors.h"
#include "alignlab/pipeline.h"

namespace alignlab {

namespace {

// coefficient * sum over shared parameters of (theta - ref)^2.
Var l2_penalty(Graph& g, const BoundParams& params, const Checkpoint& reference, double coefficient) {
  if (!(coefficient >= 0.0)) throw ValueError("l2 penalty: coefficient must be >= 0");
  Var total = g.constant(Tensor::scalar(0.0));
  for (const auto& [name, var] : params.entries()) {
    if (!reference.contains(name)) throw ValueError("l2 penalty: reference lacks '" + name + "'");
    std::vector<double> neg(reference.at(name).values().begin(), reference.at(name).values().end());
    for (double& v : neg) v = -v;
    Var diff = g.add(var, g.constant(Tensor(reference.at(name).shape(), std::move(neg))));
    total = g.add(total, g.sum(g.mul(diff, diff)));
  }
  return g.scale(total, coefficient);
}

std::vector<std::size_t> draw_indices(Rng& rng, std::size_t population, std::size_t count) {
  std::vector<std::size_t> idx(count);
  for (auto& i : idx) i = rng.index(population);
  return idx;
}

Var masked_sft(Graph& g, const ModelConfig& config, const BoundParams& params, std::span<const Example> examples,
               std::span<const std::size_t> indices) {
  const LmBatch b = make_lm_batch(examples, indices);
  Var logits = g.reshape(model_logits(g, config, params, b.batch), Shape{b.targets.size(), config.vocab_size});
  return sft_loss(g, logits, b.targets, b.mask);
}

std::vector<double> softmax_with_temperature(std::span<const double> logits, double temperature) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += p[i] = std::exp((logits[i] - peak) / temperature);
  for (double& v : p) v /= total;
  return p;
}

// Extends every row by `length` tokens. A temperature of 0 means greedy decoding.
std::vector<std::vector<std::size_t>> extend_rows(const ModelConfig& config, const Checkpoint& params,
                                                  std::vector<std::vector<std::size_t>> rows, std::size_t length,
                                                  Rng* rng, double temperature) {
  if (rows.empty()) return rows;
  const std::size_t start = rows.front().size();
  for (const auto& r : rows) {
    if (r.size() != start || start == 0) throw ValueError("sampling: prompts must be non-empty and equally long");
  }
  if (start + length > config.max_seq + 1) throw ValueError("sampling: completion would exceed max_seq");
  const std::size_t vocab = config.vocab_size;
  for (std::size_t t = 0; t < length; ++t) {
    const std::size_t seq = start + t;
    std::vector<std::size_t> flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    const Tensor logits = model_forward(SequenceBatch::from_tokens(rows.size(), seq, std::move(flat)), config, params);
    for (std::size_t b = 0; b < rows.size(); ++b) {
      const auto last = logits.values().subspan((b * seq + seq - 1) * vocab, vocab);
      std::size_t next;
      if (temperature > 0.0) {
        next = rng->categorical(softmax_with_temperature(last, temperature));
      } else {
        next = static_cast<std::size_t>(std::max_element(last.begin(), last.end()) - last.begin());
      }
      rows[b].push_back(next);
    }
  }
  for (auto& r : rows) r.erase(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(start));
  return rows;
}

void check_temperature(const SamplingOptions& options) {
  if (!(options.temperature > 0.0) || !std::isfinite(options.temperature)) {
    throw ValueError("sampling: temperature must be positive and finite");
  }
}

Example join(std::span<const std::size_t> prompt, std::span<const std::size_t> completion) {
  Example e;
  e.tokens.assign(prompt.begin(), prompt.end());
  e.tokens.insert(e.tokens.end(), completion.begin(), completion.end());
  e.prompt_length = prompt.size();
  return e;
}

}  // namespace

TrainOutcome train(Checkpoint params, const SchedulePlan& plan, const LossBuilder& build) {
  AdamW opt(plan);
  TrainOutcome out;
  out.metrics.loss.reserve(plan.steps);
  for (std::size_t step = 0; step < plan.steps; ++step) {
    try {
      Graph g;
      BoundParams bound(g, params, true);
      Var loss = build(g, bound, params, step);
      const double value = g.value(loss).item();
      if (!std::isfinite(value)) throw NumericError("train: non-finite loss", step);
      out.metrics.loss.push_back(value);
      opt.step(params, bound, g.backward(loss));
    } catch (const NonFiniteError& e) {
      throw NumericError(std::string("train: ") + e.what(), step);
    }
  }
  params.step += plan.steps;
  out.params = std::move(params);
  return out;
}

TrainOutcome train_sft(const ModelConfig& config, Checkpoint params, std::span<const Example> data,
                       const SchedulePlan& plan, const SftOptions& options) {
  if (data.empty()) throw ValueError("train_sft: empty dataset");
  if (options.batch_size == 0) throw ValueError("train_sft: batch size must be positive");
  if (!(options.auxiliary_fraction >= 0.0 && options.auxiliary_fraction <= 1.0)) {
    throw ValueError("train_sft: auxiliary fraction outside [0, 1]");
  }
  if (options.auxiliary_fraction > 0.0 && options.auxiliary.empty()) {
    throw ValueError("train_sft: auxiliary fraction set without auxiliary data");
  }
  validate_params(config, params);
  // Auxiliary examples are appended so one index space covers both pools.
  std::vector<Example> pool(data.begin(), data.end());
  pool.insert(pool.end(), options.auxiliary.begin(), options.auxiliary.end());
  const Checkpoint reference = params;
  Rng rng(options.seed);
  auto build = [&](Graph& g, const BoundParams& bound, const Checkpoint&, std::size_t) {
    std::vector<std::size_t> idx(options.batch_size);
    for (auto& i : idx) {
      const bool aux = options.auxiliary_fraction > 0.0 && rng.uniform() < options.auxiliary_fraction;
      i = aux ? data.size() + rng.index(options.auxiliary.size()) : rng.index(data.size());
    }
    Var loss = masked_sft(g, config, bound, pool, idx);
    if (options.l2_to_reference > 0.0) loss = g.add(loss, l2_penalty(g, bound, reference, options.l2_to_reference));
    return loss;
  };
  TrainOutcome out = train(std::move(params), plan, build);
  out.params.provenance = "train_sft";
  return out;
}

Var completion_logprobs(Graph& g, const ModelConfig& config, const BoundParams& params,
                        std::span<const Example> examples, bool length_normalized) {
  std::vector<std::size_t> idx(examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const LmBatch b = make_lm_batch(examples, idx);
  const std::size_t seq = b.batch.seq;
  Var flat = g.reshape(model_logits(g, config, params, b.batch), Shape{examples.size() * seq, config.vocab_size});
  std::vector<Var> parts;
  for (std::size_t r = 0; r < examples.size(); ++r) {
    const Example& e = examples[r];
    const std::size_t first = r * seq + e.prompt_length - 1;
    const std::size_t last = r * seq + e.tokens.size() - 1;
    Var rows = g.slice(flat, 0, first, last);
    parts.push_back(g.reshape(sequence_logprob(g, rows, e.completion(), length_normalized), Shape{1}));
  }
  return g.concat(parts, 0);
}

std::vector<double> completion_logprobs(const ModelConfig& config, const Checkpoint& params,
                                        std::span<const Example> examples, bool length_normalized) {
  Graph g;
  BoundParams bound(g, params, false);
  const Tensor& v = g.value(completion_logprobs(g, config, bound, examples, length_normalized));
  return {v.values().begin(), v.values().end()};
}

TrainOutcome train_preference(const ModelConfig& config, Checkpoint params, const Checkpoint& reference,
                              std::span<const PreferenceExample> pairs, const SchedulePlan& plan,
                              const PrefOptions& options) {
  if (pairs.empty()) throw ValueError("train_preference: no pairs");
  if (options.batch_size == 0) throw ValueError("train_preference: batch size must be positive");
  validate_params(config, params);
  validate_params(config, reference);
  std::vector<Example> chosen, rejected;
  for (const auto& p : pairs) {
    if (!std::equal(p.chosen.prompt().begin(), p.chosen.prompt().end(), p.rejected.prompt().begin(),
                    p.rejected.prompt().end())) {
      throw ValueError("train_preference: chosen and rejected prompts differ");
    }
    chosen.push_back(p.chosen);
    rejected.push_back(p.rejected);
  }
  const auto ref_c = completion_logprobs(config, reference, chosen, options.length_normalized);
  const auto ref_r = completion_logprobs(config, reference, rejected, options.length_normalized);
  Rng rng(options.seed);
  const std::size_t m = options.batch_size;
  auto build = [&](Graph& g, const BoundParams& bound, const Checkpoint&, std::size_t) {
    const auto idx = draw_indices(rng, pairs.size(), m);
    std::vector<Example> batch;
    std::vector<double> delta_ref(m);
    for (std::size_t i = 0; i < m; ++i) batch.push_back(chosen[idx[i]]);
    for (std::size_t i = 0; i < m; ++i) batch.push_back(rejected[idx[i]]);
    for (std::size_t i = 0; i < m; ++i) delta_ref[i] = ref_c[idx[i]] - ref_r[idx[i]];
    Var lp = completion_logprobs(g, config, bound, batch, options.length_normalized);
    Var delta = g.add(g.slice(lp, 0, 0, m), g.scale(g.slice(lp, 0, m, 2 * m), -1.0));
    Var z = g.add(delta, g.constant(Tensor({m}, [&] {
                    std::vector<double> neg(delta_ref);
                    for (double& v : neg) v = -v;
                    return neg;
                  }())));
    Var loss = g.scale(pref_pair_loss(g, options.loss, z, 0.0, options.beta, options.margin), 1.0 / static_cast<double>(m));
    if (options.sft_weight > 0.0) {
      std::vector<std::size_t> first(m);
      std::iota(first.begin(), first.end(), 0);
      loss = combined_loss(g, loss, masked_sft(g, config, bound, batch, first), options.sft_weight);
    }
    if (options.l2_to_reference > 0.0) loss = g.add(loss, l2_penalty(g, bound, reference, options.l2_to_reference));
    return loss;
  };
  TrainOutcome out = train(std::move(params), plan, build);
  out.params.provenance = std::string("train_preference(") + pref_loss_name(options.loss) + ")";
  return out;
}

RewardFn task_reward(const std::vector<TaskSpec>& tasks) {
  return [tasks](std::span<const std::size_t> prompt, std::span<const std::size_t> completion) {
    if (prompt.size() != toy::kPromptLength) throw ValueError("task reward: not a toy prompt");
    const std::size_t tag = prompt[0];
    for (const TaskSpec& t : tasks) {
      if (tag != toy::kFirstTaskToken + static_cast<std::size_t>(t.kind)) continue;
      const auto target = t.target(prompt.subspan(1, toy::kSymbols));
      std::size_t hits = 0;
      for (std::size_t i = 0; i < target.size() && i < completion.size(); ++i) hits += completion[i] == target[i];
      return static_cast<double>(hits) / static_cast<double>(target.size());
    }
    throw ValueError("task reward: unknown task token " + std::to_string(tag));
  };
}

std::vector<std::size_t> sample_completion(const ModelConfig& config, const Checkpoint& params,
                                           std::span<const std::size_t> prompt, std::size_t length, Rng& rng,
                                           const SamplingOptions& options) {
  check_temperature(options);
  return extend_rows(config, params, {{prompt.begin(), prompt.end()}}, length, &rng, options.temperature).front();
}

std::vector<std::size_t> greedy_completion(const ModelConfig& config, const Checkpoint& params,
                                           std::span<const std::size_t> prompt, std::size_t length) {
  return extend_rows(config, params, {{prompt.begin(), prompt.end()}}, length, nullptr, 0.0).front();
}

std::size_t argmax_first(std::span<const double> values) {
  if (values.empty()) throw ValueError("argmax: empty");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

BestOfN best_of_n(const ModelConfig& config, const Checkpoint& params, std::span<const std::size_t> prompt,
                  std::size_t length, const RewardFn& scorer, std::size_t n, std::uint64_t seed,
                  const SamplingOptions& options) {
  if (n == 0) throw ValueError("best_of_n: n must be >= 1");
  check_temperature(options);
  Rng rng(seed);
  BestOfN out;
  out.samples = extend_rows(config, params, std::vector<std::vector<std::size_t>>(n, {prompt.begin(), prompt.end()}),
                            length, &rng, options.temperature);
  for (const auto& s : out.samples) out.scores.push_back(scorer(prompt, s));
  out.index = argmax_first(out.scores);
  out.completion = out.samples[out.index];
  return out;
}

TrainOutcome train_copg_online(const ModelConfig& config, Checkpoint params, const Checkpoint& reference,
                               std::span<const Example> prompts, const RewardFn& reward, const SchedulePlan& plan,
                               const CopgOnlineOptions& options) {
  if (prompts.empty()) throw ValueError("train_copg_online: no prompts");
  if (options.k < 2) throw ValueError("train_copg_online: need k >= 2 generations per prompt");
  if (options.prompts_per_step == 0) throw ValueError("train_copg_online: prompts_per_step must be positive");
  check_temperature(options.sampling);
  validate_params(config, params);
  validate_params(config, reference);
  Rng rng(options.seed);
  const std::size_t k = options.k;
  std::vector<Example> prompt_pool(prompts.begin(), prompts.end());
  auto build = [&](Graph& g, const BoundParams& bound, const Checkpoint& current, std::size_t) {
    const auto idx = draw_indices(rng, prompts.size(), options.prompts_per_step);
    std::vector<Example> generated;
    for (std::size_t i : idx) {
      const auto prompt = prompts[i].prompt();
      const auto rows = extend_rows(config, current, std::vector<std::vector<std::size_t>>(k, {prompt.begin(), prompt.end()}),
                                    prompts[i].completion().size(), &rng, options.sampling.temperature);
      for (const auto& c : rows) generated.push_back(join(prompt, c));
    }
    const auto ref_lp = completion_logprobs(config, reference, generated, false);
    Var lp = completion_logprobs(g, config, bound, generated, false);
    Var loss = g.constant(Tensor::scalar(0.0));
    for (std::size_t p = 0; p < idx.size(); ++p) {
      std::vector<double> rewards(k);
      for (std::size_t j = 0; j < k; ++j) {
        const Example& e = generated[p * k + j];
        rewards[j] = reward(e.prompt(), e.completion());
      }
      loss = g.add(loss, copg_loss(g, g.slice(lp, 0, p * k, (p + 1) * k),
                                   std::span<const double>(ref_lp).subspan(p * k, k), rewards, options.beta));
    }
    loss = g.scale(loss, 1.0 / static_cast<double>(idx.size()));
    if (options.sft_weight > 0.0) loss = combined_loss(g, loss, masked_sft(g, config, bound, prompt_pool, idx), options.sft_weight);
    if (options.l2_to_reference > 0.0) loss = g.add(loss, l2_penalty(g, bound, reference, options.l2_to_reference));
    return loss;
  };
  TrainOutcome out = train(std::move(params), plan, build);
  out.params.provenance = "train_copg_online";
  return out;
}

}  // namespace alignlab
