// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <memory>

#include "alignlab/errors.h"
#include "alignlab/merging.h"
#include "alignlab/pipeline.h"

namespace alignlab {

SchedulePlan toy_plan(std::size_t steps, double peak) {
  SchedulePlan p;
  p.kind = ScheduleKind::Cosine;
  p.peak = peak;
  p.end = peak / 10.0;
  p.steps = steps;
  p.beta1 = 0.9;
  p.beta2 = 0.95;
  p.weight_decay = 0.0;
  p.grad_clip = 1.0;
  return p;
}

double win_rate(std::size_t wins, std::size_t ties, std::size_t losses) {
  const std::size_t total = wins + ties + losses;
  if (total == 0) throw ValueError("win_rate: no comparisons");
  return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) / static_cast<double>(total);
}

RunMetrics pairwise_outcomes(std::span<const double> a, std::span<const double> b, double tie_tolerance) {
  if (a.size() != b.size()) throw ShapeError("pairwise_outcomes: score lists differ in length");
  if (!(tie_tolerance >= 0.0)) throw ValueError("pairwise_outcomes: tie tolerance must be >= 0");
  RunMetrics m;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (std::abs(d) <= tie_tolerance) {
      ++m.ties;
    } else if (d > 0.0) {
      ++m.wins;
    } else {
      ++m.losses;
    }
  }
  return m;
}

namespace {

double heldout_reward(const ModelConfig& config, const Checkpoint& params, std::span<const Example> heldout,
                      const RewardFn& reward) {
  if (heldout.empty()) return 0.0;
  double total = 0.0;
  for (const Example& e : heldout) {
    total += reward(e.prompt(), greedy_completion(config, params, e.prompt(), e.completion().size()));
  }
  return total / static_cast<double>(heldout.size());
}

Example with_completion(const Example& prompt_source, const std::vector<std::size_t>& completion) {
  Example e;
  e.tokens.assign(prompt_source.prompt().begin(), prompt_source.prompt().end());
  e.tokens.insert(e.tokens.end(), completion.begin(), completion.end());
  e.prompt_length = prompt_source.prompt_length;
  return e;
}

}  // namespace

std::vector<PhaseReport> polish(const ModelConfig& config, Checkpoint params, std::span<const Example> prompts,
                                std::span<const Example> heldout, const RewardFn& reward,
                                const PolishConfig& pc) {
  if (pc.rounds < 1) throw ValueError("polish: rounds must be >= 1");
  if (pc.best_of_n < 1) throw ValueError("polish: best_of_n must be >= 1");
  if (pc.generations < 2) throw ValueError("polish: online phase needs >= 2 generations per prompt");
  if (prompts.empty()) throw ValueError("polish: no prompts");
  Rng seeds(pc.seed);
  std::vector<PhaseReport> phases;
  auto record = [&](std::string name, TrainOutcome outcome) {
    PhaseReport r;
    r.name = std::move(name);
    r.loss = std::move(outcome.metrics.loss);
    r.heldout_reward = heldout_reward(config, outcome.params, heldout, reward);
    r.params = std::move(outcome.params);
    phases.push_back(std::move(r));
  };

  // Best-of-N samples become SFT targets.
  {
    std::vector<Example> data;
    for (const Example& e : prompts) {
      const BestOfN bon = best_of_n(config, params, e.prompt(), e.completion().size(), reward, pc.best_of_n,
                                    seeds.next(), pc.sampling);
      data.push_back(with_completion(e, bon.completion));
    }
    SftOptions opt;
    opt.batch_size = pc.batch_size;
    opt.seed = seeds.next();
    opt.l2_to_reference = pc.l2_to_reference;
    record("bon-sft", train_sft(config, params, data, pc.bon_plan, opt));
  }

  for (std::size_t round = 0; round < pc.rounds; ++round) {
    const std::string suffix = pc.rounds > 1 ? "-" + std::to_string(round + 1) : "";
    {
      const Checkpoint start = phases.back().params;
      std::vector<PreferenceExample> pairs;
      for (const Example& e : prompts) {
        const BestOfN bon = best_of_n(config, start, e.prompt(), e.completion().size(), reward, pc.best_of_n,
                                      seeds.next(), pc.sampling);
        const auto worst = static_cast<std::size_t>(std::min_element(bon.scores.begin(), bon.scores.end()) -
                                                    bon.scores.begin());
        if (bon.scores[worst] == bon.scores[bon.index]) continue;
        pairs.push_back({with_completion(e, bon.completion), with_completion(e, bon.samples[worst])});
      }
      const std::uint64_t seed = seeds.next();
      if (pairs.empty()) {
        // Every candidate scored the same; nothing to prefer.
        TrainOutcome unchanged;
        unchanged.params = start;
        record("offline" + suffix, std::move(unchanged));
      } else {
        PrefOptions opt;
        opt.loss = PrefLoss::Ipo;
        opt.beta = pc.offline_beta;
        opt.length_normalized = true;
        opt.sft_weight = pc.sft_weight;
        opt.l2_to_reference = pc.l2_to_reference;
        opt.batch_size = pc.batch_size;
        opt.seed = seed;
        record("offline" + suffix, train_preference(config, start, start, pairs, pc.offline_plan, opt));
      }
    }
    {
      const Checkpoint start = phases.back().params;
      CopgOnlineOptions opt;
      opt.k = pc.generations;
      opt.beta = pc.online_beta;
      opt.prompts_per_step = std::min<std::size_t>(pc.batch_size, prompts.size());
      opt.sft_weight = pc.sft_weight;
      opt.l2_to_reference = pc.l2_to_reference;
      opt.seed = seeds.next();
      opt.sampling = pc.sampling;
      record("online" + suffix, train_copg_online(config, start, start, prompts, reward, pc.online_plan, opt));
    }
  }
  return phases;
}

SoupReport expert_soup_experiment(const std::vector<TaskSpec>& tasks, const ModelConfig& config,
                                  const SoupConfig& sc, std::uint64_t seed) {
  if (tasks.empty()) throw ValueError("soup experiment: no tasks");
  if (sc.seeds_per_expert < 1) throw ValueError("soup experiment: seeds_per_expert must be >= 1");
  if (!(sc.polish_lr_divisor >= 1.0)) throw ValueError("soup experiment: polish LR divisor must be >= 1");
  const std::size_t n = tasks.size();
  Rng seeds(seed);
  auto plan_with = [&](std::size_t steps, double divisor) {
    SchedulePlan p = sc.sft_plan;
    p.steps = std::max<std::size_t>(steps, 1);
    p.peak /= divisor;
    p.end /= divisor;
    return p;
  };
  std::vector<Example> everything;
  for (const auto& t : tasks) everything.insert(everything.end(), t.train.begin(), t.train.end());

  Checkpoint instruct = init_params(config, seeds.next());
  if (sc.instruct_steps > 0) {
    SftOptions opt;
    opt.batch_size = sc.batch_size;
    opt.seed = seeds.next();
    instruct = train_sft(config, instruct, everything, plan_with(sc.instruct_steps, 1.0), opt).params;
  }

  auto accuracies = [&](const Checkpoint& params) {
    std::vector<double> acc;
    for (const auto& t : tasks) acc.push_back(task_accuracy(config, params, t.eval));
    return acc;
  };

  SoupReport report;
  MergeSpec soup_spec;
  for (std::size_t i = 0; i < n; ++i) {
    report.tasks.push_back(tasks[i].name);
    std::vector<Example> others;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) others.insert(others.end(), tasks[j].train.begin(), tasks[j].train.end());
    }
    std::vector<std::shared_ptr<const Checkpoint>> runs;
    for (std::size_t s = 0; s < sc.seeds_per_expert; ++s) {
      SftOptions opt;
      opt.batch_size = sc.batch_size;
      opt.seed = seeds.next();
      opt.auxiliary = others;
      opt.auxiliary_fraction = others.empty() ? 0.0 : sc.cross_domain_fraction;
      runs.push_back(std::make_shared<const Checkpoint>(
          train_sft(config, instruct, tasks[i].train, plan_with(sc.expert_steps, 1.0), opt).params));
    }
    auto expert = runs.size() == 1 ? runs.front() : std::make_shared<const Checkpoint>(polyak_average(runs));
    report.expert_accuracy.push_back(accuracies(*expert));
    soup_spec.inputs.push_back(expert);
  }
  report.soup = polyak_average(soup_spec.inputs);
  report.soup.provenance = "expert-soup";
  report.soup_accuracy = accuracies(report.soup);

  SftOptions polish_opt;
  polish_opt.batch_size = sc.batch_size;
  polish_opt.seed = seeds.next();
  report.polished = sc.polish_steps == 0
                        ? report.soup
                        : train_sft(config, report.soup, everything, plan_with(sc.polish_steps, sc.polish_lr_divisor),
                                    polish_opt)
                              .params;
  report.polished_accuracy = accuracies(report.polished);

  for (std::size_t t = 0; t < n; ++t) {
    double best = 0.0;
    for (const auto& row : report.expert_accuracy) best = std::max(best, row[t]);
    report.soup_preservation.push_back(best > 0.0 ? 100.0 * report.soup_accuracy[t] / best : 0.0);
    report.polished_preservation.push_back(best > 0.0 ? 100.0 * report.polished_accuracy[t] / best : 0.0);
  }

  if (n > 1) {
    soup_spec.weights.assign(n, 1.0 / static_cast<double>(n));
    soup_spec.weights[0] = 1.0 - static_cast<double>(n - 1) / static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j) report.leave_one_out.push_back(accuracies(linear_merge(leave_one_out(soup_spec, j))));
  }
  return report;
}

}  // namespace alignlab
