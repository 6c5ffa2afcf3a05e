// SPDX-License-Identifier: Apache-2.0
#include "alignlab/commands.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "alignlab/merging.h"
#include "alignlab/pipeline.h"
#include "alignlab/presets.h"
#include "alignlab/reward_model.h"
#include "alignlab/rng.h"
#include "alignlab/shard_cost.h"
#include "alignlab/tabular.h"

namespace alignlab {

namespace {

// Output sink for one command: creates the directory and records what it wrote.
class Outputs {
 public:
  explicit Outputs(const std::string& dir) : dir_(dir) {
    if (dir.empty()) throw ConfigError("out", "output directory must not be empty");
    std::filesystem::create_directories(dir_);
  }

  void checkpoint(const std::string& name, const Checkpoint& c) {
    save_checkpoint((dir_ / name).string(), c);
    files_.push_back(name);
  }

  void text(const std::string& name, const std::string& contents) {
    write_file_atomic((dir_ / name).string(), contents);
    files_.push_back(name);
  }

  CommandResult finish(std::string summary, Metrics metrics) {
    text("metrics.json", metrics_json(metrics));
    text("metrics.csv", metrics_csv(metrics));
    return {std::move(summary), std::move(metrics), files_};
  }

 private:
  std::filesystem::path dir_;
  std::vector<std::string> files_;
};

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

ModelConfig checked_model(const RunConfig& config) {
  try {
    config.model.validate();
  } catch (const ValueError& e) {
    throw ConfigError("model", e.what());
  }
  return config.model;
}

const Preset* preset_for(const RunConfig& config, std::initializer_list<const char*> objectives) {
  if (config.preset.empty()) return nullptr;
  const Preset& p = find_preset(config.preset);
  for (const char* o : objectives) {
    if (p.objective == o) return &p;
  }
  std::string allowed;
  for (const char* o : objectives) allowed += (allowed.empty() ? "" : "/") + std::string(o);
  throw ConfigError("preset", "'" + p.name + "' has objective " + p.objective + "; " + config.command + " takes " +
                                  allowed);
}

SchedulePlan checked_schedule(const RunConfig& config, const SchedulePlan& fallback) {
  const SchedulePlan plan = effective_schedule(config, fallback);
  try {
    plan.validate();
  } catch (const ValueError& e) {
    throw ConfigError("schedule", e.what());
  }
  return plan;
}

std::vector<TaskSpec> selected_tasks(const RunConfig& config) {
  ToyTaskOptions opt;
  opt.train_examples = config.data.train_per_task;
  opt.eval_examples = config.data.eval_per_task;
  std::vector<TaskSpec> all;
  try {
    all = make_toy_tasks(config.data.task_seed, opt);
  } catch (const ValueError& e) {
    throw ConfigError("data", e.what());
  }
  if (config.data.tasks.empty()) return all;
  std::vector<TaskSpec> chosen;
  for (const auto& name : config.data.tasks) {
    auto it = std::find_if(all.begin(), all.end(), [&](const TaskSpec& t) { return t.name == name; });
    if (it == all.end()) throw ConfigError("data.tasks", "unknown task '" + name + "' (known: copy, reverse, shift)");
    chosen.push_back(*it);
  }
  return chosen;
}

std::vector<Example> train_split(const std::vector<TaskSpec>& tasks) {
  std::vector<Example> out;
  for (const auto& t : tasks) out.insert(out.end(), t.train.begin(), t.train.end());
  return out;
}

// Round-robin over tasks so a prefix of the result covers every task.
std::vector<Example> interleave(const std::vector<TaskSpec>& tasks, bool eval, std::size_t limit) {
  std::vector<Example> out;
  for (std::size_t i = 0; out.size() < limit; ++i) {
    bool any = false;
    for (const auto& t : tasks) {
      const auto& split = eval ? t.eval : t.train;
      if (i < split.size() && out.size() < limit) {
        out.push_back(split[i]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

Checkpoint starting_policy(const RunConfig& config, const ModelConfig& model, std::uint64_t init_seed) {
  if (config.inputs.checkpoint.empty()) return init_params(model, init_seed);
  Checkpoint c = load_checkpoint(config.inputs.checkpoint);
  try {
    validate_params(model, c);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("inputs.checkpoint", std::string("does not match the model config: ") + e.what());
  }
  return c;
}

void record_accuracy(Metrics& m, const ModelConfig& model, const Checkpoint& params,
                     const std::vector<TaskSpec>& tasks, const std::string& prefix = "accuracy/") {
  for (const auto& t : tasks) m.scalar(prefix + t.name, task_accuracy(model, params, t.eval));
}

double mean_of(const Metrics& m, const std::string& prefix) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& [k, v] : m.scalars) {
    if (k.starts_with(prefix)) {
      total += v;
      ++n;
    }
  }
  return n ? total / static_cast<double>(n) : 0.0;
}

// Replaces one or more completion symbols with different symbols.
Example corrupt(const Example& e, Rng& rng) {
  Example bad = e;
  const std::size_t n = e.tokens.size() - e.prompt_length;
  std::vector<std::size_t> pos(n);
  std::iota(pos.begin(), pos.end(), e.prompt_length);
  for (std::size_t i = n; i > 1; --i) std::swap(pos[i - 1], pos[rng.index(i)]);
  const std::size_t k = 1 + rng.index(n);
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t& tok = bad.tokens[pos[i]];
    tok = toy::kFirstSymbol + (tok - toy::kFirstSymbol + 1 + rng.index(toy::kAlphabet - 1)) % toy::kAlphabet;
  }
  return bad;
}

// --- commands -------------------------------------------------------------------------

CommandResult cmd_train_sft(const RunConfig& config) {
  const Preset* preset = preset_for(config, {"sft", "pretrain"});
  const ModelConfig model = checked_model(config);
  const SchedulePlan plan = checked_schedule(config, toy_plan(100));
  const auto tasks = selected_tasks(config);
  Rng seeds(config.seed);
  const std::uint64_t init_seed = seeds.next();
  Outputs out(config.out);

  SftOptions opt;
  opt.batch_size = preset && preset->batch_size ? preset->batch_size : config.data.batch_size;
  opt.seed = seeds.next();
  opt.l2_to_reference = config.objective.l2_to_reference;
  const auto data = train_split(tasks);
  TrainOutcome r = train_sft(model, starting_policy(config, model, init_seed), data, plan, opt);
  r.params.provenance = "train-sft";

  Metrics m;
  m.label("command", config.command);
  m.label("preset", config.preset);
  m.scalar("steps", static_cast<double>(plan.steps));
  m.scalar("final_loss", r.metrics.loss.back());
  record_accuracy(m, model, r.params, tasks);
  m.add_series("loss", r.metrics.loss);
  out.checkpoint("policy.ckpt", r.params);
  const std::string summary = "train-sft: " + std::to_string(plan.steps) + " steps, final loss " +
                              fixed(r.metrics.loss.back()) + ", mean accuracy " + fixed(mean_of(m, "accuracy/"));
  return out.finish(summary, std::move(m));
}

std::vector<PreferenceExample> preference_pairs(const std::vector<Example>& examples, Rng& rng) {
  std::vector<PreferenceExample> pairs;
  for (const auto& e : examples) pairs.push_back({e, corrupt(e, rng)});
  return pairs;
}

CommandResult cmd_train_pref(const RunConfig& config) {
  const Preset* preset = preset_for(config, {"dpo", "ipo", "slic"});
  const ModelConfig model = checked_model(config);
  const SchedulePlan plan = checked_schedule(config, toy_plan(60, 1e-3));
  const auto tasks = selected_tasks(config);
  Rng seeds(config.seed);
  const std::uint64_t init_seed = seeds.next();
  Rng pair_rng(seeds.next());
  Outputs out(config.out);

  PrefOptions opt;
  try {
    opt.loss = pref_loss_from_name(preset ? preset->objective : config.objective.loss);
  } catch (const ValueError& e) {
    throw ConfigError("objective.loss", e.what());
  }
  opt.beta = preset ? preset->beta : config.objective.beta;
  opt.sft_weight = preset ? preset->sft_weight : config.objective.sft_weight;
  opt.margin = config.objective.margin;
  opt.length_normalized = config.objective.length_normalized;
  opt.l2_to_reference = config.objective.l2_to_reference;
  opt.batch_size = config.objective.batch_size;
  opt.seed = seeds.next();

  const Checkpoint start = starting_policy(config, model, init_seed);
  Checkpoint reference = start;
  if (!config.inputs.reference.empty()) {
    reference = load_checkpoint(config.inputs.reference);
    if (!reference.same_schema(start)) throw ConfigError("inputs.reference", "schema differs from the policy");
  }
  const auto train_pairs = preference_pairs(train_split(tasks), pair_rng);
  std::vector<Example> eval_examples;
  for (const auto& t : tasks) eval_examples.insert(eval_examples.end(), t.eval.begin(), t.eval.end());
  const auto eval_pairs = preference_pairs(eval_examples, pair_rng);

  TrainOutcome r = train_preference(model, start, reference, train_pairs, plan, opt);
  r.params.provenance = std::string("train-pref:") + pref_loss_name(opt.loss);

  // Implicit-reward accuracy: the policy raises the chosen completion relative to
  // the reference more than the rejected one.
  std::vector<Example> chosen, rejected;
  for (const auto& p : eval_pairs) {
    chosen.push_back(p.chosen);
    rejected.push_back(p.rejected);
  }
  const auto pc = completion_logprobs(model, r.params, chosen, opt.length_normalized);
  const auto pr = completion_logprobs(model, r.params, rejected, opt.length_normalized);
  const auto rc = completion_logprobs(model, reference, chosen, opt.length_normalized);
  const auto rr = completion_logprobs(model, reference, rejected, opt.length_normalized);
  std::size_t right = 0;
  double margin = 0.0;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const double d = (pc[i] - rc[i]) - (pr[i] - rr[i]);
    right += d > 0.0;
    margin += d;
  }
  const double pref_accuracy = static_cast<double>(right) / static_cast<double>(pc.size());

  Metrics m;
  m.label("command", config.command);
  m.label("preset", config.preset);
  m.label("loss_kind", pref_loss_name(opt.loss));
  m.scalar("steps", static_cast<double>(plan.steps));
  m.scalar("beta", opt.beta);
  m.scalar("final_loss", r.metrics.loss.back());
  m.scalar("preference_accuracy", pref_accuracy);
  m.scalar("mean_implicit_margin", margin / static_cast<double>(pc.size()));
  record_accuracy(m, model, r.params, tasks);
  m.add_series("loss", r.metrics.loss);
  out.checkpoint("policy.ckpt", r.params);
  return out.finish(std::string("train-pref: ") + pref_loss_name(opt.loss) + ", " + std::to_string(plan.steps) +
                        " steps, preference accuracy " + fixed(pref_accuracy),
                    std::move(m));
}

ModelConfig reward_model_config(const RunConfig& config) {
  ModelConfig rm = checked_model(config);
  rm.max_seq = std::max(rm.max_seq, config.rm.capacity);
  return rm;
}

CommandResult cmd_train_rm(const RunConfig& config) {
  const Preset* preset = preset_for(config, {"rm"});
  const ModelConfig model = reward_model_config(config);
  const SchedulePlan plan = checked_schedule(config, toy_plan(60, 3e-3));
  const auto tasks = selected_tasks(config);
  if (config.rm.pairs == 0) throw ConfigError("rm.pairs", "must be >= 1");
  Rng seeds(config.seed);
  const std::uint64_t init_seed = seeds.next();
  Rng pair_rng(seeds.next());
  Outputs out(config.out);

  LabelPolicy labels;
  labels.gold = preset ? preset->gold_label : config.rm.gold_label;
  labels.tie = preset ? preset->tie_label : config.rm.tie_label;
  const auto source = interleave(tasks, false, config.rm.pairs);
  std::vector<TokenPair> pairs;
  for (const auto& e : source) {
    TokenPair p;
    p.chosen = e.tokens;
    p.rejected = corrupt(e, pair_rng).tokens;
    p.label = labels.gold;
    pairs.push_back(std::move(p));
  }

  Checkpoint params;
  if (config.inputs.checkpoint.empty()) {
    params = init_reward_params(model, init_seed);
  } else {
    params = load_checkpoint(config.inputs.checkpoint);
    if (!params.contains(kRewardHead)) throw ConfigError("inputs.checkpoint", "not a reward model (no scalar head)");
  }
  RmTrainOptions opt;
  opt.steps = plan.steps;
  opt.capacity = config.rm.capacity;
  opt.schedule = plan;
  RmTrainResult r = train_reward_model(model, std::move(params), pairs, opt);
  r.params.provenance = "train-rm";

  Metrics m;
  m.label("command", config.command);
  m.label("preset", config.preset);
  m.scalar("steps", static_cast<double>(plan.steps));
  m.scalar("pairs", static_cast<double>(pairs.size()));
  m.scalar("gold_label", labels.gold);
  m.scalar("final_loss", r.loss_trace.back());
  m.scalar("pair_accuracy", r.accuracy);
  m.scalar("mean_fill", r.mean_fill);
  m.add_series("loss", r.loss_trace);
  out.checkpoint("reward_model.ckpt", r.params);
  return out.finish("train-rm: " + std::to_string(pairs.size()) + " pairs, fill " + fixed(r.mean_fill) +
                        ", pair accuracy " + fixed(r.accuracy),
                    std::move(m));
}

CommandResult cmd_merge(const RunConfig& config) {
  const auto& paths = config.inputs.checkpoints;
  const auto& weights = config.merge.weights;
  if (paths.empty()) throw ConfigError("inputs.checkpoints", "merge needs at least one checkpoint");
  if (weights.size() != paths.size()) {
    throw ConfigError("merge.weights", std::to_string(weights.size()) + " weights for " +
                                           std::to_string(paths.size()) + " checkpoints");
  }
  try {
    validate_merge_weights(weights);
  } catch (const ValueError& e) {
    throw ConfigError("merge.weights", e.what());
  }
  MergeSpec spec;
  spec.weights = weights;
  for (const auto& p : paths) spec.inputs.push_back(std::make_shared<const Checkpoint>(load_checkpoint(p)));
  Outputs out(config.out);
  const Checkpoint merged = linear_merge(spec);

  Metrics m;
  m.label("command", config.command);
  m.scalar("inputs", static_cast<double>(paths.size()));
  m.scalar("parameters", static_cast<double>(merged.element_count()));
  m.add_series("weights", weights);
  out.checkpoint("merged.ckpt", merged);
  return out.finish("merge: " + std::to_string(paths.size()) + " checkpoints, " +
                        std::to_string(merged.element_count()) + " parameters",
                    std::move(m));
}

CommandResult cmd_soup(const RunConfig& config) {
  preset_for(config, {"sft"});
  const ModelConfig model = checked_model(config);
  const auto tasks = selected_tasks(config);
  SoupConfig sc;
  sc.instruct_steps = config.soup.instruct_steps;
  sc.expert_steps = config.soup.expert_steps;
  sc.polish_steps = config.soup.polish_steps;
  sc.seeds_per_expert = config.soup.seeds_per_expert;
  sc.cross_domain_fraction = config.soup.cross_domain_fraction;
  sc.polish_lr_divisor = config.soup.polish_lr_divisor;
  sc.batch_size = config.data.batch_size;
  sc.sft_plan = checked_schedule(config, toy_plan(1));
  if (sc.seeds_per_expert == 0) throw ConfigError("soup.seeds_per_expert", "must be >= 1");
  if (!(sc.polish_lr_divisor >= 1.0)) throw ConfigError("soup.polish_lr_divisor", "must be >= 1");
  if (!(sc.cross_domain_fraction >= 0.0 && sc.cross_domain_fraction <= 1.0)) {
    throw ConfigError("soup.cross_domain_fraction", "must lie in [0, 1]");
  }
  Outputs out(config.out);
  const SoupReport r = expert_soup_experiment(tasks, model, sc, config.seed);

  Metrics m;
  m.label("command", config.command);
  double worst_ratio = 1e300;
  for (std::size_t e = 0; e < r.tasks.size(); ++e) {
    for (std::size_t t = 0; t < r.tasks.size(); ++t) {
      m.scalar("expert_accuracy/" + r.tasks[e] + "/" + r.tasks[t], r.expert_accuracy[e][t]);
    }
  }
  for (std::size_t t = 0; t < r.tasks.size(); ++t) {
    m.scalar("soup_accuracy/" + r.tasks[t], r.soup_accuracy[t]);
    m.scalar("polished_accuracy/" + r.tasks[t], r.polished_accuracy[t]);
    m.scalar("soup_preservation_pct/" + r.tasks[t], r.soup_preservation[t]);
    m.scalar("polished_preservation_pct/" + r.tasks[t], r.polished_preservation[t]);
    worst_ratio = std::min(worst_ratio, r.polished_preservation[t]);
  }
  for (std::size_t j = 0; j < r.leave_one_out.size(); ++j) {
    m.add_series("leave_one_out/" + r.tasks[j], r.leave_one_out[j]);
  }
  out.checkpoint("soup.ckpt", r.soup);
  out.checkpoint("polished.ckpt", r.polished);
  return out.finish("soup-exp: " + std::to_string(r.tasks.size()) + " experts, worst polished preservation " +
                        fixed(worst_ratio, 1) + "%",
                    std::move(m));
}

CommandResult cmd_polish(const RunConfig& config) {
  const Preset* preset = preset_for(config, {"polish"});
  const ModelConfig model = checked_model(config);
  const auto tasks = selected_tasks(config);
  if (config.polish.prompts == 0) throw ConfigError("polish.prompts", "must be >= 1");
  Rng seeds(config.seed);
  const std::uint64_t init_seed = seeds.next();

  PolishConfig pc;
  pc.rounds = config.polish.rounds;
  pc.best_of_n = preset ? preset->best_of_n : config.polish.best_of_n;
  pc.generations = preset ? preset->generations : config.polish.generations;
  pc.offline_beta = config.polish.offline_beta;
  pc.online_beta = config.polish.online_beta;
  pc.sampling.temperature = config.polish.temperature;
  pc.batch_size = config.objective.batch_size;
  pc.seed = seeds.next();
  if (config.schedule) {
    pc.bon_plan = pc.offline_plan = pc.online_plan = checked_schedule(config, *config.schedule);
  } else if (preset) {
    pc.bon_plan = preset->schedule;
  }
  if (pc.rounds == 0) throw ConfigError("polish.rounds", "must be >= 1");
  if (pc.generations < 2) throw ConfigError("polish.generations", "online phase needs >= 2");
  if (pc.best_of_n == 0) throw ConfigError("polish.best_of_n", "must be >= 1");

  RewardFn reward = task_reward(tasks);
  std::string reward_source = "task";
  if (!config.inputs.reward_model.empty()) {
    auto rm = std::make_shared<const Checkpoint>(load_checkpoint(config.inputs.reward_model));
    if (!rm->contains(kRewardHead)) throw ConfigError("inputs.reward_model", "not a reward model (no scalar head)");
    ModelConfig rm_model = model;
    rm_model.max_seq = std::max(model.max_seq, toy::kExampleLength);
    reward = [rm, rm_model](std::span<const std::size_t> prompt, std::span<const std::size_t> completion) {
      std::vector<std::size_t> tokens(prompt.begin(), prompt.end());
      tokens.insert(tokens.end(), completion.begin(), completion.end());
      return score(rm_model, *rm, tokens);
    };
    reward_source = "reward-model";
  }
  const auto prompts = interleave(tasks, false, config.polish.prompts);
  const auto heldout = interleave(tasks, true, config.polish.prompts);
  Outputs out(config.out);
  const auto phases = polish(model, starting_policy(config, model, init_seed), prompts, heldout, reward, pc);

  Metrics m;
  m.label("command", config.command);
  m.label("preset", config.preset);
  m.label("reward", reward_source);
  for (const auto& p : phases) {
    m.scalar("heldout_reward/" + p.name, p.heldout_reward);
    m.add_series("loss/" + p.name, p.loss);
  }
  Checkpoint final = phases.back().params;
  final.provenance = "polish";
  record_accuracy(m, model, final, tasks);
  out.checkpoint("policy.ckpt", final);
  return out.finish("polish: " + std::to_string(phases.size()) + " phases, held-out reward " +
                        fixed(phases.front().heldout_reward) + " -> " + fixed(phases.back().heldout_reward),
                    std::move(m));
}

std::vector<OfflineBatch> all_pairs(std::size_t np, std::size_t n, const std::vector<double>& reward) {
  std::vector<OfflineBatch> data;
  for (std::size_t x = 0; x < np; ++x) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) data.push_back({x, {i, j}, {reward[x * n + i], reward[x * n + j]}});
    }
  }
  return data;
}

CommandResult cmd_tabular(const RunConfig& config) {
  const auto& t = config.tabular;
  if (t.instances == 0) throw ConfigError("tabular.instances", "must be >= 1");
  if (t.prompts == 0) throw ConfigError("tabular.prompts", "must be >= 1");
  if (t.completions < 2) throw ConfigError("tabular.completions", "must be >= 2");
  if (!(t.beta > 0.0)) throw ConfigError("tabular.beta", "must be > 0");
  if (t.scenario != "copg-optimality" && t.scenario != "srpo") {
    throw ConfigError("tabular.scenario", "unknown scenario '" + t.scenario + "' (copg-optimality, srpo)");
  }
  Rng rng(config.seed);
  Outputs out(config.out);
  Metrics m;
  m.label("command", config.command);
  m.label("scenario", t.scenario);
  std::vector<double> tv, extra;
  for (std::size_t i = 0; i < t.instances; ++i) {
    const std::size_t np = 1 + rng.index(t.prompts);
    const std::size_t n = 2 + rng.index(t.completions - 1);
    std::vector<double> logits(np * n);
    for (double& v : logits) v = rng.normal();
    const PolicyTable ref = PolicyTable::from_logits(np, n, logits);
    std::vector<double> scores(np * n);
    for (double& v : scores) v = rng.normal();
    if (t.scenario == "copg-optimality") {
      CopgTrainOptions opt;
      opt.beta = t.beta;
      opt.steps = t.steps;
      const CopgTrainResult r = train_copg_offline(all_pairs(np, n, scores), ref, opt);
      tv.push_back(max_total_variation(r.policy, kl_optimal_policy(ref, scores, t.beta)));
      extra.push_back(r.loss_trace.empty() ? 0.0 : r.loss_trace.back());
    } else {
      const PreferenceOracle pref = PreferenceOracle::bradley_terry(np, n, scores);
      SrpoOptions opt;
      opt.beta = t.beta;
      opt.steps = t.steps;
      opt.seed = rng.next();
      const SrpoResult solved = srpo_solve(pref, ref, opt);
      const SrpoResult exact = srpo_closed_form(pref, ref, t.beta);
      tv.push_back(max_total_variation(solved.pi, exact.pi));
      extra.push_back(solved.gap);
    }
  }
  const double worst = *std::max_element(tv.begin(), tv.end());
  m.scalar("instances", static_cast<double>(t.instances));
  m.scalar("beta", t.beta);
  m.scalar("max_tv_distance", worst);
  m.scalar("within_1e-3", static_cast<double>(std::count_if(tv.begin(), tv.end(), [](double v) { return v <= 1e-3; })));
  m.add_series("tv_distance", tv);
  m.add_series(t.scenario == "srpo" ? "saddle_gap" : "final_loss", extra);
  return out.finish("tabular " + t.scenario + ": " + std::to_string(t.instances) + " instances, max TV " +
                        format_double(worst),
                    std::move(m));
}

CommandResult cmd_cost_model(const RunConfig& config) {
  const ModelConfig model = checked_model(config);
  const auto& s = config.mesh;
  try {
    validate_mesh(s.mesh, s.devices == 0 ? s.mesh.devices() : s.devices);
  } catch (const ValueError& e) {
    throw ConfigError("mesh", e.what());
  }
  CommPlan plan;
  try {
    plan = layer_comm(model, s.mesh, s.batch, s.seq, s.bytes_per_element);
  } catch (const ValueError& e) {
    throw ConfigError("mesh", e.what());
  }
  const auto events = overlap_schedule(plan.events, s.parallel_block);
  const CostModel cost =
      bandwidth_cost_model(model, s.mesh, s.batch, s.seq, s.link_bytes_per_second, s.flops_per_second);
  const double exposed = exposed_seconds(events, cost);
  double comm = 0.0;
  for (const auto& e : events) comm += cost.comm_seconds(e);
  Outputs out(config.out);

  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::string csv = "layer,phase,subject,kind,axis,tensor,payload_bytes,overlapped_with\n";
  for (const auto& e : events) {
    table.push_back({{"layer", e.layer},
                     {"phase", comm_phase_name(e.phase)},
                     {"subject", comm_subject_name(e.subject)},
                     {"kind", collective_name(e.kind)},
                     {"axis", e.axis},
                     {"tensor", e.tensor},
                     {"payload_bytes", e.payload_bytes},
                     {"overlapped_with", e.overlapped_with.value_or("")}});
    csv += std::to_string(e.layer) + "," + comm_phase_name(e.phase) + "," + comm_subject_name(e.subject) + "," +
           collective_name(e.kind) + "," + e.axis + "," + e.tensor + "," + format_double(e.payload_bytes) + "," +
           e.overlapped_with.value_or("") + "\n";
  }
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  for (const auto& [k, v] : plan.metadata) meta[k] = v;
  out.text("events.json", nlohmann::ordered_json{{"metadata", meta}, {"events", table}}.dump(2) + "\n");
  out.text("events.csv", csv);

  Metrics m;
  m.label("command", config.command);
  for (const auto& [k, v] : plan.metadata) m.label("assumption/" + k, v);
  m.scalar("devices", static_cast<double>(s.mesh.devices()));
  m.scalar("events", static_cast<double>(events.size()));
  m.scalar("activation_events",
           static_cast<double>(std::count_if(events.begin(), events.end(), [](const CommEvent& e) {
             return e.subject == CommSubject::Activations;
           })));
  m.scalar("forward_bytes", total_bytes(events));
  m.scalar("forward_backward_bytes", total_bytes(events, true));
  m.scalar("comm_seconds", comm);
  m.scalar("exposed_seconds", exposed);
  return out.finish("cost-model: " + std::to_string(events.size()) + " collectives, " +
                        format_double(total_bytes(events)) + " forward bytes/device, exposed " +
                        format_double(exposed) + " s",
                    std::move(m));
}

CommandResult cmd_eval(const RunConfig& config) {
  if (config.inputs.checkpoint.empty()) throw ConfigError("inputs.checkpoint", "eval needs a checkpoint");
  const ModelConfig model = checked_model(config);
  const auto tasks = selected_tasks(config);
  const Checkpoint policy = starting_policy(config, model, 0);
  Outputs out(config.out);
  Metrics m;
  m.label("command", config.command);
  record_accuracy(m, model, policy, tasks);
  std::string summary = "eval: mean accuracy " + fixed(mean_of(m, "accuracy/"));
  if (!config.inputs.reference.empty()) {
    const Checkpoint other = load_checkpoint(config.inputs.reference);
    try {
      validate_params(model, other);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("inputs.reference", std::string("does not match the model config: ") + e.what());
    }
    const RewardFn reward = task_reward(tasks);
    std::vector<double> a, b;
    for (const auto& t : tasks) {
      for (const auto& e : t.eval) {
        a.push_back(reward(e.prompt(), greedy_completion(model, policy, e.prompt(), e.completion().size())));
        b.push_back(reward(e.prompt(), greedy_completion(model, other, e.prompt(), e.completion().size())));
      }
    }
    const RunMetrics o = pairwise_outcomes(a, b, config.eval.tie_tolerance);
    const double wr = win_rate(o.wins, o.ties, o.losses);
    m.scalar("wins", static_cast<double>(o.wins));
    m.scalar("ties", static_cast<double>(o.ties));
    m.scalar("losses", static_cast<double>(o.losses));
    m.scalar("win_rate", wr);
    summary += ", win rate vs reference " + fixed(wr);
  }
  return out.finish(summary, std::move(m));
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"train-sft", "train-pref", "train-rm", "merge",     "soup-exp",
                                                 "polish",    "tabular",    "cost-model", "eval"};
  return names;
}

CommandResult run_command(const RunConfig& config) {
  static const std::map<std::string, std::function<CommandResult(const RunConfig&)>> table = {
      {"train-sft", cmd_train_sft}, {"train-pref", cmd_train_pref}, {"train-rm", cmd_train_rm},
      {"merge", cmd_merge},         {"soup-exp", cmd_soup},         {"polish", cmd_polish},
      {"tabular", cmd_tabular},     {"cost-model", cmd_cost_model}, {"eval", cmd_eval}};
  auto it = table.find(config.command);
  if (it == table.end()) throw ConfigError("command", "unknown command '" + config.command + "'");
  return it->second(config);
}

Failure classify_failure(std::exception_ptr error) {
  try {
    std::rethrow_exception(error);
  } catch (const ConfigError& e) {
    return {2, "config", e.what()};
  } catch (const std::invalid_argument& e) {
    return {3, "input", e.what()};
  } catch (const FormatError& e) {
    return {4, "format", e.what()};
  } catch (const NumericError& e) {
    return {5, "numeric", e.what()};
  } catch (const std::exception& e) {
    return {1, "runtime", e.what()};
  } catch (...) {
    return {1, "runtime", "unknown error"};
  }
}

LogLevel log_level_from_env() {
  const char* v = std::getenv("ALIGNLAB_LOG");
  if (v == nullptr) return LogLevel::Info;
  const std::string s(v);
  if (s == "quiet") return LogLevel::Quiet;
  if (s == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

}  // namespace alignlab
