// SPDX-License-Identifier: Apache-2.0
#include "alignlab/presets.h"

#include "alignlab/errors.h"

namespace alignlab {

namespace {

SchedulePlan schedule(ScheduleKind kind, double peak, double end, double weight_decay, double clip,
                      std::size_t steps = kPresetDefaultSteps) {
  SchedulePlan p;
  p.kind = kind;
  p.peak = peak;
  p.end = end;
  p.steps = steps;
  p.beta1 = 0.9;
  p.beta2 = 0.95;
  p.weight_decay = weight_decay;
  p.grad_clip = clip;
  return p;
}

std::vector<Preset> build() {
  using K = ScheduleKind;
  std::vector<Preset> all;
  auto add = [&](std::string name, std::string objective, SchedulePlan plan) -> Preset& {
    Preset p;
    p.name = std::move(name);
    p.objective = std::move(objective);
    p.schedule = plan;
    all.push_back(std::move(p));
    return all.back();
  };
  add("sft-multilingual", "sft", schedule(K::Cosine, 2.5e-5, 1.25e-5, 0.1, 0.0));
  add("code-sft", "sft", schedule(K::Cosine, 5e-5, 5e-6, 0.1, 1.0));
  add("code-rl", "copg", schedule(K::Constant, 2e-6, 2e-6, 0.1, 1.0)).beta = 0.06;
  add("reasoning-sft", "sft", schedule(K::Cosine, 2.5e-5, 2.5e-6, 0.01, 1.0));
  add("reasoning-copg", "copg", schedule(K::Constant, 2e-6, 2e-6, 0.0, 1.0));
  add("long-context", "sft", schedule(K::Cosine, 2.5e-5, 2.5e-6, 0.01, 1.0));
  add("safety-sft", "sft", schedule(K::Cosine, 1e-4, 1e-5, 1e-3, 1.0));
  {
    Preset& p = add("safety-ipo", "ipo", schedule(K::Cosine, 1e-6, 1e-7, 1e-3, 1.0));
    p.beta = 0.03;
    p.sft_weight = 1.0;
  }
  add("cooldown", "pretrain", schedule(K::Linear, 2.5e-4, 1e-6, 0.0, 0.0, 50000));
  {
    Preset& p = add("rm-stage1", "rm", schedule(K::Cosine, 4e-5, 0.0, 0.0, 0.0, 3907));
    p.batch_size = 1024;
    p.gold_label = 0.999;
    p.tie_label = 0.5;
  }
  {
    Preset& p = add("rm-stage2", "rm", schedule(K::Cosine, 3e-6, 0.0, 0.0, 0.0, 21875));
    p.batch_size = 16;
    p.gold_label = 0.999;
    p.tie_label = 0.5;
  }
  {
    Preset& p = add("polish", "polish", schedule(K::Cosine, 1e-3, 1e-4, 0.0, 1.0, 40));
    p.best_of_n = 4;
    p.generations = 2;
  }
  for (const Preset& p : all) p.schedule.validate();
  return all;
}

}  // namespace

std::span<const Preset> presets() {
  static const std::vector<Preset> all = build();
  return all;
}

const Preset& find_preset(const std::string& name) {
  std::string known;
  for (const Preset& p : presets()) {
    if (p.name == name) return p;
    known += (known.empty() ? "" : ", ") + p.name;
  }
  throw ValueError("unknown preset '" + name + "' (known: " + known + ")");
}

}  // namespace alignlab
