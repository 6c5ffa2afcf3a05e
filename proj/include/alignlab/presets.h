// SPDX-License-Identifier: Apache-2.0
//
// Named hyperparameter presets for the large-model training recipes, plus the toy
// polishing defaults. Step counts the recipes leave open are toy placeholders.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "alignlab/optim.h"

namespace alignlab {

struct Preset {
  std::string name;
  /// sft, dpo, ipo, copg, rm, polish or pretrain.
  std::string objective;
  SchedulePlan schedule;
  /// KL / preference regularisation strength; 0 when the objective has none.
  double beta = 0.0;
  /// Weight on an auxiliary SFT term (combined_loss); 0 when absent.
  double sft_weight = 0.0;
  std::size_t batch_size = 0;
  std::size_t best_of_n = 0;
  std::size_t generations = 0;
  double gold_label = 0.0;
  double tie_label = 0.0;

  bool operator==(const Preset&) const = default;
};

/// Placeholder length for schedules whose step count is not part of the recipe.
inline constexpr std::size_t kPresetDefaultSteps = 1000;

std::span<const Preset> presets();

/// Throws ValueError naming the unknown preset and listing the known ones.
const Preset& find_preset(const std::string& name);

}  // namespace alignlab
