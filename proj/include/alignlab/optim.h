// SPDX-License-Identifier: Apache-2.0
//
// Learning-rate schedules and an AdamW optimizer over checkpoint parameters.
#pragma once

#include <string>
#include <vector>

#include "alignlab/checkpoint.h"
#include "alignlab/model.h"

namespace alignlab {

enum class ScheduleKind { Linear, Cosine, Constant };

const char* schedule_kind_name(ScheduleKind kind);
ScheduleKind schedule_kind_from_name(const std::string& name);

struct SchedulePlan {
  ScheduleKind kind = ScheduleKind::Constant;
  double peak = 1e-3;
  double end = 1e-3;
  std::size_t steps = 1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double grad_clip = 0.0;

  /// peak >= end >= 0, steps >= 1, betas in [0, 1), nonnegative decay and clip.
  void validate() const;

  bool operator==(const SchedulePlan&) const = default;
};

/// linear:   peak + (end - peak) * step / steps
/// cosine:   end + (peak - end) * (1 + cos(pi * step / steps)) / 2
/// constant: peak
double lr_value(const SchedulePlan& plan, std::size_t step);

struct OptimizerStep {
  double lr = 0.0;
  /// Global gradient norm before clipping.
  double grad_norm = 0.0;
  bool clipped = false;
};

/// Adam moments with decoupled weight decay (theta -= lr * wd * theta) and global-norm clipping.
class AdamW {
 public:
  explicit AdamW(SchedulePlan plan);

  /// Updates every parameter bound in `bound` that has a gradient. Non-finite gradients
  /// throw NumericError carrying the optimizer step index.
  OptimizerStep step(Checkpoint& params, const BoundParams& bound, const Gradients& grads);

  std::size_t steps_taken() const noexcept { return t_; }
  const SchedulePlan& plan() const noexcept { return plan_; }

 private:
  SchedulePlan plan_;
  std::size_t t_ = 0;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace alignlab
