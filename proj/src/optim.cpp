// SPDX-License-Identifier: Apache-2.0
#include "alignlab/optim.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "alignlab/errors.h"

namespace alignlab {

const char* schedule_kind_name(ScheduleKind kind) {
  switch (kind) {
    case ScheduleKind::Linear: return "linear";
    case ScheduleKind::Cosine: return "cosine";
    case ScheduleKind::Constant: return "constant";
  }
  return "?";
}

ScheduleKind schedule_kind_from_name(const std::string& name) {
  if (name == "linear") return ScheduleKind::Linear;
  if (name == "cosine") return ScheduleKind::Cosine;
  if (name == "constant") return ScheduleKind::Constant;
  throw ValueError("unknown schedule kind '" + name + "'");
}

void SchedulePlan::validate() const {
  if (!(end >= 0.0) || !(peak >= end)) throw ValueError("schedule: need peak >= end >= 0");
  if (steps < 1) throw ValueError("schedule: steps must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ValueError("schedule: betas outside [0, 1)");
  if (!(eps > 0.0)) throw ValueError("schedule: eps must be positive");
  if (!(weight_decay >= 0.0)) throw ValueError("schedule: weight decay must be >= 0");
  if (!(grad_clip >= 0.0)) throw ValueError("schedule: grad clip must be >= 0");
}

double lr_value(const SchedulePlan& plan, std::size_t step) {
  if (step > plan.steps) {
    throw ValueError("lr_value: step " + std::to_string(step) + " beyond schedule length " + std::to_string(plan.steps));
  }
  const double frac = static_cast<double>(step) / static_cast<double>(plan.steps);
  switch (plan.kind) {
    case ScheduleKind::Linear:
      return plan.peak + (plan.end - plan.peak) * frac;
    case ScheduleKind::Cosine:
      return plan.end + (plan.peak - plan.end) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
    case ScheduleKind::Constant:
      return plan.peak;
  }
  return plan.peak;
}

AdamW::AdamW(SchedulePlan plan) : plan_(std::move(plan)) { plan_.validate(); }

OptimizerStep AdamW::step(Checkpoint& params, const BoundParams& bound, const Gradients& grads) {
  if (names_.empty()) {
    for (const auto& [name, t] : params.entries()) {
      names_.push_back(name);
      m_.emplace_back(t.size(), 0.0);
      v_.emplace_back(t.size(), 0.0);
    }
  }
  if (names_.size() != params.size()) throw ValueError("AdamW: parameter set changed between steps");

  OptimizerStep out;
  out.lr = lr_value(plan_, std::min(t_, plan_.steps));
  // Scaled by the largest entry so huge but finite gradients do not overflow the norm.
  double largest = 0.0;
  bool finite = true;
  for (const auto& name : names_) {
    const Var v = bound[name];
    if (!grads.contains(v)) continue;
    for (double g : grads[v].values()) {
      finite = finite && std::isfinite(g);
      largest = std::max(largest, std::abs(g));
    }
  }
  double sq = 0.0;
  if (finite && largest > 0.0) {
    for (const auto& name : names_) {
      const Var v = bound[name];
      if (!grads.contains(v)) continue;
      for (double g : grads[v].values()) sq += (g / largest) * (g / largest);
    }
  }
  out.grad_norm = finite ? largest * std::sqrt(sq) : std::numeric_limits<double>::quiet_NaN();
  if (!std::isfinite(out.grad_norm)) throw NumericError("AdamW: non-finite gradient", t_);
  double scale = 1.0;
  if (plan_.grad_clip > 0.0 && out.grad_norm > plan_.grad_clip) {
    scale = plan_.grad_clip / out.grad_norm;
    out.clipped = true;
  }

  ++t_;
  const double bc1 = 1.0 - std::pow(plan_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(plan_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < names_.size(); ++p) {
    const Var v = bound[names_[p]];
    if (!grads.contains(v)) continue;
    const std::span<const double> g = grads[v].values();
    std::span<double> theta = params.at(names_[p]).mutable_values();
    std::vector<double>& m = m_[p];
    std::vector<double>& s = v_[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i] * scale;
      m[i] = plan_.beta1 * m[i] + (1.0 - plan_.beta1) * gi;
      s[i] = plan_.beta2 * s[i] + (1.0 - plan_.beta2) * gi * gi;
      const double update = (m[i] / bc1) / (std::sqrt(s[i] / bc2) + plan_.eps);
      theta[i] -= out.lr * (update + plan_.weight_decay * theta[i]);
    }
  }
  return out;
}

}  // namespace alignlab
