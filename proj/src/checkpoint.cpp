// SPDX-License-Identifier: Apache-2.0
#include "alignlab/checkpoint.h"

#include <algorithm>
#include <cmath>

#include "alignlab/errors.h"

namespace alignlab {

void Checkpoint::insert(std::string name, Tensor value) {
  if (name.empty()) throw ValueError("checkpoint: empty parameter name");
  if (index_.contains(name)) throw ValueError("checkpoint: duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(value));
}

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("checkpoint: no parameter '" + name + "'");
  return entries_[it->second].second;
}

Tensor& Checkpoint::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ValueError("checkpoint: no parameter '" + name + "'");
  return entries_[it->second].second;
}

std::vector<std::string> Checkpoint::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

std::size_t Checkpoint::element_count() const {
  std::size_t total = 0;
  for (const auto& [_, t] : entries_) total += t.size();
  return total;
}

bool Checkpoint::same_schema(const Checkpoint& other) const {
  if (size() != other.size()) return false;
  return std::all_of(entries_.begin(), entries_.end(), [&](const Entry& e) {
    return other.contains(e.first) && other.at(e.first).shape() == e.second.shape();
  });
}

bool Checkpoint::bitwise_equal(const Checkpoint& other) const {
  if (!same_schema(other)) return false;
  return std::all_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return other.at(e.first).bitwise_equal(e.second); });
}

double Checkpoint::max_abs_diff(const Checkpoint& other) const {
  if (!same_schema(other)) throw ShapeError("checkpoint: schemas differ");
  double worst = 0.0;
  for (const auto& [name, t] : entries_) {
    const Tensor& o = other.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) worst = std::max(worst, std::abs(t[i] - o[i]));
  }
  return worst;
}

}  // namespace alignlab
