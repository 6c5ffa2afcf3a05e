// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "alignlab/tensor.h"

namespace alignlab {

/// Named parameter tensors in insertion order, plus provenance metadata.
class Checkpoint {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void insert(std::string name, Tensor value);
  bool contains(const std::string& name) const { return index_.contains(name); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);

  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<std::string> names() const;
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t element_count() const;

  /// Same parameter names with the same shapes, in any order.
  bool same_schema(const Checkpoint& other) const;
  /// Same schema and bitwise-equal values.
  bool bitwise_equal(const Checkpoint& other) const;
  /// Largest absolute elementwise difference; requires same_schema.
  double max_abs_diff(const Checkpoint& other) const;

  std::string provenance;
  std::uint64_t step = 0;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace alignlab
