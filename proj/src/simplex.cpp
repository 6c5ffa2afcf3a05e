// SPDX-License-Identifier: Apache-2.0
#include "alignlab/simplex.h"

#include <algorithm>
#include <cmath>
#include <string>

#include "alignlab/errors.h"

namespace alignlab {

void check_simplex(std::span<const double> row, double tol, const char* what) {
  if (row.empty()) throw ValueError(std::string(what) + ": empty");
  double total = 0.0;
  for (double p : row) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ValueError(std::string(what) + ": negative or non-finite mass");
    total += p;
  }
  if (std::abs(total - 1.0) > tol) {
    throw ValueError(std::string(what) + ": sums to " + std::to_string(total) + ", not 1");
  }
}

double exact_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ValueError("exact_kl: size mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 0.0) continue;
    if (q[i] <= 0.0) throw ValueError("exact_kl: support violation at index " + std::to_string(i));
    kl += p[i] * std::log(p[i] / q[i]);
  }
  return kl;
}

double total_variation(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ValueError("total_variation: size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
  return 0.5 * acc;
}

std::vector<double> softmax_row(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) total += (out[i] = std::exp(logits[i] - mx));
  for (double& v : out) v /= total;
  return out;
}

}  // namespace alignlab
