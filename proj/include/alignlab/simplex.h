// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

namespace alignlab {

/// Row must be nonnegative and sum to 1 within tol; throws ValueError otherwise.
void check_simplex(std::span<const double> row, double tol = 1e-12, const char* what = "distribution");

/// sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0; ValueError where p_i > 0 and q_i = 0.
double exact_kl(std::span<const double> p, std::span<const double> q);

/// Half the L1 distance.
double total_variation(std::span<const double> p, std::span<const double> q);

std::vector<double> softmax_row(std::span<const double> logits);

}  // namespace alignlab
