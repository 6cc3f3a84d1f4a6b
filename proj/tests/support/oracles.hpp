// SPDX-License-Identifier: Apache-2.0
//
// Reference computations written independently of the library kernels.

#pragma once

#include <span>
#include <vector>

namespace xtal2dos::testing {

/// exp(x_i - max) / sum.
std::vector<double> softmax_oracle(std::span<const double> x);

/// Optimal 1-D transport cost between two non-negative histograms on a
/// uniform grid, each rescaled to unit mass, by walking supply and demand
/// from the left and moving mass bin to bin.
double transport_oracle(std::span<const double> a, std::span<const double> b, double bin_width = 1.0);

/// Dense single-head attention for one query against a key set:
/// out = sum_j softmax_j(q.k_j / sqrt(d)) v_j.
std::vector<double> attention_oracle(std::span<const double> q, const std::vector<std::vector<double>>& keys,
                                     const std::vector<std::vector<double>>& values);

}  // namespace xtal2dos::testing
