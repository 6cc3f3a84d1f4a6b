// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "xtal2dos/autodiff.hpp"
#include "xtal2dos/random.hpp"

namespace xtal2dos::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // name of the tensor with the largest error
};

/// Central differences over every entry of every tensor in `inputs`, compared
/// with the reverse sweep. `build` maps leaf Vars (one per input, in order) to
/// a scalar. Per tensor: |g_a - g_n| / max(|g_a|, |g_n|, floor), L2 norms.
GradCheckResult grad_check(std::vector<ad::Parameter*> inputs,
                           const std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>& build,
                           double eps = 1e-5, double floor = 1e-6);

/// sum(out * R) with R fixed random weights of out's shape; keeps every
/// output entry in the objective with a distinct weight.
ad::Var random_projection(ad::Var out, Rng& rng);

/// Uniform(lo, hi) values.
std::vector<double> random_values(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0);
ad::Parameter random_parameter(const std::string& name, ad::Shape shape, Rng& rng, double lo = -1.0,
                               double hi = 1.0);

struct LayerGradResult {
  std::string layer;
  int instances = 0;
  double max_rel_error = 0.0;
  std::string worst;
};

/// Every layer of the model on `instances` random small cases each.
std::vector<LayerGradResult> run_layer_gradient_suite(int instances, std::uint64_t seed);

}  // namespace xtal2dos::testing
