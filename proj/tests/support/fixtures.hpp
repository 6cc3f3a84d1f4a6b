// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "xtal2dos/graph_data.hpp"
#include "xtal2dos/random.hpp"

namespace xtal2dos::testing {

/// n nodes with uniform(0,1) features of width d_atom; every node gets
/// 1..max_nbr distinct neighbors (never itself when n > 1) at distances in [1, 5).
CrystalGraph random_graph(Rng& rng, std::size_t n, std::size_t d_atom, std::size_t max_nbr,
                          const std::string& id = "g");

/// Same graph with node i renamed perm[i].
CrystalGraph permute_graph(const CrystalGraph& g, const std::vector<std::uint32_t>& perm);

GraphBatch batch_of(const std::vector<CrystalGraph>& graphs, std::size_t d_atom, std::size_t d_edge = 41);

std::vector<std::uint32_t> random_permutation(std::size_t n, Rng& rng);

}  // namespace xtal2dos::testing
