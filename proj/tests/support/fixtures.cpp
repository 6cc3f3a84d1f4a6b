// SPDX-License-Identifier: Apache-2.0
#include "fixtures.hpp"

#include <algorithm>
#include <numeric>

namespace xtal2dos::testing {

std::vector<std::uint32_t> random_permutation(std::size_t n, Rng& rng) {
  std::vector<std::uint32_t> p(n);
  std::iota(p.begin(), p.end(), 0u);
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
  return p;
}

CrystalGraph random_graph(Rng& rng, std::size_t n, std::size_t d_atom, std::size_t max_nbr, const std::string& id) {
  CrystalGraph g;
  g.id = id;
  g.nodes.assign(n, std::vector<double>(d_atom));
  for (auto& row : g.nodes) {
    for (auto& v : row) v = rng.uniform();
  }
  g.neighbors.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint32_t> candidates;
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i || n == 1) candidates.push_back(static_cast<std::uint32_t>(j));
    }
    const auto order = random_permutation(candidates.size(), rng);
    const std::size_t count = 1 + rng.below(std::min(max_nbr, candidates.size()));
    for (std::size_t k = 0; k < count; ++k) {
      g.neighbors[i].push_back({candidates[order[k]], rng.uniform(1.0, 5.0)});
    }
  }
  return g;
}

CrystalGraph permute_graph(const CrystalGraph& g, const std::vector<std::uint32_t>& perm) {
  CrystalGraph out;
  out.id = g.id;
  out.nodes.resize(g.size());
  out.neighbors.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    out.nodes[perm[i]] = g.nodes[i];
    for (const auto& nb : g.neighbors[i]) out.neighbors[perm[i]].push_back({perm[nb.index], nb.distance});
  }
  return out;
}

GraphBatch batch_of(const std::vector<CrystalGraph>& graphs, std::size_t d_atom, std::size_t d_edge) {
  std::vector<const CrystalGraph*> ptrs;
  for (const auto& g : graphs) ptrs.push_back(&g);
  GaussianBasis basis;
  basis.count = d_edge;
  return make_batch(ptrs, basis, d_atom);
}

}  // namespace xtal2dos::testing
