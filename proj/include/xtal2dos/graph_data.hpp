// SPDX-License-Identifier: Apache-2.0
//
// Crystal graphs, target spectra, JSONL datasets, the synthetic generator and
// disjoint-union batching.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace xtal2dos {

struct Neighbor {
  std::uint32_t index = 0;
  double distance = 0.0;  // Angstrom
};

/// Atoms with feature vectors and directed, distance-labelled neighbor lists.
/// Node order is whatever the source presented; nothing canonicalizes it.
struct CrystalGraph {
  std::string id;
  std::vector<std::vector<double>> nodes;
  std::vector<std::vector<Neighbor>> neighbors;

  std::size_t size() const { return nodes.size(); }
};

enum class GridKind { kPhdos, kEdos, kSynthetic };

GridKind parse_grid_kind(const std::string& name);
std::string grid_kind_name(GridKind grid);

struct Spectrum {
  std::vector<double> values;
  GridKind grid = GridKind::kSynthetic;
};

struct Sample {
  CrystalGraph graph;
  Spectrum target;
};

enum class Split : std::uint8_t { kTrain, kVal, kTest };

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<Split> splits;  // empty until assign_splits()

  std::size_t size() const { return samples.size(); }
  /// Indices of the samples in one split, in dataset order.
  std::vector<std::size_t> indices(Split split) const;
  std::vector<std::size_t> all_indices() const;
};

struct GraphLimits {
  std::size_t d_atom = 92;
  std::size_t n_max_nbr = 12;
};

/// Throws ValidationError naming the graph id on any invariant breach.
void validate_graph(const CrystalGraph& graph, const GraphLimits& limits);
/// Throws ValidationError (length, finiteness, normalization) or DomainError
/// (negative entry) naming the record id.
void validate_spectrum(const Spectrum& spectrum, std::size_t l_y, const std::string& id);

/// Gaussian radial basis with evenly spaced centers in [0, r_cut] and width
/// equal to the center spacing.
struct GaussianBasis {
  std::size_t count = 41;
  double r_cut = 8.0;

  double spacing() const { return r_cut / static_cast<double>(count - 1); }
  double center(std::size_t k) const { return spacing() * static_cast<double>(k); }
};

/// Component k = exp(-(distance - center_k)^2 / width^2). Throws
/// ValidationError for non-positive or non-finite distances.
std::vector<double> gaussian_basis_expand(double distance, const GaussianBasis& basis);
std::vector<double> gaussian_basis_expand(double distance, const GaussianBasis& basis, double width);

/// Reads a JSONL dataset; an empty file yields an empty dataset.
Dataset load_dataset(const std::filesystem::path& path, std::size_t l_y, const GraphLimits& limits,
                     GridKind grid = GridKind::kSynthetic);
void save_dataset(const Dataset& dataset, const std::filesystem::path& path);
/// One JSONL record, without the trailing newline.
std::string to_json_line(const Sample& sample);

struct SyntheticOptions {
  std::size_t count = 64;
  std::uint64_t seed = 0;
  std::size_t l_y = 51;
  std::size_t min_atoms = 4;
  std::size_t max_atoms = 20;
  std::size_t elements = 8;
  std::size_t d_atom = 92;
  std::size_t n_max_nbr = 12;
};

/// Random crystal-like graphs whose targets are a deterministic function of
/// the graph: one Gaussian per atom on the spectrum grid, centred by the
/// atom's pseudo-element and shifted by its mean neighbor distance, summed and
/// normalized to unit mass.
Dataset generate_synthetic(const SyntheticOptions& options);

/// The generator's target map, exposed for tests and tooling.
std::vector<double> synthetic_spectrum(std::span<const std::size_t> elements,
                                       std::span<const double> mean_neighbor_distance, std::size_t l_y,
                                       std::size_t element_count);

/// Mean distance over each node's neighbor list.
std::vector<double> mean_neighbor_distance(const CrystalGraph& graph);

/// Hash-based assignment: a pure function of (sample id, seed). Throws
/// ConfigError when the ratios are negative or do not sum to 1 within 1e-9.
void assign_splits(Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed);
Split split_of(const std::string& id, const SplitRatios& ratios, std::uint64_t seed);

/// Directed edges of a (batched) graph, grouped by the attending node.
struct EdgeIndex {
  std::size_t nodes = 0;
  std::vector<std::uint32_t> source;  // neighbor j
  std::vector<std::uint32_t> target;  // attending node i
  std::vector<std::size_t> offsets;   // edges of node i are [offsets[i], offsets[i+1])
  std::vector<double> gcn_norm;       // 1 / sqrt(|N(i)| |N(j)|)

  std::size_t edges() const { return source.size(); }
};

/// Several graphs merged into one block-diagonal graph.
struct GraphBatch {
  std::size_t graphs = 0;
  std::size_t d_atom = 0;
  std::size_t d_edge = 0;
  std::vector<double> node_features;  // [nodes, d_atom]
  std::vector<double> edge_features;  // [edges, d_edge]
  EdgeIndex edges;
  std::vector<std::size_t> node_offsets;  // graph g owns nodes [node_offsets[g], node_offsets[g+1])

  std::size_t nodes() const { return edges.nodes; }
};

GraphBatch make_batch(std::span<const CrystalGraph* const> graphs, const GaussianBasis& basis, std::size_t d_atom);

}  // namespace xtal2dos
