// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/graph_data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "xtal2dos/error.hpp"
#include "xtal2dos/random.hpp"

namespace xtal2dos {

namespace {

using ordered_json = nlohmann::ordered_json;

// Fixed synthetic-structure constants.
constexpr double kVolumePerAtom = 10.0;  // A^3
constexpr double kMinSeparation = 1.0;   // A
constexpr double kFeatureNoise = 0.1;
constexpr double kPeakWidthFraction = 0.05;
constexpr double kShiftPerAngstrom = 0.04;  // fraction of l_y per A
constexpr double kReferenceDistance = 2.5;  // A

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string record_label(std::size_t line, const std::string& id) {
  std::string out = "line " + std::to_string(line);
  if (!id.empty()) out += " (record '" + id + "')";
  return out;
}

}  // namespace

GridKind parse_grid_kind(const std::string& name) {
  if (name == "phdos") return GridKind::kPhdos;
  if (name == "edos") return GridKind::kEdos;
  if (name == "synthetic") return GridKind::kSynthetic;
  throw ConfigError("unknown grid kind '" + name + "' (expected phdos, edos or synthetic)");
}

std::string grid_kind_name(GridKind grid) {
  switch (grid) {
    case GridKind::kPhdos: return "phdos";
    case GridKind::kEdos: return "edos";
    case GridKind::kSynthetic: return "synthetic";
  }
  return "synthetic";
}

std::vector<std::size_t> Dataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    if (splits[i] == split) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::all_indices() const {
  std::vector<std::size_t> out(samples.size());
  std::iota(out.begin(), out.end(), std::size_t{0});
  return out;
}

void validate_graph(const CrystalGraph& graph, const GraphLimits& limits) {
  const std::string where = "graph '" + graph.id + "': ";
  const std::size_t n = graph.nodes.size();
  if (n == 0) throw ValidationError(where + "no atoms");
  if (graph.neighbors.size() != n) {
    throw ValidationError(where + std::to_string(graph.neighbors.size()) + " neighbor lists for " + std::to_string(n) +
                          " atoms");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (graph.nodes[i].size() != limits.d_atom) {
      throw ValidationError(where + "atom " + std::to_string(i) + " has " + std::to_string(graph.nodes[i].size()) +
                            " features, expected " + std::to_string(limits.d_atom));
    }
    for (double f : graph.nodes[i]) {
      if (!std::isfinite(f)) throw ValidationError(where + "atom " + std::to_string(i) + " has a non-finite feature");
    }
    const auto& nbrs = graph.neighbors[i];
    if (nbrs.empty()) throw ValidationError(where + "atom " + std::to_string(i) + " has no neighbors");
    if (nbrs.size() > limits.n_max_nbr) {
      throw ValidationError(where + "atom " + std::to_string(i) + " has " + std::to_string(nbrs.size()) +
                            " neighbors, limit is " + std::to_string(limits.n_max_nbr));
    }
    for (const auto& nb : nbrs) {
      if (nb.index >= n) {
        throw ValidationError(where + "atom " + std::to_string(i) + " references neighbor " + std::to_string(nb.index) +
                              " out of range");
      }
      if (!(nb.distance > 0.0) || !std::isfinite(nb.distance)) {
        throw ValidationError(where + "atom " + std::to_string(i) + " has non-positive or non-finite distance");
      }
    }
  }
}

void validate_spectrum(const Spectrum& spectrum, std::size_t l_y, const std::string& id) {
  const std::string where = "record '" + id + "': ";
  if (spectrum.values.size() != l_y) {
    throw ValidationError(where + "target has " + std::to_string(spectrum.values.size()) + " values, expected " +
                          std::to_string(l_y));
  }
  double total = 0.0;
  for (std::size_t k = 0; k < l_y; ++k) {
    const double v = spectrum.values[k];
    if (!std::isfinite(v)) throw ValidationError(where + "non-finite target value at " + std::to_string(k));
    if (v < 0.0) throw DomainError(where + "negative target value at " + std::to_string(k));
    total += v;
  }
  if (spectrum.grid != GridKind::kEdos && std::abs(total - 1.0) > 1e-6) {
    throw ValidationError(where + "target sums to " + std::to_string(total) + ", expected 1 for " +
                          grid_kind_name(spectrum.grid));
  }
}

std::vector<double> gaussian_basis_expand(double distance, const GaussianBasis& basis) {
  return gaussian_basis_expand(distance, basis, basis.spacing());
}

std::vector<double> gaussian_basis_expand(double distance, const GaussianBasis& basis, double width) {
  if (!(distance > 0.0) || !std::isfinite(distance)) {
    throw ValidationError("gaussian_basis_expand: distance must be positive and finite, got " +
                          std::to_string(distance));
  }
  if (basis.count < 2 || !(width > 0.0)) throw ConfigError("gaussian_basis_expand: degenerate basis");
  std::vector<double> out(basis.count);
  for (std::size_t k = 0; k < basis.count; ++k) {
    const double z = (distance - basis.center(k)) / width;
    out[k] = std::exp(-z * z);
  }
  return out;
}

std::string to_json_line(const Sample& sample) {
  ordered_json rec;
  rec["id"] = sample.graph.id;
  rec["nodes"] = sample.graph.nodes;
  ordered_json edges = ordered_json::array();
  for (const auto& nbrs : sample.graph.neighbors) {
    ordered_json list = ordered_json::array();
    for (const auto& nb : nbrs) list.push_back(ordered_json::array({nb.index, nb.distance}));
    edges.push_back(std::move(list));
  }
  rec["edges"] = std::move(edges);
  rec["target"] = sample.target.values;
  return rec.dump();
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  for (const auto& s : dataset.samples) out << to_json_line(s) << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Dataset load_dataset(const std::filesystem::path& path, std::size_t l_y, const GraphLimits& limits, GridKind grid) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path.string() + "'");
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::string id;
    try {
      const auto rec = nlohmann::json::parse(line);
      if (!rec.is_object()) throw ValidationError("record is not a JSON object");
      for (const char* key : {"id", "nodes", "edges", "target"}) {
        if (!rec.contains(key)) throw ValidationError(std::string("missing field '") + key + "'");
      }
      if (!rec["id"].is_string()) throw ValidationError("field 'id' must be a string");
      id = rec["id"].get<std::string>();
      Sample s;
      s.graph.id = id;
      s.graph.nodes = rec["nodes"].get<std::vector<std::vector<double>>>();
      const auto& edges = rec["edges"];
      if (!edges.is_array()) throw ValidationError("field 'edges' must be an array of neighbor lists");
      for (const auto& list : edges) {
        if (!list.is_array()) throw ValidationError("each neighbor list must be an array");
        std::vector<Neighbor> nbrs;
        for (const auto& pair : list) {
          if (!pair.is_array() || pair.size() != 2 || !pair[0].is_number_integer() || pair[0].get<std::int64_t>() < 0 ||
              !pair[1].is_number()) {
            throw ValidationError("neighbor entries must be [index, distance]");
          }
          nbrs.push_back({static_cast<std::uint32_t>(pair[0].get<std::int64_t>()), pair[1].get<double>()});
        }
        s.graph.neighbors.push_back(std::move(nbrs));
      }
      s.target.values = rec["target"].get<std::vector<double>>();
      s.target.grid = grid;
      validate_graph(s.graph, limits);
      validate_spectrum(s.target, l_y, id);
      ds.samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError("dataset '" + path.string() + "' " + record_label(line_no, id) + ": " + e.what());
    } catch (const DomainError& e) {
      throw DomainError("dataset '" + path.string() + "' " + record_label(line_no, id) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("dataset '" + path.string() + "' " + record_label(line_no, id) + ": " + e.what());
    }
  }
  return ds;
}

std::vector<double> mean_neighbor_distance(const CrystalGraph& graph) {
  std::vector<double> out(graph.size(), 0.0);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const auto& nbrs = graph.neighbors[i];
    if (nbrs.empty()) continue;
    double s = 0.0;
    for (const auto& nb : nbrs) s += nb.distance;
    out[i] = s / static_cast<double>(nbrs.size());
  }
  return out;
}

std::vector<double> synthetic_spectrum(std::span<const std::size_t> elements,
                                       std::span<const double> mean_neighbor_distance, std::size_t l_y,
                                       std::size_t element_count) {
  if (elements.size() != mean_neighbor_distance.size() || elements.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "synthetic_spectrum: need one distance per atom");
  }
  const double ly = static_cast<double>(l_y);
  const double width = kPeakWidthFraction * ly;
  std::vector<double> out(l_y, 0.0);
  for (std::size_t a = 0; a < elements.size(); ++a) {
    const double frac = element_count > 1
                            ? static_cast<double>(elements[a]) / static_cast<double>(element_count - 1)
                            : 0.5;
    const double center = ly * (0.15 + 0.7 * frac) +
                          kShiftPerAngstrom * ly * (mean_neighbor_distance[a] - kReferenceDistance);
    for (std::size_t t = 0; t < l_y; ++t) {
      const double z = (static_cast<double>(t) - center) / width;
      out[t] += std::exp(-0.5 * z * z);
    }
  }
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  if (total > 0.0) {
    for (auto& v : out) v /= total;
  } else {
    std::fill(out.begin(), out.end(), 1.0 / ly);
  }
  return out;
}

Dataset generate_synthetic(const SyntheticOptions& opt) {
  if (opt.count == 0) throw ConfigError("generate_synthetic: count must be >= 1");
  if (opt.l_y == 0) throw ConfigError("generate_synthetic: l_y must be >= 1");
  if (opt.min_atoms < 2 || opt.max_atoms < opt.min_atoms) {
    throw ConfigError("generate_synthetic: atom range must satisfy 2 <= min <= max");
  }
  if (opt.elements == 0 || opt.elements > opt.d_atom) {
    throw ConfigError("generate_synthetic: need 1 <= elements <= d_atom");
  }
  if (opt.n_max_nbr == 0) throw ConfigError("generate_synthetic: n_max_nbr must be >= 1");

  // One feature code per pseudo-element, shared by every atom of that element.
  Rng table_rng(mix64(opt.seed ^ 0x5eedf00dULL));
  std::vector<std::vector<double>> codes(opt.elements, std::vector<double>(opt.d_atom));
  for (std::size_t e = 0; e < opt.elements; ++e) {
    for (auto& v : codes[e]) v = kFeatureNoise * table_rng.uniform();
    codes[e][e] = 1.0;
  }

  Dataset ds;
  ds.samples.reserve(opt.count);
  for (std::size_t idx = 0; idx < opt.count; ++idx) {
    Rng rng(mix64(opt.seed) ^ mix64(idx + 1));
    const std::size_t n = opt.min_atoms + rng.below(opt.max_atoms - opt.min_atoms + 1);
    std::vector<std::size_t> elements(n);
    for (auto& e : elements) e = rng.below(opt.elements);

    const double box = std::cbrt(kVolumePerAtom * static_cast<double>(n));
    std::vector<std::array<double, 3>> pos;
    pos.reserve(n);
    while (pos.size() < n) {
      std::array<double, 3> p{};
      for (int attempt = 0; attempt < 1000; ++attempt) {
        p = {rng.uniform(0.0, box), rng.uniform(0.0, box), rng.uniform(0.0, box)};
        bool ok = true;
        for (const auto& q : pos) {
          const double dx = p[0] - q[0], dy = p[1] - q[1], dz = p[2] - q[2];
          if (dx * dx + dy * dy + dz * dz < kMinSeparation * kMinSeparation) {
            ok = false;
            break;
          }
        }
        if (ok) break;
      }
      pos.push_back(p);
    }

    Sample s;
    s.graph.id = "synth-" + std::to_string(opt.seed) + "-" + std::to_string(idx);
    s.graph.nodes.reserve(n);
    for (auto e : elements) s.graph.nodes.push_back(codes[e]);
    const std::size_t k = std::min(opt.n_max_nbr, n - 1);
    s.graph.neighbors.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<Neighbor> cand;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double dx = pos[i][0] - pos[j][0], dy = pos[i][1] - pos[j][1], dz = pos[i][2] - pos[j][2];
        double dist = std::sqrt(dx * dx + dy * dy + dz * dz);
        if (!(dist > 0.0)) dist = 1e-6;
        cand.push_back({static_cast<std::uint32_t>(j), dist});
      }
      std::sort(cand.begin(), cand.end(), [](const Neighbor& a, const Neighbor& b) {
        return a.distance != b.distance ? a.distance < b.distance : a.index < b.index;
      });
      cand.resize(k);
      s.graph.neighbors[i] = std::move(cand);
    }
    s.target.grid = GridKind::kSynthetic;
    s.target.values = synthetic_spectrum(elements, mean_neighbor_distance(s.graph), opt.l_y, opt.elements);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Split split_of(const std::string& id, const SplitRatios& ratios, std::uint64_t seed) {
  const double u = static_cast<double>(mix64(fnv1a64(id) ^ mix64(seed)) >> 11) * 0x1.0p-53;
  if (u < ratios.train) return Split::kTrain;
  if (u < ratios.train + ratios.val) return Split::kVal;
  return Split::kTest;
}

void assign_splits(Dataset& dataset, const SplitRatios& ratios, std::uint64_t seed) {
  if (ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0) {
    throw ConfigError("split ratios must be non-negative");
  }
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must sum to 1");
  }
  dataset.splits.resize(dataset.samples.size());
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    dataset.splits[i] = split_of(dataset.samples[i].graph.id, ratios, seed);
  }
}

GraphBatch make_batch(std::span<const CrystalGraph* const> graphs, const GaussianBasis& basis, std::size_t d_atom) {
  GraphBatch b;
  b.graphs = graphs.size();
  b.d_atom = d_atom;
  b.d_edge = basis.count;
  b.node_offsets.push_back(0);
  std::size_t total_nodes = 0;
  for (const auto* g : graphs) {
    total_nodes += g->size();
    b.node_offsets.push_back(total_nodes);
  }
  auto& e = b.edges;
  e.nodes = total_nodes;
  e.offsets.reserve(total_nodes + 1);
  e.offsets.push_back(0);
  b.node_features.reserve(total_nodes * d_atom);
  for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
    const auto& g = *graphs[gi];
    const auto base = static_cast<std::uint32_t>(b.node_offsets[gi]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (g.nodes[i].size() != d_atom) {
        throw ValidationError("graph '" + g.id + "': atom feature width differs from d_atom");
      }
      b.node_features.insert(b.node_features.end(), g.nodes[i].begin(), g.nodes[i].end());
      for (const auto& nb : g.neighbors[i]) {
        e.source.push_back(base + nb.index);
        e.target.push_back(base + static_cast<std::uint32_t>(i));
        const double degree_product = static_cast<double>(g.neighbors[i].size()) *
                                      static_cast<double>(std::max<std::size_t>(1, g.neighbors[nb.index].size()));
        e.gcn_norm.push_back(1.0 / std::sqrt(degree_product));
        const auto feat = gaussian_basis_expand(nb.distance, basis);
        b.edge_features.insert(b.edge_features.end(), feat.begin(), feat.end());
      }
      e.offsets.push_back(e.source.size());
    }
  }
  return b;
}

}  // namespace xtal2dos
