// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "fixtures.hpp"
#include "xtal2dos/error.hpp"
#include "xtal2dos/graph_data.hpp"

using namespace xtal2dos;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "x2d_graph_data_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary | std::ios::trunc) << text;
}

}  // namespace

TEST_CASE("synthetic generator is deterministic and produces valid samples") {
  SyntheticOptions opt;
  opt.count = 12;
  opt.seed = 9;
  const Dataset a = generate_synthetic(opt);
  const Dataset b = generate_synthetic(opt);
  REQUIRE(a.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(to_json_line(a.samples[i]) == to_json_line(b.samples[i]));
    CHECK_NOTHROW(validate_graph(a.samples[i].graph, GraphLimits{}));
    CHECK_NOTHROW(validate_spectrum(a.samples[i].target, opt.l_y, a.samples[i].graph.id));
  }
  opt.seed = 10;
  const Dataset c = generate_synthetic(opt);
  CHECK(to_json_line(a.samples[0]) != to_json_line(c.samples[0]));
}

TEST_CASE("dataset save and load round trip") {
  SyntheticOptions opt;
  opt.count = 5;
  opt.l_y = 20;
  const Dataset a = generate_synthetic(opt);
  const auto path = temp_file("roundtrip.jsonl");
  save_dataset(a, path);
  const Dataset b = load_dataset(path, 20, GraphLimits{});
  REQUIRE(b.size() == a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(b.samples[i].graph.id == a.samples[i].graph.id);
    CHECK(b.samples[i].target.values == a.samples[i].target.values);
    CHECK(b.samples[i].graph.nodes == a.samples[i].graph.nodes);
  }
  const auto path2 = temp_file("roundtrip2.jsonl");
  save_dataset(b, path2);
  std::ifstream f1(path), f2(path2);
  const std::string s1((std::istreambuf_iterator<char>(f1)), {}), s2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(s1 == s2);
}

TEST_CASE("empty file loads as an empty dataset and a missing file is an io error") {
  const auto path = temp_file("empty.jsonl");
  write_text(path, "");
  CHECK(load_dataset(path, 3, GraphLimits{}).size() == 0);
  CHECK_THROWS_AS(load_dataset(temp_file("does_not_exist.jsonl"), 3, GraphLimits{}), IoError);
}

TEST_CASE("loader rejects malformed records and names them") {
  GraphLimits limits;
  limits.d_atom = 2;
  const auto path = temp_file("bad.jsonl");
  const std::string good = R"({"id":"a","nodes":[[0,1],[1,0]],"edges":[[[1,1.5]],[[0,1.5]]],"target":[0.5,0.5]})";
  write_text(path, good + "\n");
  CHECK(load_dataset(path, 2, limits).size() == 1);

  auto expect_validation = [&](const std::string& line, const std::string& fragment) {
    write_text(path, line + "\n");
    try {
      load_dataset(path, 2, limits);
      FAIL("expected a ValidationError");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find(fragment) != std::string::npos);
    }
  };
  expect_validation(R"({"id":"b","nodes":[[0,1]],"edges":[[[3,1.0]]],"target":[0.5,0.5]})", "out of range");
  expect_validation(R"({"id":"c","nodes":[[0,1]],"edges":[[[0,-1.0]]],"target":[0.5,0.5]})", "distance");
  expect_validation(R"({"id":"d","nodes":[[0,1]],"edges":[[]],"target":[0.5,0.5]})", "no neighbors");
  expect_validation(R"({"id":"e","nodes":[[0,1]],"edges":[[[0,1.0]]],"target":[0.5]})", "values");
  expect_validation(R"({"id":"f","nodes":[[0,1]],"edges":[[[0,1.0]]],"target":[0.2,0.2]})", "sums");
  expect_validation(R"({"id":"g","nodes":[[0,1,2]],"edges":[[[0,1.0]]],"target":[0.5,0.5]})", "features");
  expect_validation(R"({"id":"h","nodes":[[0,1]],"edges":[[[0,1.0]]]})", "target");
  expect_validation("not json", "line 1");

  write_text(path, R"({"id":"neg","nodes":[[0,1]],"edges":[[[0,1.0]]],"target":[1.5,-0.5]})" "\n");
  CHECK_THROWS_AS(load_dataset(path, 2, limits), DomainError);

  limits.n_max_nbr = 1;
  expect_validation(R"({"id":"i","nodes":[[0,1],[1,0]],"edges":[[[1,1.0],[1,2.0]],[[0,1.0]]],"target":[0.5,0.5]})",
                    "limit");
}

TEST_CASE("electronic spectra need not be normalized") {
  Spectrum s{{0.2, 3.0}, GridKind::kEdos};
  CHECK_NOTHROW(validate_spectrum(s, 2, "x"));
  s.grid = GridKind::kPhdos;
  CHECK_THROWS_AS(validate_spectrum(s, 2, "x"), ValidationError);
  CHECK(parse_grid_kind("edos") == GridKind::kEdos);
  CHECK(grid_kind_name(GridKind::kPhdos) == "phdos");
  CHECK_THROWS_AS(parse_grid_kind("xdos"), ConfigError);
}

TEST_CASE("gaussian basis expansion") {
  const GaussianBasis basis;  // 41 centers on [0, 8], spacing 0.2
  CHECK(basis.spacing() == doctest::Approx(0.2));
  const auto at_center = gaussian_basis_expand(2.0, basis);
  REQUIRE(at_center.size() == 41);
  CHECK(at_center[10] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(at_center[11] == doctest::Approx(std::exp(-1.0)).epsilon(1e-12));
  for (double v : at_center) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
  CHECK_THROWS_AS(gaussian_basis_expand(0.0, basis), ValidationError);
  CHECK_THROWS_AS(gaussian_basis_expand(-1.0, basis), ValidationError);
  CHECK_THROWS_AS(gaussian_basis_expand(std::nan(""), basis), ValidationError);
}

TEST_CASE("split assignment is a pure function of id and seed") {
  SyntheticOptions opt;
  opt.count = 400;
  Dataset ds = generate_synthetic(opt);
  assign_splits(ds, SplitRatios{}, 1);
  const auto train = ds.indices(Split::kTrain), val = ds.indices(Split::kVal), test = ds.indices(Split::kTest);
  CHECK(train.size() + val.size() + test.size() == ds.size());
  CHECK(train.size() > 280);
  CHECK(train.size() < 360);
  for (std::size_t i = 0; i < ds.size(); ++i) CHECK(ds.splits[i] == split_of(ds.samples[i].graph.id, SplitRatios{}, 1));
  Dataset again = generate_synthetic(opt);
  assign_splits(again, SplitRatios{}, 1);
  CHECK(again.splits == ds.splits);
  CHECK_THROWS_AS(assign_splits(ds, SplitRatios{0.5, 0.5, 0.5}, 1), ConfigError);
  CHECK_THROWS_AS(assign_splits(ds, SplitRatios{1.2, -0.1, -0.1}, 1), ConfigError);
  assign_splits(ds, SplitRatios{1.0, 0.0, 0.0}, 3);
  CHECK(ds.indices(Split::kTrain).size() == ds.size());
}

TEST_CASE("batching builds a block-diagonal graph") {
  Rng rng(4);
  std::vector<CrystalGraph> gs{testing::random_graph(rng, 3, 5, 2, "a"), testing::random_graph(rng, 4, 5, 3, "b")};
  const GraphBatch b = testing::batch_of(gs, 5);
  CHECK(b.graphs == 2);
  CHECK(b.nodes() == 7);
  CHECK(b.node_offsets == std::vector<std::size_t>{0, 3, 7});
  std::size_t total_edges = 0;
  for (const auto& g : gs)
    for (const auto& n : g.neighbors) total_edges += n.size();
  CHECK(b.edges.edges() == total_edges);
  CHECK(b.edge_features.size() == total_edges * 41);
  for (std::size_t e = 0; e < b.edges.edges(); ++e) {
    // no edge crosses a graph boundary
    const bool src_first = b.edges.source[e] < 3, tgt_first = b.edges.target[e] < 3;
    CHECK(src_first == tgt_first);
  }
  for (std::size_t i = 0; i < b.nodes(); ++i) {
    for (std::size_t e = b.edges.offsets[i]; e < b.edges.offsets[i + 1]; ++e) CHECK(b.edges.target[e] == i);
  }
}

TEST_CASE("synthetic target map is normalized and non-negative") {
  const std::size_t elements[] = {0, 3, 7};
  const double dist[] = {2.0, 2.5, 3.0};
  const auto y = synthetic_spectrum(elements, dist, 51, 8);
  REQUIRE(y.size() == 51);
  CHECK(std::accumulate(y.begin(), y.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
  for (double v : y) CHECK(v >= 0.0);
}
