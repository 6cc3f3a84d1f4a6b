// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "xtal2dos/encoder.hpp"
#include "xtal2dos/error.hpp"

using namespace xtal2dos;
using xtal2dos::testing::batch_of;
using xtal2dos::testing::permute_graph;
using xtal2dos::testing::random_graph;
using xtal2dos::testing::random_permutation;

namespace {

const ad::Activation kIdentity{ad::ActivationKind::kIdentity, 0.0};

EdgeIndex edges_from(std::size_t nodes, const std::vector<std::vector<std::uint32_t>>& nbrs) {
  CrystalGraph g;
  g.nodes.assign(nodes, std::vector<double>{1.0});
  for (const auto& list : nbrs) {
    std::vector<Neighbor> row;
    for (auto j : list) row.push_back({j, 1.0});
    g.neighbors.push_back(row);
  }
  return batch_of({g}, 1).edges;
}

EncoderConfig small_config(const std::string& kind) {
  EncoderConfig c;
  c.kind = kind;
  c.d_atom = 6;
  c.d_edge = 41;
  c.d_hid = 8;
  c.layers = 3;
  c.heads = 2;
  return c;
}

}  // namespace

TEST_CASE("gcn: two mutually connected nodes exchange features") {
  const EdgeIndex e = edges_from(2, {{1}, {0}});
  Tape t;
  Var h = t.constant({2, 2}, {1, 2, 3, 4});
  Var w = t.constant({2, 2}, {1, 0, 0, 1});
  Var out = gcn_layer(t, h, w, e, kIdentity);
  CHECK(std::vector<double>(out.values().begin(), out.values().end()) == std::vector<double>{3, 4, 1, 2});
}

TEST_CASE("gcn: degree normalization with a four-neighbor hub") {
  // Node 0 sees 1..4, each leaf sees only node 0: c_0j = sqrt(4 * 1) = 2.
  const EdgeIndex e = edges_from(5, {{1, 2, 3, 4}, {0}, {0}, {0}, {0}});
  Tape t;
  Var h = t.constant({5, 1}, {10, 1, 2, 3, 4});
  Var w = t.constant({1, 1}, {1});
  Var out = gcn_layer(t, h, w, e, kIdentity);
  CHECK(out.value(0) == doctest::Approx((1 + 2 + 3 + 4) / 2.0));
  CHECK(out.value(1) == doctest::Approx(10 / 2.0));
}

TEST_CASE("unimp attention: zero queries give uniform weights, one neighbor gives weight one") {
  const EdgeIndex e = edges_from(3, {{1, 2}, {0}, {0, 1}});
  Tape t;
  Rng rng(1);
  Var q = t.constant({3, 4}, std::vector<double>(12, 0.0));
  Var k = t.constant({3, 4}, testing::random_values(12, rng));
  Var g = t.constant({e.edges(), 4}, testing::random_values(e.edges() * 4, rng));
  Var a = unimp_attention(q, k, g, e, 2);
  REQUIRE(a.rows() == e.edges());
  for (std::size_t h = 0; h < 2; ++h) {
    CHECK(a.value(0 * 2 + h) == doctest::Approx(0.5));
    CHECK(a.value(1 * 2 + h) == doctest::Approx(0.5));
    CHECK(a.value(2 * 2 + h) == 1.0);
  }
}

TEST_CASE("unimp attention: three neighbors match the softmax oracle") {
  const EdgeIndex e = edges_from(4, {{1, 2, 3}, {0}, {0}, {0}});
  Rng rng(2);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t d = 3;
    const auto qv = testing::random_values(4 * d, rng), kv = testing::random_values(4 * d, rng);
    const auto gv = testing::random_values(e.edges() * d, rng);
    Tape t;
    Var a = unimp_attention(t.constant({4, d}, qv), t.constant({4, d}, kv), t.constant({e.edges(), d}, gv), e, 1);
    std::vector<double> scores;
    for (std::size_t edge = 0; edge < 3; ++edge) {
      const std::size_t j = e.source[edge];
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += qv[c] * (kv[j * d + c] + gv[edge * d + c]);
      scores.push_back(s / std::sqrt(3.0));
    }
    const auto o = testing::softmax_oracle(scores);
    for (std::size_t edge = 0; edge < 3; ++edge) CHECK(std::abs(a.value(edge) - o[edge]) < 1e-12);
  }
}

TEST_CASE("unimp aggregate sums weighted value-plus-edge messages") {
  const EdgeIndex e = edges_from(3, {{1, 2}, {0}, {0}});
  Tape t;
  Var alpha = t.constant({4, 1}, {0.25, 0.75, 1.0, 1.0});
  Var v = t.constant({3, 2}, {1, 1, 2, 4, 6, 8});
  Var g = t.constant({4, 2}, {0, 1, 1, 0, 0, 0, 0, 0});
  Var out = unimp_aggregate(alpha, v, g, e, 1);
  // node 0: 0.25*([2,4]+[0,1]) + 0.75*([6,8]+[1,0])
  CHECK(out.value(0) == doctest::Approx(0.25 * 2 + 0.75 * 7));
  CHECK(out.value(1) == doctest::Approx(0.25 * 5 + 0.75 * 8));
  CHECK(out.value(2) == doctest::Approx(1.0));
  CHECK(out.value(3) == doctest::Approx(1.0));
}

TEST_CASE("gated residual blends the aggregate with the skip path") {
  Rng rng(3);
  UniMPLayer layer("l", 4, 4, rng);
  Tape t;
  Var h = t.constant({2, 4}, testing::random_values(8, rng));
  SUBCASE("aggregate equal to the skip path passes through exactly") {
    Var r = layer.skip(t, h);
    Var out = gated_residual(t, r, h, layer, true, kIdentity);
    for (std::size_t i = 0; i < 8; ++i) CHECK(out.value(i) == r.value(i));
  }
  SUBCASE("a zero gate gives the midpoint") {
    std::fill(layer.gate.value.begin(), layer.gate.value.end(), 0.0);
    Var agg = t.constant({2, 4}, testing::random_values(8, rng));
    Var r = layer.skip(t, h);
    Var out = gated_residual(t, agg, h, layer, true, kIdentity);
    for (std::size_t i = 0; i < 8; ++i) CHECK(out.value(i) == doctest::Approx(0.5 * (agg.value(i) + r.value(i))));
  }
}

TEST_CASE("encoder configuration errors") {
  Rng rng(0);
  auto c = small_config("unimp");
  c.heads = 3;
  CHECK_THROWS_AS(Encoder(c, rng), ConfigError);
  c = small_config("graphsage");
  CHECK_THROWS_AS(Encoder(c, rng), ConfigError);
  c = small_config("unimp");
  c.layers = 0;
  CHECK_THROWS_AS(Encoder(c, rng), ConfigError);
}

TEST_CASE("encoder output shapes and mean pooling") {
  for (const std::string kind : {"unimp", "gcn"}) {
    Rng rng(5);
    Encoder enc(small_config(kind), rng);
    std::vector<CrystalGraph> gs{random_graph(rng, 3, 6, 2, "a"), random_graph(rng, 5, 6, 4, "b")};
    const GraphBatch b = batch_of(gs, 6);
    Tape t;
    const EncoderState s = enc.encode(t, b, ad::Mode::kEval, true);
    CHECK(s.nodes.rows() == 8);
    CHECK(s.nodes.cols() == 8);
    CHECK(s.pooled.rows() == 2);
    CHECK(s.layers.size() == 4);
    for (std::size_t c = 0; c < 8; ++c) {
      double mean = 0.0;
      for (std::size_t i = 3; i < 8; ++i) mean += s.nodes.value(i * 8 + c);
      CHECK(s.pooled.value(8 + c) == doctest::Approx(mean / 5.0).epsilon(1e-14));
    }
    if (kind == "unimp") {
      REQUIRE(s.attention.size() == 3);
      for (const auto& alpha : s.attention) {
        for (std::size_t i = 0; i < b.nodes(); ++i) {
          for (std::size_t h = 0; h < 2; ++h) {
            double total = 0.0;
            for (std::size_t e = b.edges.offsets[i]; e < b.edges.offsets[i + 1]; ++e) total += alpha[e * 2 + h];
            CHECK(std::abs(total - 1.0) < 1e-9);
          }
        }
      }
    }
  }
}

TEST_CASE("encoder is permutation equivariant in eval mode") {
  for (const std::string kind : {"unimp", "gcn"}) {
    Rng rng(11);
    Encoder enc(small_config(kind), rng);
    for (int rep = 0; rep < 10; ++rep) {
      const CrystalGraph g = random_graph(rng, 2 + rng.below(8), 6, 4);
      const auto perm = random_permutation(g.size(), rng);
      Tape t1, t2;
      const auto a = enc.encode(t1, batch_of({g}, 6), ad::Mode::kEval);
      const auto b = enc.encode(t2, batch_of({permute_graph(g, perm)}, 6), ad::Mode::kEval);
      for (std::size_t i = 0; i < g.size(); ++i) {
        for (std::size_t c = 0; c < 8; ++c) {
          CHECK(std::abs(a.nodes.value(i * 8 + c) - b.nodes.value(perm[i] * 8 + c)) < 1e-10);
        }
      }
      for (std::size_t c = 0; c < 8; ++c) CHECK(std::abs(a.pooled.value(c) - b.pooled.value(c)) < 1e-10);
    }
  }
}

TEST_CASE("disconnected components do not influence each other in eval mode") {
  Rng rng(12);
  Encoder enc(small_config("unimp"), rng);
  CrystalGraph a = random_graph(rng, 3, 6, 2, "a");
  CrystalGraph b = random_graph(rng, 4, 6, 3, "b");
  Tape t1, t2;
  const auto s1 = enc.encode(t1, batch_of({a, b}, 6), ad::Mode::kEval);
  for (auto& row : b.nodes)
    for (auto& v : row) v += 1.0;
  const auto s2 = enc.encode(t2, batch_of({a, b}, 6), ad::Mode::kEval);
  for (std::size_t i = 0; i < 3 * 8; ++i) CHECK(s1.nodes.value(i) == s2.nodes.value(i));
  CHECK(s1.pooled.value(8) != s2.pooled.value(8));
}

TEST_CASE("encode rejects mismatched feature widths") {
  Rng rng(13);
  Encoder enc(small_config("unimp"), rng);
  Tape t;
  CHECK_THROWS_AS(enc.encode(t, batch_of({random_graph(rng, 3, 5, 2)}, 5), ad::Mode::kEval), DimensionError);
  CHECK_THROWS_AS(enc.encode(t, batch_of({random_graph(rng, 3, 6, 2)}, 6, 10), ad::Mode::kEval), DimensionError);
}

TEST_CASE("train mode updates the batch norm running statistics") {
  Rng rng(14);
  Encoder enc(small_config("unimp"), rng);
  auto states = enc.batch_norm_states();
  REQUIRE(states.size() == 2);
  const auto before = states[0].second->running_mean;
  Tape t;
  enc.encode(t, batch_of({random_graph(rng, 5, 6, 3)}, 6), ad::Mode::kTrain);
  CHECK(states[0].second->running_mean != before);
}
