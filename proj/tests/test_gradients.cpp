// SPDX-License-Identifier: Apache-2.0
#include <chrono>

#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "xtal2dos/losses_metrics.hpp"
#include "xtal2dos/model.hpp"

using namespace xtal2dos;
using namespace xtal2dos::testing;
using ad::Parameter;
using ad::Tape;
using ad::Var;

namespace {

constexpr double kTol = 1e-3;

std::vector<Parameter*> ptrs(std::vector<Parameter>& ps) {
  std::vector<Parameter*> out;
  for (auto& p : ps) out.push_back(&p);
  return out;
}

// Primitive with random inputs of the given shapes; 20 instances.
void check_primitive(const char* name, std::vector<ad::Shape> shapes,
                     const std::function<Var(const std::vector<Var>&)>& op, double lo = -1.0, double hi = 1.0) {
  Rng rng(mix64(std::hash<std::string>{}(name)));
  for (int i = 0; i < 20; ++i) {
    std::vector<Parameter> ps;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      ps.push_back(random_parameter("in" + std::to_string(k), shapes[k], rng, lo, hi));
    }
    const auto rseed = rng.next();
    const auto r = grad_check(ptrs(ps), [&](Tape&, const std::vector<Var>& v) {
      Rng proj(rseed);
      return random_projection(op(v), proj);
    });
    INFO(name, " worst ", r.worst);
    CHECK(r.max_rel_error < kTol);
  }
}

}  // namespace

TEST_CASE("layer gradient suite passes on 20 random instances per layer") {
  const auto start = std::chrono::steady_clock::now();
  const auto results = run_layer_gradient_suite(20, 2024);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(results.size() == 13);
  for (const auto& r : results) {
    INFO(r.layer, " worst tensor ", r.worst, " rel ", r.max_rel_error);
    CHECK(r.instances == 20);
    CHECK(r.max_rel_error < kTol);
  }
  CHECK(seconds < 60.0);
}

TEST_CASE("primitive gradients") {
  check_primitive("matmul", {{3, 4}, {4, 2}}, [](auto& v) { return ad::matmul(v[0], v[1]); });
  check_primitive("matmul_ta", {{4, 3}, {4, 2}}, [](auto& v) { return ad::matmul(v[0], v[1], true, false); });
  check_primitive("matmul_tb", {{3, 4}, {2, 4}}, [](auto& v) { return ad::matmul(v[0], v[1], false, true); });
  check_primitive("matmul_tab", {{4, 3}, {2, 4}}, [](auto& v) { return ad::matmul(v[0], v[1], true, true); });
  check_primitive("linear", {{3, 4}, {4, 2}, {2}}, [](auto& v) { return ad::linear(v[0], v[1], v[2]); });
  check_primitive("add", {{2, 3}, {2, 3}}, [](auto& v) { return ad::add(v[0], v[1]); });
  check_primitive("add_scalar_operand", {{2, 3}, {1}}, [](auto& v) { return ad::add(v[0], v[1]); });
  check_primitive("sub", {{2, 3}, {2, 3}}, [](auto& v) { return ad::sub(v[0], v[1]); });
  check_primitive("mul", {{2, 3}, {2, 3}}, [](auto& v) { return ad::mul(v[0], v[1]); });
  check_primitive("div", {{2, 3}, {2, 3}}, [](auto& v) { return ad::div(v[0], v[1]); }, 0.5, 2.0);
  check_primitive("exp", {{2, 3}}, [](auto& v) { return ad::exp(v[0]); });
  check_primitive("log", {{2, 3}}, [](auto& v) { return ad::log(v[0]); }, 0.2, 2.0);
  check_primitive("sigmoid", {{2, 3}}, [](auto& v) { return ad::sigmoid(v[0]); }, -4.0, 4.0);
  check_primitive("tanh", {{2, 3}}, [](auto& v) { return ad::tanh(v[0]); });
  check_primitive("softplus", {{2, 3}}, [](auto& v) { return ad::softplus(v[0]); }, -4.0, 4.0);
  check_primitive("leaky_relu", {{2, 3}}, [](auto& v) { return ad::leaky_relu(v[0], 0.01); });
  check_primitive("relu", {{2, 3}}, [](auto& v) { return ad::relu(v[0]); });
  check_primitive("row_sum", {{3, 4}}, [](auto& v) { return ad::row_sum(v[0]); });
  check_primitive("mean", {{3, 4}}, [](auto& v) { return ad::mean(v[0]); });
  check_primitive("softmax", {{3, 5}}, [](auto& v) { return ad::softmax(v[0]); }, -3.0, 3.0);
  check_primitive("layer_norm", {{3, 4}, {4}, {4}}, [](auto& v) { return ad::layer_norm(v[0], v[1], v[2]); });
  check_primitive("concat_cols", {{2, 3}, {2, 1}}, [](auto& v) {
    const Var parts[] = {v[0], v[1]};
    return ad::concat_cols(parts);
  });
  check_primitive("slice_cols", {{2, 5}}, [](auto& v) { return ad::slice_cols(v[0], 1, 3); });
  check_primitive("gather_rows", {{3, 2}}, [](auto& v) {
    const std::uint32_t idx[] = {2, 0, 2, 1};
    return ad::gather_rows(v[0], idx);
  });
  check_primitive("scatter_add_rows", {{4, 2}}, [](auto& v) {
    const std::uint32_t idx[] = {1, 0, 1, 2};
    return ad::scatter_add_rows(v[0], idx, 3);
  });
  check_primitive("scale_rows", {{3, 2}, {3, 1}}, [](auto& v) { return ad::scale_rows(v[0], v[1]); });
  check_primitive("segment_softmax", {{5, 2}}, [](auto& v) {
    const std::size_t off[] = {0, 2, 5};
    return ad::segment_softmax(v[0], off);
  });
  check_primitive("segment_mean_rows", {{5, 2}}, [](auto& v) {
    const std::size_t off[] = {0, 3, 5};
    return ad::segment_mean_rows(v[0], off);
  });
  check_primitive("head_dot", {{3, 4}, {3, 4}}, [](auto& v) { return ad::head_dot(v[0], v[1], 2); });
  check_primitive("head_scale", {{3, 4}, {3, 2}}, [](auto& v) { return ad::head_scale(v[0], v[1], 2); });
  check_primitive("reshape", {{2, 3}}, [](auto& v) { return ad::reshape(v[0], {3, 2}); });
  check_primitive("clamp_min", {{2, 3}}, [](auto& v) { return ad::clamp_min(v[0], 0.1); }, 0.2, 1.0);
}

namespace {

// Every parameter of the model, with biases, gates and the start vector
// scrambled so that all gradient paths are exercised.
void check_model(ModelConfig config, std::uint64_t seed, ad::Mode mode) {
  Model model(config, seed);
  Rng rng(seed + 99);
  for (Parameter* p : model.parameters()) {
    for (auto& v : p->value) v += rng.uniform(-0.3, 0.3);
  }
  std::vector<CrystalGraph> graphs{random_graph(rng, 5, config.encoder.d_atom, 3, "a"),
                                   random_graph(rng, 3, config.encoder.d_atom, 2, "b")};
  const GraphBatch batch = batch_of(graphs, config.encoder.d_atom, config.encoder.d_edge);
  std::vector<double> target(2 * config.decoder.l_y);
  for (auto& v : target) v = rng.uniform(0.0, 1.0);
  double s0 = 0.0, s1 = 0.0;
  for (std::size_t i = 0; i < config.decoder.l_y; ++i) {
    s0 += target[i];
    s1 += target[config.decoder.l_y + i];
  }
  for (std::size_t i = 0; i < config.decoder.l_y; ++i) {
    target[i] /= s0;
    target[config.decoder.l_y + i] /= s1;
  }
  auto bn = model.batch_norm_states();
  std::vector<ad::BatchNormState> saved;
  for (auto& [name, st] : bn) saved.push_back(*st);
  const auto r = grad_check(model.parameters(), [&](Tape& tape, const std::vector<Var>&) {
    for (std::size_t i = 0; i < bn.size(); ++i) *bn[i].second = saved[i];
    return kl_loss(model.forward(tape, batch, mode).prediction, target);
  });
  INFO("decoder ", decoder_kind_name(config.decoder.kind), " encoder ", config.encoder.kind, " worst ", r.worst,
       " rel ", r.max_rel_error);
  CHECK(r.max_rel_error < kTol);
}

ModelConfig tiny(DecoderKind kind, const std::string& encoder = "unimp") {
  ModelConfig c;
  c.encoder.kind = encoder;
  c.encoder.d_atom = 3;
  c.encoder.d_edge = 4;
  c.encoder.d_hid = 4;
  c.encoder.layers = 2;
  c.encoder.heads = 2;
  c.decoder.kind = kind;
  c.decoder.l_y = 6;
  c.decoder.d_hid = 4;
  c.decoder.chunk = 3;
  c.decoder.layers = 2;
  c.decoder.heads = 2;
  c.decoder.ff = 5;
  return c;
}

}  // namespace

TEST_CASE("full model gradient check per decoder kind") {
  for (auto kind : {DecoderKind::kRnn, DecoderKind::kRnnAttn, DecoderKind::kChunkRnn, DecoderKind::kChunkRnnAttn,
                    DecoderKind::kTransformer}) {
    check_model(tiny(kind), 11, ad::Mode::kTrain);
  }
}

TEST_CASE("full model gradient check with the GCN encoder and in eval mode") {
  check_model(tiny(DecoderKind::kTransformer, "gcn"), 5, ad::Mode::kTrain);
  check_model(tiny(DecoderKind::kChunkRnnAttn), 6, ad::Mode::kEval);
}
