// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/encoder.hpp"

#include <cmath>

#include "xtal2dos/error.hpp"
#include "xtal2dos/log.hpp"

namespace xtal2dos {

UniMPLayer::UniMPLayer(const std::string& name, std::size_t d_in, std::size_t d_hid, Rng& rng)
    : query(name + ".query", d_in, d_hid, rng),
      key(name + ".key", d_in, d_hid, rng),
      value(name + ".value", d_in, d_hid, rng),
      skip(name + ".skip", d_in, d_hid, rng),
      gate(name + ".gate", {3 * d_hid, 1}),
      norm(name + ".norm", d_hid) {}

void UniMPLayer::collect(std::vector<Parameter*>& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  skip.collect(out);
  out.push_back(&gate);
  norm.collect(out);
}

Var unimp_attention(Var q, Var k, Var g, const EdgeIndex& edges, std::size_t heads) {
  if (q.cols() % heads != 0) {
    throw DimensionError("unimp_attention: width " + std::to_string(q.cols()) + " not divisible by heads");
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.cols() / heads));
  Var q_i = ad::gather_rows(q, edges.target);
  Var kg = ad::add(ad::gather_rows(k, edges.source), g);
  Var scores = ad::scale(ad::head_dot(q_i, kg, heads), inv_sqrt_d);
  return ad::segment_softmax(scores, edges.offsets);
}

Var unimp_aggregate(Var alpha, Var v, Var g, const EdgeIndex& edges, std::size_t heads) {
  Var vg = ad::add(ad::gather_rows(v, edges.source), g);
  return ad::scatter_add_rows(ad::head_scale(vg, alpha, heads), edges.target, edges.nodes);
}

Var gated_residual(Tape& tape, Var aggregated, Var h, UniMPLayer& layer, bool is_last, const ad::Activation& act) {
  Var r = layer.skip(tape, h);
  Var diff = ad::sub(aggregated, r);
  const Var parts[] = {aggregated, r, diff};
  Var beta = ad::sigmoid(ad::matmul(ad::concat_cols(parts), tape.param(layer.gate)));
  // (1 - beta) h_hat + beta r, written as h_hat - beta (h_hat - r)
  Var blended = ad::sub(aggregated, ad::scale_rows(diff, beta));
  if (is_last) return blended;
  return ad::activate(layer.norm(tape, blended), act);
}

Var unimp_layer(Tape& tape, Var h, Var g, const EdgeIndex& edges, UniMPLayer& layer, std::size_t heads, bool is_last,
                const ad::Activation& act, std::vector<double>* alpha_out) {
  Var q = layer.query(tape, h);
  Var k = layer.key(tape, h);
  Var v = layer.value(tape, h);
  Var alpha = unimp_attention(q, k, g, edges, heads);
  if (alpha_out != nullptr) alpha_out->assign(alpha.values().begin(), alpha.values().end());
  Var aggregated = unimp_aggregate(alpha, v, g, edges, heads);
  return gated_residual(tape, aggregated, h, layer, is_last, act);
}

Var gcn_layer(Tape& tape, Var h, Var w, const EdgeIndex& edges, const ad::Activation& act) {
  for (std::size_t i = 0; i < edges.nodes; ++i) {
    if (edges.offsets[i + 1] == edges.offsets[i]) {
      logger().warn("gcn_layer: node {} has no neighbors; its update is act(0)", i);
    }
  }
  Var wh = ad::matmul(h, w);
  Var coef = tape.constant({edges.edges(), 1}, edges.gcn_norm);
  Var messages = ad::scale_rows(ad::gather_rows(wh, edges.source), coef);
  return ad::activate(ad::scatter_add_rows(messages, edges.target, edges.nodes), act);
}

Encoder::Encoder(const EncoderConfig& config, Rng& rng) : config_(config) {
  if (config.kind != "unimp" && config.kind != "gcn") {
    throw ConfigError("encoder kind must be unimp or gcn, got '" + config.kind + "'");
  }
  if (config.layers == 0) throw ConfigError("encoder needs at least one layer");
  if (config.heads == 0 || config.d_hid % config.heads != 0) {
    throw ConfigError("encoder d_hid must be divisible by the head count");
  }
  const std::size_t d = config.d_hid;
  input_ = Linear("encoder.input", config.d_atom, d, rng);
  if (config.kind == "unimp") {
    edge_ = Linear("encoder.edge", config.d_edge, d, rng);
    unimp_.reserve(config.layers);
    for (std::size_t l = 0; l < config.layers; ++l) {
      unimp_.emplace_back("encoder.layer" + std::to_string(l), d, d, rng);
    }
  } else {
    gcn_.reserve(config.layers);
    for (std::size_t l = 0; l < config.layers; ++l) {
      gcn_.emplace_back("encoder.gcn" + std::to_string(l) + ".w", ad::Shape{d, d});
      init_uniform(gcn_.back(), d, rng);
    }
  }
  for (std::size_t l = 0; l + 1 < config.layers; ++l) {
    bn_affine_.emplace_back("encoder.bn" + std::to_string(l), d);
    bn_.emplace_back(d);
  }
}

EncoderState Encoder::encode(Tape& tape, const GraphBatch& batch, ad::Mode mode, bool keep_attention) {
  if (batch.d_atom != config_.d_atom) {
    throw DimensionError("encode: batch atom width " + std::to_string(batch.d_atom) + " != configured " +
                         std::to_string(config_.d_atom));
  }
  EncoderState state;
  Var x = tape.constant({batch.nodes(), batch.d_atom}, batch.node_features);
  Var h = input_(tape, x);
  state.layers.push_back(h);
  Var g;
  if (config_.kind == "unimp") {
    if (batch.d_edge != config_.d_edge) {
      throw DimensionError("encode: batch edge width " + std::to_string(batch.d_edge) + " != configured " +
                           std::to_string(config_.d_edge));
    }
    g = edge_(tape, tape.constant({batch.edges.edges(), batch.d_edge}, batch.edge_features));
  }
  for (std::size_t l = 0; l < config_.layers; ++l) {
    const bool last = l + 1 == config_.layers;
    if (config_.kind == "unimp") {
      std::vector<double> alpha;
      h = unimp_layer(tape, h, g, batch.edges, unimp_[l], config_.heads, last, config_.activation,
                      keep_attention ? &alpha : nullptr);
      if (keep_attention) state.attention.push_back(std::move(alpha));
    } else {
      const ad::Activation act = last ? ad::Activation{ad::ActivationKind::kIdentity, 0.0} : config_.activation;
      h = gcn_layer(tape, h, tape.param(gcn_[l]), batch.edges, act);
    }
    if (!last) {
      h = ad::batch_norm(h, tape.param(bn_affine_[l].gain), tape.param(bn_affine_[l].bias), bn_[l], mode);
      h = ad::activate(h, config_.activation);
    }
    state.layers.push_back(h);
  }
  state.nodes = h;
  state.pooled = ad::segment_mean_rows(h, batch.node_offsets);
  return state;
}

void Encoder::collect(std::vector<Parameter*>& out) {
  input_.collect(out);
  if (config_.kind == "unimp") {
    edge_.collect(out);
    for (auto& l : unimp_) l.collect(out);
  } else {
    for (auto& w : gcn_) out.push_back(&w);
  }
  for (auto& bn : bn_affine_) bn.collect(out);
}

std::vector<std::pair<std::string, ad::BatchNormState*>> Encoder::batch_norm_states() {
  std::vector<std::pair<std::string, ad::BatchNormState*>> out;
  for (std::size_t l = 0; l < bn_.size(); ++l) out.emplace_back("encoder.bn" + std::to_string(l), &bn_[l]);
  return out;
}

}  // namespace xtal2dos
