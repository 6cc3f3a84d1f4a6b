// SPDX-License-Identifier: Apache-2.0
//
// Graph encoder: input projection, stacked UniMP attention layers (or plain
// GCN layers for the baseline), batch norm + activation between layers and
// mean pooling into the crystal feature vector h_x.

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "xtal2dos/graph_data.hpp"
#include "xtal2dos/layers.hpp"

namespace xtal2dos {

struct EncoderConfig {
  std::string kind = "unimp";  // unimp | gcn
  std::size_t d_atom = 92;
  std::size_t d_edge = 41;
  std::size_t d_hid = 128;
  std::size_t layers = 3;
  std::size_t heads = 4;
  ad::Activation activation;
};

/// Weights of one UniMP layer. The edge transform (W_e, b_e) is shared by all
/// layers and lives in the Encoder.
struct UniMPLayer {
  Linear query;
  Linear key;
  Linear value;
  Linear skip;     // W_r, b_r
  Parameter gate;  // a, [3*d_hid, 1]
  LayerNorm norm;

  UniMPLayer() = default;
  UniMPLayer(const std::string& name, std::size_t d_in, std::size_t d_hid, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

/// alpha[e, h] = softmax over the edges of node i of <q_i, k_j + g_ij> / sqrt(d_h),
/// one column per head. q, k: [nodes, d]; g: [edges, d].
Var unimp_attention(Var q, Var k, Var g, const EdgeIndex& edges, std::size_t heads);

/// h_hat_i = sum_j alpha_ij * (v_j + g_ij), per head block.
Var unimp_aggregate(Var alpha, Var v, Var g, const EdgeIndex& edges, std::size_t heads);

/// r = W_r h + b_r; beta = sigmoid(a . [h_hat ; r ; h_hat - r]);
/// out = act(LN((1 - beta) h_hat + beta r)), with act and LN skipped on the last layer.
Var gated_residual(Tape& tape, Var aggregated, Var h, UniMPLayer& layer, bool is_last, const ad::Activation& act);

/// Full UniMP layer. g is the transformed edge feature for every edge.
Var unimp_layer(Tape& tape, Var h, Var g, const EdgeIndex& edges, UniMPLayer& layer, std::size_t heads, bool is_last,
                const ad::Activation& act, std::vector<double>* alpha_out = nullptr);

/// h_i' = act(sum_{j in N(i)} W h_j / sqrt(|N(i)| |N(j)|)). Nodes without
/// neighbors get act(0) and a warning in the log.
Var gcn_layer(Tape& tape, Var h, Var w, const EdgeIndex& edges, const ad::Activation& act);

struct EncoderState {
  std::vector<Var> layers;  // h^0 (projected input) .. h^L
  Var nodes;                // h^L, [nodes, d_hid]
  Var pooled;               // h_x, [graphs, d_hid]
  std::vector<std::vector<double>> attention;  // per UniMP layer, [edges, heads]
};

class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& config, Rng& rng);

  EncoderState encode(Tape& tape, const GraphBatch& batch, ad::Mode mode, bool keep_attention = false);

  const EncoderConfig& config() const { return config_; }
  void collect(std::vector<Parameter*>& out);
  std::vector<std::pair<std::string, ad::BatchNormState*>> batch_norm_states();

  // Direct access for tests and ablations.
  Linear& input_projection() { return input_; }
  Linear& edge_transform() { return edge_; }
  std::vector<UniMPLayer>& unimp_layers() { return unimp_; }

 private:
  EncoderConfig config_;
  Linear input_;
  Linear edge_;
  std::vector<UniMPLayer> unimp_;
  std::vector<Parameter> gcn_;
  std::vector<LayerNorm> bn_affine_;  // gain/bias of the batch norms between layers
  std::vector<ad::BatchNormState> bn_;
};

}  // namespace xtal2dos
