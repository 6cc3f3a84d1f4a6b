// SPDX-License-Identifier: Apache-2.0
//
// Parameter bundles shared by the encoder and the decoders.

#pragma once

#include <span>
#include <string>
#include <vector>

#include "xtal2dos/autodiff.hpp"
#include "xtal2dos/ops.hpp"
#include "xtal2dos/random.hpp"

namespace xtal2dos {

using ad::Parameter;
using ad::Tape;
using ad::Var;

/// Fills with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_uniform(Parameter& p, std::size_t fan_in, Rng& rng);

struct Linear {
  Parameter w;  // [in, out]
  Parameter b;  // [out]

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng);

  std::size_t in() const { return w.shape[0]; }
  std::size_t out() const { return w.shape[1]; }
  Var operator()(Tape& tape, Var x) { return ad::linear(x, tape.param(w), tape.param(b)); }
  void collect(std::vector<Parameter*>& out);
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t width);

  Var operator()(Tape& tape, Var x) { return ad::layer_norm(x, tape.param(gain), tape.param(bias)); }
  void collect(std::vector<Parameter*>& out);
};

/// Gated recurrent unit with the standard reset/update gates:
///   r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
///   z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
///   n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
///   h' = (1 - z) * n + z * h
/// The three gates are packed column-wise as [r | z | n].
struct GruCell {
  Linear input;   // [in, 3*hidden]
  Linear hidden;  // [hidden, 3*hidden]

  GruCell() = default;
  GruCell(const std::string& name, std::size_t in, std::size_t hidden_width, Rng& rng);

  std::size_t width() const { return hidden.in(); }
  Var step(Tape& tape, Var x, Var h);
  void collect(std::vector<Parameter*>& out);
};

/// Projected multi-head attention: out = W_o * concat_h softmax(Q_h K_h^T / sqrt(d_h)) V_h.
struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t width, std::size_t heads, Rng& rng);

  Var forward(Tape& tape, Var queries, Var keys, std::span<const ad::AttentionSegment> segments, bool causal,
              std::vector<double>* weights_out = nullptr);
  void collect(std::vector<Parameter*>& out);
};

}  // namespace xtal2dos
