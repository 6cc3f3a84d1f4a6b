// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/layers.hpp"

#include <algorithm>
#include <cmath>

namespace xtal2dos {

void init_uniform(Parameter& p, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : p.value) v = rng.uniform(-bound, bound);
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, Rng& rng)
    : w(name + ".w", {in, out}), b(name + ".b", {out}) {
  init_uniform(w, in, rng);
}

void Linear::collect(std::vector<Parameter*>& out) {
  out.push_back(&w);
  out.push_back(&b);
}

LayerNorm::LayerNorm(const std::string& name, std::size_t width)
    : gain(name + ".gain", {width}), bias(name + ".bias", {width}) {
  std::fill(gain.value.begin(), gain.value.end(), 1.0);
}

void LayerNorm::collect(std::vector<Parameter*>& out) {
  out.push_back(&gain);
  out.push_back(&bias);
}

GruCell::GruCell(const std::string& name, std::size_t in, std::size_t hidden_width, Rng& rng)
    : input(name + ".input", in, 3 * hidden_width, rng), hidden(name + ".hidden", hidden_width, 3 * hidden_width, rng) {}

Var GruCell::step(Tape& tape, Var x, Var h) {
  const std::size_t d = width();
  Var gi = input(tape, x);
  Var gh = hidden(tape, h);
  Var r = ad::sigmoid(ad::add(ad::slice_cols(gi, 0, d), ad::slice_cols(gh, 0, d)));
  Var z = ad::sigmoid(ad::add(ad::slice_cols(gi, d, d), ad::slice_cols(gh, d, d)));
  Var n = ad::tanh(ad::add(ad::slice_cols(gi, 2 * d, d), ad::mul(r, ad::slice_cols(gh, 2 * d, d))));
  // (1 - z) * n + z * h == n + z * (h - n)
  return ad::add(n, ad::mul(z, ad::sub(h, n)));
}

void GruCell::collect(std::vector<Parameter*>& out) {
  input.collect(out);
  hidden.collect(out);
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, std::size_t width, std::size_t heads_, Rng& rng)
    : query(name + ".query", width, width, rng),
      key(name + ".key", width, width, rng),
      value(name + ".value", width, width, rng),
      output(name + ".output", width, width, rng),
      heads(heads_) {}

Var MultiHeadAttention::forward(Tape& tape, Var queries, Var keys, std::span<const ad::AttentionSegment> segments,
                                bool causal, std::vector<double>* weights_out) {
  Var q = query(tape, queries);
  Var k = key(tape, keys);
  Var v = value(tape, keys);
  return output(tape, ad::attention(q, k, v, heads, segments, causal, weights_out));
}

void MultiHeadAttention::collect(std::vector<Parameter*>& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  output.collect(out);
}

}  // namespace xtal2dos
