// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/model.hpp"

#include <set>

#include "xtal2dos/error.hpp"

namespace xtal2dos {

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  if (config.encoder.d_hid != config.decoder.d_hid) {
    throw ConfigError("encoder d_hid " + std::to_string(config.encoder.d_hid) + " != decoder d_hid " +
                      std::to_string(config.decoder.d_hid));
  }
  Rng rng(mix64(seed));
  encoder_ = Encoder(config.encoder, rng);
  decoder_ = make_decoder(config.decoder, rng);
  encoder_.collect(params_);
  decoder_->collect(params_);
  std::set<std::string> names;
  for (const Parameter* p : params_) {
    if (!names.insert(p->name).second) throw Error(ErrorCode::kInternal, "duplicate parameter name " + p->name);
  }
}

ModelOutput Model::forward(Tape& tape, const GraphBatch& batch, ad::Mode mode, DecoderTrace* trace,
                           bool keep_attention) {
  ModelOutput out;
  out.encoder = encoder_.encode(tape, batch, mode, keep_attention);
  DecoderInput input{out.encoder.pooled, out.encoder.nodes, batch.node_offsets};
  out.raw = decoder_->decode(tape, input, trace);
  out.prediction = output_head(out.raw, config_.head);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const Parameter* p : params_) n += p->size();
  return n;
}

}  // namespace xtal2dos
