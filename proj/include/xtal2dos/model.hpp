// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "xtal2dos/decoders.hpp"
#include "xtal2dos/encoder.hpp"

namespace xtal2dos {

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  HeadNorm head = HeadNorm::kSoftmax;
};

struct ModelOutput {
  EncoderState encoder;
  Var raw;         // [graphs, l_y]
  Var prediction;  // output_head(raw)
};

/// Encoder, decoder and output head. Parameters are drawn from one stream
/// seeded by `seed`, encoder first.
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  ModelOutput forward(Tape& tape, const GraphBatch& batch, ad::Mode mode, DecoderTrace* trace = nullptr,
                      bool keep_attention = false);

  const ModelConfig& config() const { return config_; }
  /// Stable order: encoder parameters, then decoder parameters.
  const std::vector<Parameter*>& parameters() const { return params_; }
  std::vector<std::pair<std::string, ad::BatchNormState*>> batch_norm_states() { return encoder_.batch_norm_states(); }
  std::size_t parameter_count() const;

  Encoder& encoder() { return encoder_; }
  Decoder& decoder() { return *decoder_; }

 private:
  ModelConfig config_;
  Encoder encoder_;
  std::unique_ptr<Decoder> decoder_;
  std::vector<Parameter*> params_;
};

}  // namespace xtal2dos
