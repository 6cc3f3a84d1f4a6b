// SPDX-License-Identifier: Apache-2.0
//
// Sequence decoders mapping the encoder state to a length-l_y spectrum.
//
// rnn and rnn_attn are the chunked decoders with a chunk of one bin, so they
// share parameter names and code paths with chunk_rnn and chunk_rnn_attn.

#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xtal2dos/encoder.hpp"
#include "xtal2dos/layers.hpp"

namespace xtal2dos {

enum class DecoderKind { kRnn, kRnnAttn, kChunkRnn, kChunkRnnAttn, kTransformer };

DecoderKind parse_decoder_kind(const std::string& name);
std::string decoder_kind_name(DecoderKind kind);
bool decoder_uses_attention(DecoderKind kind);

enum class HeadNorm { kSoftmax, kSoftplus, kNone };

HeadNorm parse_head_norm(const std::string& name);
std::string head_norm_name(HeadNorm norm);

/// Largest divisor of l_y not above l_y / 3 (17 for 51, 32 for 128), or 1.
std::size_t default_chunk(std::size_t l_y);

struct DecoderConfig {
  DecoderKind kind = DecoderKind::kTransformer;
  std::size_t l_y = 51;
  std::size_t d_hid = 128;
  std::size_t chunk = 0;  // 0 picks default_chunk(l_y); chunked kinds only
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t ff = 0;  // 0 picks 4 * d_hid
  ad::Activation activation;

  /// Segment length actually decoded per recurrent step (1 for rnn kinds).
  std::size_t effective_chunk() const;
  std::size_t effective_ff() const { return ff == 0 ? 4 * d_hid : ff; }
  /// Throws ConfigError describing every problem found.
  void validate() const;
  std::vector<std::string> problems() const;
};

/// What the decoder reads from the encoder.
struct DecoderInput {
  Var pooled;                                // h_x, [graphs, d_hid]
  Var nodes;                                 // final node embeddings, [nodes, d_hid]
  std::span<const std::size_t> node_offsets; // graphs + 1 entries
};

/// Optional attention capture for tests and inspection. Layout per entry
/// follows ad::attention.
struct DecoderTrace {
  std::vector<std::vector<double>> self_attention;    // per transformer layer
  std::vector<std::vector<double>> source_attention;  // per layer (transformer) or per step (rnn kinds)
};

class Decoder {
 public:
  virtual ~Decoder() = default;
  /// Raw (un-normalized) outputs, [graphs, l_y].
  virtual Var decode(Tape& tape, const DecoderInput& input, DecoderTrace* trace = nullptr) = 0;
  virtual void collect(std::vector<Parameter*>& out) = 0;
  const DecoderConfig& config() const { return config_; }

 protected:
  explicit Decoder(const DecoderConfig& config) : config_(config) {}
  DecoderConfig config_;
};

/// GRU over l_y / c steps. The initial hidden state is h_x, the first input a
/// learned start vector, later inputs the previous segment projected to d_hid.
/// With attention, the hidden state queries the atoms each step and the head
/// reads [hidden ; context].
class ChunkRnnDecoder final : public Decoder {
 public:
  ChunkRnnDecoder(const DecoderConfig& config, Rng& rng);
  Var decode(Tape& tape, const DecoderInput& input, DecoderTrace* trace = nullptr) override;
  void collect(std::vector<Parameter*>& out) override;

  std::size_t steps() const { return config_.l_y / chunk_; }
  GruCell& cell() { return cell_; }
  MultiHeadAttention& attention() { return attention_; }
  Linear& head() { return head_; }

 private:
  std::size_t chunk_;
  bool attend_;
  Parameter start_;  // [1, d_hid]
  GruCell cell_;
  Linear feedback_;  // c -> d_hid
  MultiHeadAttention attention_;
  Linear head_;  // d_hid (or 2 d_hid) -> c
};

struct TransformerBlock {
  MultiHeadAttention self_attention;
  LayerNorm norm1;
  MultiHeadAttention source_attention;
  LayerNorm norm2;
  Linear ff1;
  Linear ff2;
  LayerNorm norm3;

  TransformerBlock() = default;
  TransformerBlock(const std::string& name, std::size_t d, std::size_t ff, std::size_t heads, Rng& rng);
  void collect(std::vector<Parameter*>& out);
};

/// z_i = [one_hot(i) ; h_x] projected to d_hid, then post-norm blocks of causal
/// self-attention, source attention over the atoms and a feed-forward layer,
/// and a scalar head per position. Every position is decoded in one pass.
class TransformerDecoder final : public Decoder {
 public:
  TransformerDecoder(const DecoderConfig& config, Rng& rng);
  Var decode(Tape& tape, const DecoderInput& input, DecoderTrace* trace = nullptr) override;
  void collect(std::vector<Parameter*>& out) override;

  /// Same as decode, with the position one-hot rows replaced by `positions`
  /// ([graphs * l_y, l_y]). Used by the causal-mask tests.
  Var decode_with_positions(Tape& tape, const DecoderInput& input, Var positions, DecoderTrace* trace = nullptr);
  std::vector<double> position_encoding(std::size_t graphs) const;

  std::vector<TransformerBlock>& blocks() { return blocks_; }

 private:
  Linear input_;  // l_y + d_hid -> d_hid
  std::vector<TransformerBlock> blocks_;
  Linear head_;  // d_hid -> 1
};

std::unique_ptr<Decoder> make_decoder(const DecoderConfig& config, Rng& rng);

/// Position-wise feed-forward: ff2(act(ff1(x))).
Var feed_forward(Tape& tape, Var x, Linear& ff1, Linear& ff2, const ad::Activation& act);

/// softmax (rows sum to 1), softplus (non-negative) or identity, per row.
Var output_head(Var raw, HeadNorm norm);

}  // namespace xtal2dos
