// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/decoders.hpp"

#include <cmath>

#include "xtal2dos/error.hpp"

namespace xtal2dos {

DecoderKind parse_decoder_kind(const std::string& name) {
  if (name == "rnn") return DecoderKind::kRnn;
  if (name == "rnn_attn") return DecoderKind::kRnnAttn;
  if (name == "chunk_rnn") return DecoderKind::kChunkRnn;
  if (name == "chunk_rnn_attn") return DecoderKind::kChunkRnnAttn;
  if (name == "transformer") return DecoderKind::kTransformer;
  throw ConfigError("unknown decoder kind '" + name +
                    "' (expected rnn, rnn_attn, chunk_rnn, chunk_rnn_attn or transformer)");
}

std::string decoder_kind_name(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::kRnn: return "rnn";
    case DecoderKind::kRnnAttn: return "rnn_attn";
    case DecoderKind::kChunkRnn: return "chunk_rnn";
    case DecoderKind::kChunkRnnAttn: return "chunk_rnn_attn";
    case DecoderKind::kTransformer: return "transformer";
  }
  return "?";
}

bool decoder_uses_attention(DecoderKind kind) {
  return kind == DecoderKind::kRnnAttn || kind == DecoderKind::kChunkRnnAttn || kind == DecoderKind::kTransformer;
}

HeadNorm parse_head_norm(const std::string& name) {
  if (name == "softmax") return HeadNorm::kSoftmax;
  if (name == "softplus") return HeadNorm::kSoftplus;
  if (name == "none") return HeadNorm::kNone;
  throw ConfigError("unknown output head '" + name + "' (expected softmax, softplus or none)");
}

std::string head_norm_name(HeadNorm norm) {
  switch (norm) {
    case HeadNorm::kSoftmax: return "softmax";
    case HeadNorm::kSoftplus: return "softplus";
    case HeadNorm::kNone: return "none";
  }
  return "?";
}

std::size_t default_chunk(std::size_t l_y) {
  for (std::size_t c = l_y / 3; c > 1; --c) {
    if (l_y % c == 0) return c;
  }
  return 1;
}

std::size_t DecoderConfig::effective_chunk() const {
  if (kind == DecoderKind::kRnn || kind == DecoderKind::kRnnAttn) return 1;
  return chunk == 0 ? default_chunk(l_y) : chunk;
}

std::vector<std::string> DecoderConfig::problems() const {
  std::vector<std::string> out;
  if (l_y == 0) out.emplace_back("decoder l_y must be positive");
  if (d_hid == 0) out.emplace_back("decoder d_hid must be positive");
  if (decoder_uses_attention(kind) && (heads == 0 || (d_hid != 0 && d_hid % heads != 0))) {
    out.push_back("decoder d_hid " + std::to_string(d_hid) + " is not divisible by heads " + std::to_string(heads));
  }
  if (kind == DecoderKind::kChunkRnn || kind == DecoderKind::kChunkRnnAttn) {
    const std::size_t c = effective_chunk();
    if (l_y != 0 && (c == 0 || l_y % c != 0)) {
      out.push_back("chunk " + std::to_string(c) + " does not divide l_y " + std::to_string(l_y));
    }
  }
  if (kind == DecoderKind::kTransformer && layers == 0) out.emplace_back("transformer needs at least one layer");
  return out;
}

void DecoderConfig::validate() const {
  const auto list = problems();
  if (list.empty()) return;
  std::string message;
  for (const auto& p : list) message += (message.empty() ? "" : "; ") + p;
  throw ConfigError(message);
}

namespace {

std::vector<ad::AttentionSegment> source_segments(const DecoderInput& input, std::size_t rows_per_graph) {
  const std::size_t graphs = input.node_offsets.size() - 1;
  std::vector<ad::AttentionSegment> segments(graphs);
  for (std::size_t g = 0; g < graphs; ++g) {
    segments[g] = {g * rows_per_graph, rows_per_graph, input.node_offsets[g],
                   input.node_offsets[g + 1] - input.node_offsets[g]};
  }
  return segments;
}

void check_input(const DecoderInput& input, const DecoderConfig& config) {
  if (input.node_offsets.size() != input.pooled.rows() + 1) {
    throw DimensionError("decode: node_offsets has " + std::to_string(input.node_offsets.size()) +
                         " entries for " + std::to_string(input.pooled.rows()) + " graphs");
  }
  if (input.pooled.cols() != config.d_hid) {
    throw DimensionError("decode: h_x width " + std::to_string(input.pooled.cols()) + " != d_hid " +
                         std::to_string(config.d_hid));
  }
}

}  // namespace

ChunkRnnDecoder::ChunkRnnDecoder(const DecoderConfig& config, Rng& rng)
    : Decoder(config), chunk_(config.effective_chunk()), attend_(decoder_uses_attention(config.kind)) {
  if (config.kind == DecoderKind::kTransformer) throw ConfigError("ChunkRnnDecoder cannot build a transformer");
  config.validate();
  const std::size_t d = config.d_hid;
  start_ = Parameter("decoder.start", {1, d});
  init_uniform(start_, d, rng);
  cell_ = GruCell("decoder.gru", d, d, rng);
  feedback_ = Linear("decoder.feedback", chunk_, d, rng);
  if (attend_) attention_ = MultiHeadAttention("decoder.source", d, config.heads, rng);
  head_ = Linear("decoder.head", attend_ ? 2 * d : d, chunk_, rng);
}

Var ChunkRnnDecoder::decode(Tape& tape, const DecoderInput& input, DecoderTrace* trace) {
  check_input(input, config_);
  const std::size_t graphs = input.pooled.rows();
  const std::vector<std::uint32_t> zeros(graphs, 0);
  const auto segments = attend_ ? source_segments(input, 1) : std::vector<ad::AttentionSegment>{};

  Var h = input.pooled;
  Var x = ad::gather_rows(tape.param(start_), zeros);
  std::vector<Var> segments_out;
  segments_out.reserve(steps());
  for (std::size_t t = 0; t < steps(); ++t) {
    h = cell_.step(tape, x, h);
    Var features = h;
    if (attend_) {
      std::vector<double> weights;
      Var context = attention_.forward(tape, h, input.nodes, segments, false, trace ? &weights : nullptr);
      if (trace) trace->source_attention.push_back(std::move(weights));
      const Var parts[] = {h, context};
      features = ad::concat_cols(parts);
    }
    Var y = head_(tape, features);
    segments_out.push_back(y);
    if (t + 1 < steps()) x = feedback_(tape, y);
  }
  return segments_out.size() == 1 ? segments_out.front() : ad::concat_cols(segments_out);
}

void ChunkRnnDecoder::collect(std::vector<Parameter*>& out) {
  out.push_back(&start_);
  cell_.collect(out);
  feedback_.collect(out);
  if (attend_) attention_.collect(out);
  head_.collect(out);
}

TransformerBlock::TransformerBlock(const std::string& name, std::size_t d, std::size_t ff, std::size_t heads,
                                   Rng& rng)
    : self_attention(name + ".self", d, heads, rng),
      norm1(name + ".norm1", d),
      source_attention(name + ".source", d, heads, rng),
      norm2(name + ".norm2", d),
      ff1(name + ".ff1", d, ff, rng),
      ff2(name + ".ff2", ff, d, rng),
      norm3(name + ".norm3", d) {}

void TransformerBlock::collect(std::vector<Parameter*>& out) {
  self_attention.collect(out);
  norm1.collect(out);
  source_attention.collect(out);
  norm2.collect(out);
  ff1.collect(out);
  ff2.collect(out);
  norm3.collect(out);
}

TransformerDecoder::TransformerDecoder(const DecoderConfig& config, Rng& rng) : Decoder(config) {
  if (config.kind != DecoderKind::kTransformer) throw ConfigError("TransformerDecoder needs kind transformer");
  config.validate();
  const std::size_t d = config.d_hid;
  input_ = Linear("decoder.input", config.l_y + d, d, rng);
  blocks_.reserve(config.layers);
  for (std::size_t l = 0; l < config.layers; ++l) {
    blocks_.emplace_back("decoder.block" + std::to_string(l), d, config.effective_ff(), config.heads, rng);
  }
  head_ = Linear("decoder.head", d, 1, rng);
}

std::vector<double> TransformerDecoder::position_encoding(std::size_t graphs) const {
  const std::size_t l_y = config_.l_y;
  std::vector<double> s(graphs * l_y * l_y, 0.0);
  for (std::size_t g = 0; g < graphs; ++g) {
    for (std::size_t i = 0; i < l_y; ++i) s[(g * l_y + i) * l_y + i] = 1.0;
  }
  return s;
}

Var TransformerDecoder::decode(Tape& tape, const DecoderInput& input, DecoderTrace* trace) {
  const std::size_t graphs = input.pooled.rows();
  Var positions = tape.constant({graphs * config_.l_y, config_.l_y}, position_encoding(graphs));
  return decode_with_positions(tape, input, positions, trace);
}

Var TransformerDecoder::decode_with_positions(Tape& tape, const DecoderInput& input, Var positions,
                                              DecoderTrace* trace) {
  check_input(input, config_);
  const std::size_t graphs = input.pooled.rows();
  const std::size_t l_y = config_.l_y;
  if (positions.rows() != graphs * l_y || positions.cols() != l_y) {
    throw DimensionError("decode: position block must be [" + std::to_string(graphs * l_y) + ", " +
                         std::to_string(l_y) + "], got " + ad::to_string(positions.shape()));
  }
  std::vector<std::uint32_t> owner(graphs * l_y);
  for (std::size_t r = 0; r < owner.size(); ++r) owner[r] = static_cast<std::uint32_t>(r / l_y);
  const Var parts[] = {positions, ad::gather_rows(input.pooled, owner)};
  Var x = input_(tape, ad::concat_cols(parts));

  std::vector<ad::AttentionSegment> self_segments(graphs);
  for (std::size_t g = 0; g < graphs; ++g) self_segments[g] = {g * l_y, l_y, g * l_y, l_y};
  const auto src_segments = source_segments(input, l_y);

  for (auto& block : blocks_) {
    std::vector<double> self_w;
    std::vector<double> src_w;
    Var a = block.self_attention.forward(tape, x, x, self_segments, true, trace ? &self_w : nullptr);
    x = block.norm1(tape, ad::add(x, a));
    Var s = block.source_attention.forward(tape, x, input.nodes, src_segments, false, trace ? &src_w : nullptr);
    x = block.norm2(tape, ad::add(x, s));
    x = block.norm3(tape, ad::add(x, feed_forward(tape, x, block.ff1, block.ff2, config_.activation)));
    if (trace) {
      trace->self_attention.push_back(std::move(self_w));
      trace->source_attention.push_back(std::move(src_w));
    }
  }
  return ad::reshape(head_(tape, x), {graphs, l_y});
}

void TransformerDecoder::collect(std::vector<Parameter*>& out) {
  input_.collect(out);
  for (auto& b : blocks_) b.collect(out);
  head_.collect(out);
}

std::unique_ptr<Decoder> make_decoder(const DecoderConfig& config, Rng& rng) {
  if (config.kind == DecoderKind::kTransformer) return std::make_unique<TransformerDecoder>(config, rng);
  return std::make_unique<ChunkRnnDecoder>(config, rng);
}

Var feed_forward(Tape& tape, Var x, Linear& ff1, Linear& ff2, const ad::Activation& act) {
  return ff2(tape, ad::activate(ff1(tape, x), act));
}

Var output_head(Var raw, HeadNorm norm) {
  switch (norm) {
    case HeadNorm::kSoftmax: return ad::softmax(raw);
    case HeadNorm::kSoftplus: return ad::softplus(raw);
    case HeadNorm::kNone: return raw;
  }
  return raw;
}

}  // namespace xtal2dos
