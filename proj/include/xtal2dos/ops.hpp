// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives over Tape arrays.
//
// Broadcasting is limited to scalar-with-array and equal shapes. Row-wise
// bias, per-row scaling and head-wise products are dedicated primitives
// instead of general broadcasting.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xtal2dos/autodiff.hpp"

namespace xtal2dos::ad {

/// Additive logit used for masked attention entries.
inline constexpr double kMaskLogit = -1e9;

enum class ActivationKind { kIdentity, kRelu, kLeakyRelu, kSigmoid, kTanh, kSoftplus };

struct Activation {
  ActivationKind kind = ActivationKind::kLeakyRelu;
  double slope = 0.01;  // leaky-relu only
};

Activation parse_activation(const std::string& name, double slope = 0.01);
std::string activation_name(const Activation& act);

// Linear algebra.
Var matmul(Var a, Var b, bool transpose_a = false, bool transpose_b = false);
/// x[m,k] * w[k,n] + b[n] (bias added to every row).
Var linear(Var x, Var w, Var b);

// Elementwise. Binary ops accept equal shapes or a single-element operand.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scale(Var x, double factor);
Var add_scalar(Var x, double offset);
Var exp(Var x);
Var log(Var x);
Var sigmoid(Var x);
Var tanh(Var x);
Var softplus(Var x);
Var relu(Var x);
Var leaky_relu(Var x, double slope);
/// max(x, lo); the gradient passes only where x > lo.
Var clamp_min(Var x, double lo);
Var activate(Var x, const Activation& act);

// Reductions.
Var sum(Var x);
Var mean(Var x);
/// [rows, cols] -> [rows, 1]
Var row_sum(Var x);

/// Softmax along the last axis with max subtraction. A non-empty mask is added
/// to the logits before normalization (use kMaskLogit to exclude entries).
Var softmax(Var x, std::span<const double> additive_mask = {});

/// Per-row normalization over the last axis, eps inside the square root.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

enum class Mode { kTrain, kEval };

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t features)
      : running_mean(features, 0.0), running_var(features, 1.0) {}
};

/// Column-wise normalization of x[batch, d]. Train mode uses batch statistics
/// and updates the running moments (unbiased variance); eval mode uses the
/// running moments.
Var batch_norm(Var x, Var gain, Var bias, BatchNormState& state, Mode mode);

// Structural.
Var reshape(Var x, Shape shape);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t start, std::size_t count);
/// out[r] = x[index[r]]
Var gather_rows(Var x, std::span<const std::uint32_t> index);
/// out[index[r]] += x[r], out has out_rows rows.
Var scatter_add_rows(Var x, std::span<const std::uint32_t> index, std::size_t out_rows);
/// x[m,n] with each row multiplied by s[m,1].
Var scale_rows(Var x, Var s);
/// Softmax over each contiguous row range [offsets[g], offsets[g+1]),
/// independently per column.
Var segment_softmax(Var scores, std::span<const std::size_t> offsets);
/// Mean of each contiguous row range -> [groups, cols].
Var segment_mean_rows(Var x, std::span<const std::size_t> offsets);
/// Per-row, per-head dot products: a,b [m, heads*dh] -> [m, heads].
Var head_dot(Var a, Var b, std::size_t heads);
/// x[m, heads*dh] with head block h of row r scaled by w[r, h].
Var head_scale(Var x, Var w, std::size_t heads);

/// Rows [query_offset, +query_count) of q attend over rows
/// [key_offset, +key_count) of k and v.
struct AttentionSegment {
  std::size_t query_offset = 0;
  std::size_t query_count = 0;
  std::size_t key_offset = 0;
  std::size_t key_count = 0;
};

/// Multi-head scaled dot-product attention, softmax(QK^T/sqrt(dh))V per head
/// and per segment, heads concatenated along columns. With causal set, query i
/// of a segment only sees keys j <= i (segments must then be square). When
/// weights_out is non-null it receives the attention matrices, laid out
/// segment-major, then head, then query row, then key.
Var attention(Var q, Var k, Var v, std::size_t heads, std::span<const AttentionSegment> segments,
              bool causal, std::vector<double>* weights_out = nullptr);

}  // namespace xtal2dos::ad
