// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "xtal2dos/error.hpp"

namespace xtal2dos::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;
using Stride = Eigen::OuterStride<>;
using CSMap = Eigen::Map<const RowMat, 0, Stride>;
using SMap = Eigen::Map<RowMat, 0, Stride>;

void require_rank2(const Var& x, const char* op) {
  if (x.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-d array, got shape " + to_string(x.shape()));
  }
}

void require_finite(std::span<const double> v, const char* op) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw DomainError(std::string(op) + ": non-finite input at index " + std::to_string(i));
    }
  }
}

// Max-subtracted softmax of one contiguous row.
void softmax_row(const double* in, double* out, std::size_t n) {
  double mx = in[0];
  for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = std::exp(in[i] - mx);
    z += out[i];
  }
  const double inv = 1.0 / z;
  for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

// dx = y * (g - sum(g * y)) for one softmax row.
void softmax_row_backward(const double* y, const double* g, double* dx, std::size_t n) {
  double dot = 0.0;
  for (std::size_t i = 0; i < n; ++i) dot += g[i] * y[i];
  for (std::size_t i = 0; i < n; ++i) dx[i] += y[i] * (g[i] - dot);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <class Forward, class Derivative>
Var unary(Var x, Forward f, Derivative df) {
  const auto xv = x.values();
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  const auto ix = x.id();
  return x.tape().record(x.shape(), std::move(out), {x}, [ix, df](Tape& t, std::uint32_t self) {
    const auto& n = t.node(self);
    const auto xv = t.value(ix);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += n.grad[i] * df(xv[i], n.value[i]);
  });
}

// Scalar-with-array or equal-shape elementwise op. da/db are the partial
// derivatives given (a_i, b_i, out_i).
template <class Forward, class DA, class DB>
Var binary(Var a, Var b, const char* op, Forward f, DA da, DB db) {
  const bool same = a.shape() == b.shape() || (a.size() == b.size() && a.size() == 1);
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!same && !a_scalar && !b_scalar) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " are not broadcast-compatible");
  }
  const Shape shape = (same || b_scalar) ? a.shape() : b.shape();
  const std::size_t n = numel(shape);
  const std::size_t sa = a_scalar && !same ? 0 : 1;
  const std::size_t sb = b_scalar && !same ? 0 : 1;
  const auto av = a.values();
  const auto bv = b.values();
  Buffer out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[i * sa], bv[i * sb]);
  const auto ia = a.id();
  const auto ib = b.id();
  return a.tape().record(shape, std::move(out), {a, b}, [=](Tape& t, std::uint32_t self) {
    const auto& node = t.node(self);
    const auto av = t.value(ia);
    const auto bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t i = 0; i < n; ++i) ga[i * sa] += node.grad[i] * da(av[i * sa], bv[i * sb], node.value[i]);
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i) gb[i * sb] += node.grad[i] * db(av[i * sa], bv[i * sb], node.value[i]);
    }
  });
}

}  // namespace

Activation parse_activation(const std::string& name, double slope) {
  if (name == "identity" || name == "linear") return {ActivationKind::kIdentity, slope};
  if (name == "relu") return {ActivationKind::kRelu, slope};
  if (name == "leaky_relu") return {ActivationKind::kLeakyRelu, slope};
  if (name == "sigmoid") return {ActivationKind::kSigmoid, slope};
  if (name == "tanh") return {ActivationKind::kTanh, slope};
  if (name == "softplus") return {ActivationKind::kSoftplus, slope};
  throw ConfigError("unknown activation '" + name + "'");
}

std::string activation_name(const Activation& act) {
  switch (act.kind) {
    case ActivationKind::kIdentity: return "identity";
    case ActivationKind::kRelu: return "relu";
    case ActivationKind::kLeakyRelu: return "leaky_relu";
    case ActivationKind::kSigmoid: return "sigmoid";
    case ActivationKind::kTanh: return "tanh";
    case ActivationKind::kSoftplus: return "softplus";
  }
  return "identity";
}

Var matmul(Var a, Var b, bool transpose_a, bool transpose_b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t ar = a.shape()[0], ac = a.shape()[1];
  const std::size_t br = b.shape()[0], bc = b.shape()[1];
  const std::size_t m = transpose_a ? ac : ar;
  const std::size_t ka = transpose_a ? ar : ac;
  const std::size_t kb = transpose_b ? bc : br;
  const std::size_t n = transpose_b ? br : bc;
  if (ka != kb) {
    throw DimensionError("matmul: inner dimensions differ for " + to_string(a.shape()) +
                         (transpose_a ? "^T" : "") + " x " + to_string(b.shape()) + (transpose_b ? "^T" : ""));
  }
  Buffer out(m * n);
  {
    CMap A(a.values().data(), ar, ac);
    CMap B(b.values().data(), br, bc);
    MMap C(out.data(), m, n);
    if (!transpose_a && !transpose_b) C.noalias() = A * B;
    else if (transpose_a && !transpose_b) C.noalias() = A.transpose() * B;
    else if (!transpose_a && transpose_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  const auto ia = a.id();
  const auto ib = b.id();
  return a.tape().record({m, n}, std::move(out), {a, b}, [=](Tape& t, std::uint32_t self) {
    CMap G(t.node(self).grad.data(), m, n);
    CMap A(t.value(ia).data(), ar, ac);
    CMap B(t.value(ib).data(), br, bc);
    if (t.requires_grad(ia)) {
      MMap GA(t.grad(ia).data(), ar, ac);
      if (!transpose_a && !transpose_b) GA.noalias() += G * B.transpose();
      else if (transpose_a && !transpose_b) GA.noalias() += B * G.transpose();
      else if (!transpose_a && transpose_b) GA.noalias() += G * B;
      else GA.noalias() += B.transpose() * G.transpose();
    }
    if (t.requires_grad(ib)) {
      MMap GB(t.grad(ib).data(), br, bc);
      if (!transpose_a && !transpose_b) GB.noalias() += A.transpose() * G;
      else if (transpose_a && !transpose_b) GB.noalias() += A * G;
      else if (!transpose_a && transpose_b) GB.noalias() += G.transpose() * A;
      else GB.noalias() += G.transpose() * A.transpose();
    }
  });
}

Var linear(Var x, Var w, Var b) {
  require_rank2(x, "linear");
  require_rank2(w, "linear");
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  if (w.shape()[0] != k) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " does not match weight " + to_string(w.shape()));
  }
  if (b.size() != n) {
    throw DimensionError("linear: bias " + to_string(b.shape()) + " does not match weight " + to_string(w.shape()));
  }
  Buffer out(m * n);
  {
    MMap C(out.data(), m, n);
    C.noalias() = CMap(x.values().data(), m, k) * CMap(w.values().data(), k, n);
    Eigen::Map<const Eigen::RowVectorXd> bias(b.values().data(), n);
    C.rowwise() += bias;
  }
  const auto ix = x.id(), iw = w.id(), ib = b.id();
  return x.tape().record({m, n}, std::move(out), {x, w, b}, [=](Tape& t, std::uint32_t self) {
    CMap G(t.node(self).grad.data(), m, n);
    if (t.requires_grad(ix)) {
      MMap(t.grad(ix).data(), m, k).noalias() += G * CMap(t.value(iw).data(), k, n).transpose();
    }
    if (t.requires_grad(iw)) {
      MMap(t.grad(iw).data(), k, n).noalias() += CMap(t.value(ix).data(), m, k).transpose() * G;
    }
    if (t.requires_grad(ib)) {
      Eigen::Map<Eigen::RowVectorXd>(t.grad(ib).data(), n) += G.colwise().sum();
    }
  });
}

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  const auto bv = b.values();
  for (std::size_t i = 0; i < bv.size(); ++i) {
    if (bv[i] == 0.0) throw DomainError("div: zero denominator at index " + std::to_string(i));
  }
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Var scale(Var x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double offset) {
  return unary(x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  const auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    if (!(xv[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(xv[i]) + " at index " + std::to_string(i));
    }
  }
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sigmoid(Var x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var softplus(Var x) {
  return unary(x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(Var x, double slope) {
  return unary(
      x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

Var clamp_min(Var x, double lo) {
  return unary(
      x, [lo](double v) { return v > lo ? v : lo; }, [lo](double v, double) { return v > lo ? 1.0 : 0.0; });
}

Var activate(Var x, const Activation& act) {
  switch (act.kind) {
    case ActivationKind::kIdentity: return x;
    case ActivationKind::kRelu: return relu(x);
    case ActivationKind::kLeakyRelu: return leaky_relu(x, act.slope);
    case ActivationKind::kSigmoid: return sigmoid(x);
    case ActivationKind::kTanh: return tanh(x);
    case ActivationKind::kSoftplus: return softplus(x);
  }
  return x;
}

Var sum(Var x) {
  const auto xv = x.values();
  const double s = std::accumulate(xv.begin(), xv.end(), 0.0);
  const auto ix = x.id();
  return x.tape().record({}, {s}, {x}, [ix](Tape& t, std::uint32_t self) {
    const double g = t.node(self).grad[0];
    for (auto& v : t.grad(ix)) v += g;
  });
}

Var mean(Var x) {
  if (x.size() == 0) throw DimensionError("mean: empty array");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

Var row_sum(Var x) {
  const std::size_t r = x.rows(), c = x.cols();
  const auto xv = x.values();
  Buffer out(r, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i] += xv[i * c + j];
  }
  const auto ix = x.id();
  return x.tape().record({r, 1}, std::move(out), {x}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[i];
    }
  });
}

Var softmax(Var x, std::span<const double> additive_mask) {
  if (x.size() == 0) throw DimensionError("softmax: empty array");
  if (!additive_mask.empty() && additive_mask.size() != x.size()) {
    throw DimensionError("softmax: mask has " + std::to_string(additive_mask.size()) + " entries for shape " +
                         to_string(x.shape()));
  }
  require_finite(x.values(), "softmax");
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<double> logits(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < additive_mask.size(); ++i) logits[i] += additive_mask[i];
  Buffer out(x.size());
  for (std::size_t i = 0; i < r; ++i) softmax_row(logits.data() + i * c, out.data() + i * c, c);
  const auto ix = x.id();
  return x.tape().record(x.shape(), std::move(out), {x}, [=](Tape& t, std::uint32_t self) {
    const auto& n = t.node(self);
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < r; ++i) {
      softmax_row_backward(n.value.data() + i * c, n.grad.data() + i * c, gx.data() + i * c, c);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const std::size_t r = x.rows(), d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: last dimension must be >= 2, got shape " + to_string(x.shape()));
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match feature width " + std::to_string(d));
  }
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv = std::make_shared<std::vector<double>>(r);
  Buffer out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double s = 1.0 / std::sqrt(var + eps);
    (*inv)[i] = s;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * s;
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(x.shape(), std::move(out), {x, gain, bias}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    const auto gv = t.value(ig);
    if (t.requires_grad(ig)) {
      auto gg = t.grad(ig);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * (*xhat)[i * d + j];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
    }
    if (t.requires_grad(ix)) {
      auto gx = t.grad(ix);
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t i = 0; i < r; ++i) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[i * d + j] * gv[j];
          m1 += gh;
          m2 += gh * (*xhat)[i * d + j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for (std::size_t j = 0; j < d; ++j) {
          const double gh = g[i * d + j] * gv[j];
          gx[i * d + j] += (*inv)[i] * (gh - m1 - (*xhat)[i * d + j] * m2);
        }
      }
    }
  });
}

Var batch_norm(Var x, Var gain, Var bias, BatchNormState& state, Mode mode) {
  require_rank2(x, "batch_norm");
  const std::size_t n = x.shape()[0], d = x.shape()[1];
  if (gain.size() != d || bias.size() != d || state.running_mean.size() != d || state.running_var.size() != d) {
    throw DimensionError("batch_norm: parameter widths do not match feature width " + std::to_string(d));
  }
  if (mode == Mode::kTrain && n < 2) {
    throw Error(ErrorCode::kInvalidArgument, "batch_norm: train mode requires a batch of at least 2 rows");
  }
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> mu(d, 0.0), var(d, 0.0);
  if (mode == Mode::kTrain) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mu[j] += xv[i * d + j];
    for (auto& m : mu) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) var[j] += (xv[i * d + j] - mu[j]) * (xv[i * d + j] - mu[j]);
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    for (std::size_t j = 0; j < d; ++j) {
      var[j] /= static_cast<double>(n);
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j] * unbias;
    }
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }
  auto inv = std::make_shared<std::vector<double>>(d);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  Buffer out(x.size());
  for (std::size_t j = 0; j < d; ++j) (*inv)[j] = 1.0 / std::sqrt(var[j] + state.eps);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[i * d + j] - mu[j]) * (*inv)[j];
      (*xhat)[i * d + j] = h;
      out[i * d + j] = h * gv[j] + bv[j];
    }
  }
  const bool train = mode == Mode::kTrain;
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().record(x.shape(), std::move(out), {x, gain, bias}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    const auto gv = t.value(ig);
    if (t.requires_grad(ig)) {
      auto gg = t.grad(ig);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * (*xhat)[i * d + j];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
    }
    if (!t.requires_grad(ix)) return;
    auto gx = t.grad(ix);
    if (!train) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gx[i * d + j] += g[i * d + j] * gv[j] * (*inv)[j];
      return;
    }
    std::vector<double> m1(d, 0.0), m2(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double gh = g[i * d + j] * gv[j];
        m1[j] += gh;
        m2[j] += gh * (*xhat)[i * d + j];
      }
    }
    for (std::size_t j = 0; j < d; ++j) {
      m1[j] /= static_cast<double>(n);
      m2[j] /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double gh = g[i * d + j] * gv[j];
        gx[i * d + j] += (*inv)[j] * (gh - m1[j] - (*xhat)[i * d + j] * m2[j]);
      }
    }
  });
}

Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  const auto ix = x.id();
  return x.tape().record(std::move(shape), Buffer(x.values().begin(), x.values().end()), {x},
                         [ix](Tape& t, std::uint32_t self) {
                           const auto& g = t.node(self).grad;
                           auto gx = t.grad(ix);
                           for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                         });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no operands");
  const std::size_t r = parts[0].rows();
  std::vector<std::size_t> widths;
  std::vector<std::uint32_t> ids;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row counts differ (" + to_string(parts[0].shape()) + " vs " +
                           to_string(p.shape()) + ")");
    }
    widths.push_back(p.cols());
    ids.push_back(p.id());
    total += p.cols();
  }
  Buffer out(r * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(pv.data() + i * widths[k], widths[k], out.data() + i * total + off);
    off += widths[k];
  }
  return parts[0].tape().record({r, total}, std::move(out), std::vector<Var>(parts.begin(), parts.end()),
                                [=](Tape& t, std::uint32_t self) {
                                  const auto& g = t.node(self).grad;
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    if (t.requires_grad(ids[k])) {
                                      auto gp = t.grad(ids[k]);
                                      for (std::size_t i = 0; i < r; ++i)
                                        for (std::size_t j = 0; j < widths[k]; ++j)
                                          gp[i * widths[k] + j] += g[i * total + off + j];
                                    }
                                    off += widths[k];
                                  }
                                });
}

Var slice_cols(Var x, std::size_t start, std::size_t count) {
  const std::size_t r = x.rows(), c = x.cols();
  if (start + count > c) {
    throw DimensionError("slice_cols: columns [" + std::to_string(start) + "," + std::to_string(start + count) +
                         ") out of range for shape " + to_string(x.shape()));
  }
  const auto xv = x.values();
  Buffer out(r * count);
  for (std::size_t i = 0; i < r; ++i) std::copy_n(xv.data() + i * c + start, count, out.data() + i * count);
  const auto ix = x.id();
  return x.tape().record({r, count}, std::move(out), {x}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    auto gx = t.grad(ix);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) gx[i * c + start + j] += g[i * count + j];
  });
}

Var gather_rows(Var x, std::span<const std::uint32_t> index) {
  const std::size_t n = x.rows(), c = x.cols();
  const auto xv = x.values();
  Buffer out(index.size() * c);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= n) {
      throw DimensionError("gather_rows: index " + std::to_string(index[r]) + " out of range for shape " +
                           to_string(x.shape()));
    }
    std::copy_n(xv.data() + index[r] * c, c, out.data() + r * c);
  }
  const auto ix = x.id();
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  return x.tape().record({index.size(), c}, std::move(out), {x},
                         [ix, c, idx = std::move(idx)](Tape& t, std::uint32_t self) {
                           const auto& g = t.node(self).grad;
                           auto gx = t.grad(ix);
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             for (std::size_t j = 0; j < c; ++j) gx[idx[r] * c + j] += g[r * c + j];
                         });
}

Var scatter_add_rows(Var x, std::span<const std::uint32_t> index, std::size_t out_rows) {
  const std::size_t c = x.cols();
  if (index.size() != x.rows()) {
    throw DimensionError("scatter_add_rows: " + std::to_string(index.size()) + " indices for shape " +
                         to_string(x.shape()));
  }
  const auto xv = x.values();
  Buffer out(out_rows * c, 0.0);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= out_rows) {
      throw DimensionError("scatter_add_rows: index " + std::to_string(index[r]) + " >= " + std::to_string(out_rows));
    }
    for (std::size_t j = 0; j < c; ++j) out[index[r] * c + j] += xv[r * c + j];
  }
  const auto ix = x.id();
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  return x.tape().record({out_rows, c}, std::move(out), {x},
                         [ix, c, idx = std::move(idx)](Tape& t, std::uint32_t self) {
                           const auto& g = t.node(self).grad;
                           auto gx = t.grad(ix);
                           for (std::size_t r = 0; r < idx.size(); ++r)
                             for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[idx[r] * c + j];
                         });
}

Var scale_rows(Var x, Var s) {
  const std::size_t m = x.rows(), n = x.cols();
  if (s.size() != m) {
    throw DimensionError("scale_rows: scale " + to_string(s.shape()) + " does not match rows of " +
                         to_string(x.shape()));
  }
  const auto xv = x.values();
  const auto sv = s.values();
  Buffer out(x.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * sv[i];
  const auto ix = x.id(), is = s.id();
  return x.tape().record(x.shape(), std::move(out), {x, s}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    if (t.requires_grad(ix)) {
      const auto sv = t.value(is);
      auto gx = t.grad(ix);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] * sv[i];
    }
    if (t.requires_grad(is)) {
      const auto xv = t.value(ix);
      auto gs = t.grad(is);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gs[i] += g[i * n + j] * xv[i * n + j];
    }
  });
}

Var segment_softmax(Var scores, std::span<const std::size_t> offsets) {
  const std::size_t m = scores.rows(), c = scores.cols();
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != m) {
    throw DimensionError("segment_softmax: offsets must run from 0 to " + std::to_string(m));
  }
  require_finite(scores.values(), "segment_softmax");
  const auto sv = scores.values();
  Buffer out(scores.size());
  std::vector<double> buf_in, buf_out;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    if (e < b) throw DimensionError("segment_softmax: offsets must be non-decreasing");
    if (e == b) continue;
    buf_in.resize(e - b);
    buf_out.resize(e - b);
    for (std::size_t j = 0; j < c; ++j) {
      for (std::size_t r = b; r < e; ++r) buf_in[r - b] = sv[r * c + j];
      softmax_row(buf_in.data(), buf_out.data(), e - b);
      for (std::size_t r = b; r < e; ++r) out[r * c + j] = buf_out[r - b];
    }
  }
  const auto ix = scores.id();
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  return scores.tape().record(scores.shape(), std::move(out), {scores},
                              [ix, c, offs = std::move(offs)](Tape& t, std::uint32_t self) {
                                const auto& n = t.node(self);
                                auto gx = t.grad(ix);
                                for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
                                  for (std::size_t j = 0; j < c; ++j) {
                                    double dot = 0.0;
                                    for (std::size_t r = offs[s]; r < offs[s + 1]; ++r)
                                      dot += n.grad[r * c + j] * n.value[r * c + j];
                                    for (std::size_t r = offs[s]; r < offs[s + 1]; ++r)
                                      gx[r * c + j] += n.value[r * c + j] * (n.grad[r * c + j] - dot);
                                  }
                                }
                              });
}

Var segment_mean_rows(Var x, std::span<const std::size_t> offsets) {
  const std::size_t m = x.rows(), c = x.cols();
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != m) {
    throw DimensionError("segment_mean_rows: offsets must run from 0 to " + std::to_string(m));
  }
  const std::size_t groups = offsets.size() - 1;
  const auto xv = x.values();
  Buffer out(groups * c, 0.0);
  for (std::size_t s = 0; s < groups; ++s) {
    const std::size_t b = offsets[s], e = offsets[s + 1];
    if (e <= b) throw DimensionError("segment_mean_rows: empty segment " + std::to_string(s));
    for (std::size_t r = b; r < e; ++r)
      for (std::size_t j = 0; j < c; ++j) out[s * c + j] += xv[r * c + j];
    const double inv = 1.0 / static_cast<double>(e - b);
    for (std::size_t j = 0; j < c; ++j) out[s * c + j] *= inv;
  }
  const auto ix = x.id();
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  return x.tape().record({groups, c}, std::move(out), {x}, [ix, c, offs = std::move(offs)](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    auto gx = t.grad(ix);
    for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
      const double inv = 1.0 / static_cast<double>(offs[s + 1] - offs[s]);
      for (std::size_t r = offs[s]; r < offs[s + 1]; ++r)
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[s * c + j] * inv;
    }
  });
}

Var head_dot(Var a, Var b, std::size_t heads) {
  const std::size_t m = a.rows(), d = a.cols();
  if (a.shape() != b.shape()) {
    throw DimensionError("head_dot: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " differ");
  }
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("head_dot: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const auto av = a.values();
  const auto bv = b.values();
  Buffer out(m * heads, 0.0);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t h = 0; h < heads; ++h) {
      double s = 0.0;
      for (std::size_t j = 0; j < dh; ++j) s += av[r * d + h * dh + j] * bv[r * d + h * dh + j];
      out[r * heads + h] = s;
    }
  const auto ia = a.id(), ib = b.id();
  return a.tape().record({m, heads}, std::move(out), {a, b}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    const auto av = t.value(ia);
    const auto bv = t.value(ib);
    if (t.requires_grad(ia)) {
      auto ga = t.grad(ia);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j) ga[r * d + h * dh + j] += g[r * heads + h] * bv[r * d + h * dh + j];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad(ib);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j) gb[r * d + h * dh + j] += g[r * heads + h] * av[r * d + h * dh + j];
    }
  });
}

Var head_scale(Var x, Var w, std::size_t heads) {
  const std::size_t m = x.rows(), d = x.cols();
  if (heads == 0 || d % heads != 0) {
    throw DimensionError("head_scale: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  }
  if (w.rows() != m || w.cols() != heads) {
    throw DimensionError("head_scale: weights " + to_string(w.shape()) + " do not match " + to_string(x.shape()) +
                         " with " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const auto xv = x.values();
  const auto wv = w.values();
  Buffer out(x.size());
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t j = 0; j < dh; ++j) out[r * d + h * dh + j] = xv[r * d + h * dh + j] * wv[r * heads + h];
  const auto ix = x.id(), iw = w.id();
  return x.tape().record(x.shape(), std::move(out), {x, w}, [=](Tape& t, std::uint32_t self) {
    const auto& g = t.node(self).grad;
    if (t.requires_grad(ix)) {
      const auto wv = t.value(iw);
      auto gx = t.grad(ix);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t j = 0; j < dh; ++j) gx[r * d + h * dh + j] += g[r * d + h * dh + j] * wv[r * heads + h];
    }
    if (t.requires_grad(iw)) {
      const auto xv = t.value(ix);
      auto gw = t.grad(iw);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t h = 0; h < heads; ++h) {
          double s = 0.0;
          for (std::size_t j = 0; j < dh; ++j) s += g[r * d + h * dh + j] * xv[r * d + h * dh + j];
          gw[r * heads + h] += s;
        }
    }
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads, std::span<const AttentionSegment> segments, bool causal,
              std::vector<double>* weights_out) {
  require_rank2(q, "attention");
  require_rank2(k, "attention");
  require_rank2(v, "attention");
  const std::size_t d = q.cols(), dv = v.cols();
  if (k.cols() != d || k.rows() != v.rows()) {
    throw DimensionError("attention: incompatible q/k/v shapes " + to_string(q.shape()) + ", " + to_string(k.shape()) +
                         ", " + to_string(v.shape()));
  }
  if (heads == 0 || d % heads != 0 || dv % heads != 0) {
    throw DimensionError("attention: widths " + std::to_string(d) + "/" + std::to_string(dv) +
                         " not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads, dhv = dv / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<std::size_t> weight_offset(segments.size() + 1, 0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    if (seg.query_offset + seg.query_count > q.rows() || seg.key_offset + seg.key_count > k.rows()) {
      throw DimensionError("attention: segment " + std::to_string(s) + " out of range");
    }
    if (seg.query_count > 0 && seg.key_count == 0) {
      throw DimensionError("attention: segment " + std::to_string(s) + " has queries but no keys");
    }
    if (causal && seg.query_count != seg.key_count) {
      throw DimensionError("attention: causal segment " + std::to_string(s) + " is not square");
    }
    weight_offset[s + 1] = weight_offset[s] + heads * seg.query_count * seg.key_count;
  }
  require_finite(q.values(), "attention");
  require_finite(k.values(), "attention");

  auto probs = std::make_shared<Buffer>(weight_offset.back());
  Buffer out(q.rows() * dv, 0.0);
  const double* qp = q.values().data();
  const double* kp = k.values().data();
  const double* vp = v.values().data();
  RowMat scores;
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto& seg = segments[s];
    const std::size_t ql = seg.query_count, kl = seg.key_count;
    if (ql == 0) continue;
    for (std::size_t h = 0; h < heads; ++h) {
      CSMap Q(qp + seg.query_offset * d + h * dh, ql, dh, Stride(d));
      CSMap K(kp + seg.key_offset * d + h * dh, kl, dh, Stride(d));
      CSMap V(vp + seg.key_offset * dv + h * dhv, kl, dhv, Stride(dv));
      scores.noalias() = (Q * K.transpose()) * scale_factor;
      if (causal) {
        for (std::size_t i = 0; i < ql; ++i)
          for (std::size_t j = i + 1; j < kl; ++j) scores(i, j) += kMaskLogit;
      }
      double* P = probs->data() + weight_offset[s] + h * ql * kl;
      for (std::size_t i = 0; i < ql; ++i) softmax_row(scores.data() + i * kl, P + i * kl, kl);
      SMap O(out.data() + seg.query_offset * dv + h * dhv, ql, dhv, Stride(dv));
      O.noalias() = CMap(P, ql, kl) * V;
    }
  }
  if (weights_out != nullptr) weights_out->assign(probs->begin(), probs->end());

  const auto iq = q.id(), ik = k.id(), iv = v.id();
  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  return q.tape().record(
      {q.rows(), dv}, std::move(out), {q, k, v},
      [=, segs = std::move(segs), weight_offset = std::move(weight_offset)](Tape& t, std::uint32_t self) {
        const double* g = t.node(self).grad.data();
        const double* qp = t.value(iq).data();
        const double* kp = t.value(ik).data();
        const double* vp = t.value(iv).data();
        double* gq = t.requires_grad(iq) ? t.grad(iq).data() : nullptr;
        double* gk = t.requires_grad(ik) ? t.grad(ik).data() : nullptr;
        double* gv = t.requires_grad(iv) ? t.grad(iv).data() : nullptr;
        RowMat dP, dS;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const auto& seg = segs[s];
          const std::size_t ql = seg.query_count, kl = seg.key_count;
          if (ql == 0) continue;
          for (std::size_t h = 0; h < heads; ++h) {
            CMap P(probs->data() + weight_offset[s] + h * ql * kl, ql, kl);
            CSMap G(g + seg.query_offset * dv + h * dhv, ql, dhv, Stride(dv));
            CSMap Q(qp + seg.query_offset * d + h * dh, ql, dh, Stride(d));
            CSMap K(kp + seg.key_offset * d + h * dh, kl, dh, Stride(d));
            CSMap V(vp + seg.key_offset * dv + h * dhv, kl, dhv, Stride(dv));
            if (gv) SMap(gv + seg.key_offset * dv + h * dhv, kl, dhv, Stride(dv)).noalias() += P.transpose() * G;
            if (!gq && !gk) continue;
            dP.noalias() = G * V.transpose();
            dS.resize(ql, kl);
            for (std::size_t i = 0; i < ql; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < kl; ++j) dot += dP(i, j) * P(i, j);
              for (std::size_t j = 0; j < kl; ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * scale_factor;
            }
            if (gq) SMap(gq + seg.query_offset * d + h * dh, ql, dh, Stride(d)).noalias() += dS * K;
            if (gk) SMap(gk + seg.key_offset * d + h * dh, kl, dh, Stride(d)).noalias() += dS.transpose() * Q;
          }
        }
      });
}

}  // namespace xtal2dos::ad
