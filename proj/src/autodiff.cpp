// SPDX-License-Identifier: Apache-2.0
#include "xtal2dos/autodiff.hpp"

#include <algorithm>
#include <sstream>

#include "xtal2dos/error.hpp"

namespace xtal2dos {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kDimension: return "dimension";
    case ErrorCode::kDomain: return "domain";
    case ErrorCode::kValidation: return "validation";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kNumeric: return "numeric";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

}  // namespace xtal2dos

namespace xtal2dos::ad {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Parameter::Parameter(std::string name_, Shape shape_)
    : name(std::move(name_)), shape(std::move(shape_)) {
  value.assign(numel(shape), 0.0);
  grad.assign(value.size(), 0.0);
}

void Parameter::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

const Shape& Var::shape() const { return tape_->node(id_).shape; }

std::size_t Var::size() const { return tape_->node(id_).value.size(); }

std::size_t Var::cols() const {
  const auto& s = shape();
  return s.empty() ? 1 : s.back();
}

std::size_t Var::rows() const {
  const auto c = cols();
  return c == 0 ? 0 : size() / c;
}

std::span<const double> Var::values() const { return tape_->value(id_); }

double Var::item() const {
  if (size() != 1) {
    throw DimensionError("item() requires a single-element array, got shape " + to_string(shape()));
  }
  return values()[0];
}

std::vector<double> Var::gradient() const {
  const auto& n = tape_->node(id_);
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return {n.grad.begin(), n.grad.end()};
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw DimensionError("constant: " + std::to_string(values.size()) + " values for shape " +
                         to_string(shape));
  }
  Node n;
  n.shape = std::move(shape);
  n.value.assign(values.begin(), values.end());
  return push(std::move(n));
}

Var Tape::variable(Shape shape, std::vector<double> values) {
  Var v = constant(std::move(shape), std::move(values));
  nodes_[v.id()].requires_grad = true;
  return v;
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  if (numel(p.shape) != p.value.size()) {
    throw DimensionError("parameter " + p.name + " holds " + std::to_string(p.value.size()) +
                         " values for shape " + to_string(p.shape));
  }
  Node n;
  n.shape = p.shape;
  n.value.assign(p.value.begin(), p.value.end());
  n.param = &p;
  n.requires_grad = true;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id());
  return v;
}

std::span<double> Tape::grad(std::uint32_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Var Tape::record(Shape shape, Buffer value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  if (numel(n.shape) != n.value.size()) {
    throw DimensionError("record: " + std::to_string(n.value.size()) + " values for shape " +
                         to_string(n.shape));
  }
  n.parents.reserve(parents.size());
  for (const auto& p : parents) {
    if (&p.tape() != this) throw DimensionError("record: operand belongs to a different tape");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(Var root) {
  if (&root.tape() != this) throw DimensionError("backward: root belongs to a different tape");
  if (root.size() != 1) {
    throw DimensionError("backward: root must be scalar, got shape " + to_string(root.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  grad(root.id())[0] = 1.0;
  for (std::int64_t id = root.id(); id >= 0; --id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(id));
  }
  for (auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto& g = n.param->grad;
    if (g.size() != n.grad.size()) g.assign(n.grad.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

bool Tape::topologically_ordered() const {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    for (auto p : nodes_[id].parents) {
      if (p >= id) return false;
    }
  }
  return true;
}

}  // namespace xtal2dos::ad
