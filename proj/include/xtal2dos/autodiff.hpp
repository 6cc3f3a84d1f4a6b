// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major arrays with a reverse-mode tape.
//
// A Tape owns every array produced while building one computation. Vars are
// lightweight handles (tape pointer + node index) and stay valid for the
// lifetime of the tape. Node indices grow monotonically, so creation order is
// a topological order and backward() is a single reverse sweep.
//
// Trainable weights live outside any tape in Parameter objects. Tape::param()
// copies a parameter into a leaf node once per tape; backward() adds the leaf
// gradient into Parameter::grad.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <new>
#include <string>
#include <unordered_map>
#include <vector>

namespace xtal2dos::ad {

using Shape = std::vector<std::size_t>;

/// Allocator with 64-byte alignment. Eigen picks its vectorized summation
/// order from the address alignment, so tape buffers must have a fixed
/// alignment for results to be bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string name, Shape shape);

  std::size_t size() const { return value.size(); }
  void zero_grad();
};

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }

  const Shape& shape() const;
  std::size_t size() const;
  /// Product of all dimensions except the last (1 for a scalar).
  std::size_t rows() const;
  /// Last dimension (1 for a scalar).
  std::size_t cols() const;

  std::span<const double> values() const;
  double value(std::size_t i) const { return values()[i]; }
  double item() const;
  /// Copy of the accumulated gradient; zeros when the node was not reached.
  std::vector<double> gradient() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  struct Node {
    Shape shape;
    Buffer value;
    Buffer grad;  // empty until the backward sweep reaches it
    std::vector<std::uint32_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var constant(Shape shape, std::vector<double> values);
  /// Leaf that receives a gradient.
  Var variable(Shape shape, std::vector<double> values);
  /// Leaf bound to a trainable parameter. Repeated calls return the same node.
  Var param(Parameter& p);

  /// Reverse sweep from a scalar root. Gradients from a previous sweep on this
  /// tape are discarded; parameter gradients accumulate.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::uint32_t id) const { return nodes_[id]; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::span<const double> value(std::uint32_t id) const { return nodes_[id].value; }
  /// Gradient buffer of a node, zero-filled on first access.
  std::span<double> grad(std::uint32_t id);

  /// Append an operation result. The backward function is dropped when no
  /// parent requires a gradient.
  Var record(Shape shape, Buffer value, std::vector<Var> parents, BackwardFn backward);

  /// True when every node's parents were recorded before it.
  bool topologically_ordered() const;

 private:
  Var push(Node node);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
};

}  // namespace xtal2dos::ad
