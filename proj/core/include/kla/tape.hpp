#pragma once

// Minimal reverse-mode differentiation over tensors.
//
// A Tape is an append-only list of nodes; each node stores its value, the ids
// of its inputs and a closure that pushes its output gradient to the inputs.
// Inputs always precede the node that consumes them, so a single reverse
// sweep is a valid topological order.

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "kla/tensor.hpp"

namespace kla::ad {

class Tape;

/// Handle to a tape node.
struct Var {
  int id = -1;
  [[nodiscard]] bool valid() const { return id >= 0; }
};

/// Called during the reverse sweep with the node's accumulated gradient.
using BackwardFn = std::function<void(Tape& tape, const Tensor& grad_out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (parameter or probe).
  Var leaf(Tensor value);
  /// Non-differentiable input.
  Var constant(Tensor value);
  /// Appends a computed node. `backward` runs only if some input needs a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  [[nodiscard]] const Tensor& value(Var v) const;
  [[nodiscard]] const Shape& shape(Var v) const { return value(v).shape; }
  [[nodiscard]] bool requires_grad(Var v) const;

  /// Gradient of a node after backward(); zeros if nothing reached it.
  [[nodiscard]] Tensor grad(Var v) const;

  /// Adds `g` into the gradient buffer of `v` (no-op for constants).
  void accumulate(Var v, const Tensor& g);
  /// Mutable gradient buffer of `v`, allocated on first use. Only valid for
  /// nodes that require a gradient.
  Tensor& grad_buffer(Var v);

  /// Reverse sweep from a scalar node. Throws std::invalid_argument for a
  /// non-scalar loss.
  void backward(Var loss);

  /// When disabled, record() drops backward closures (evaluation mode).
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  [[nodiscard]] bool grad_enabled() const { return grad_enabled_; }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

}  // namespace kla::ad
