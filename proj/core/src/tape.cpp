#include "kla/tape.hpp"

#include <stdexcept>

namespace kla::ad {

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var v : inputs) {
    if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
      throw std::invalid_argument("Tape::record: input does not precede node");
    }
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  n.requires_grad = n.requires_grad && grad_enabled_;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw std::out_of_range("Tape: invalid variable");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.data.empty()) return Tensor(n.value.shape);
  return n.grad;
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_.at(v.id);
  if (n.grad.data.empty()) n.grad = Tensor(n.value.shape);
  return n.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return;
  if (g.size() != n.value.size()) {
    throw std::invalid_argument("Tape::accumulate: gradient shape " + shape_string(g.shape) + " vs value " +
                                shape_string(n.value.shape));
  }
  Tensor& buf = grad_buffer(v);
  for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i];
}

void Tape::backward(Var loss) {
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " + shape_string(root.value.shape));
  }
  grad_buffer(loss).data[0] += 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backward || n.grad.data.empty()) continue;
    // The closure may allocate input gradient buffers, which never
    // reallocates nodes_, so holding a reference to n.grad is safe.
    n.backward(*this, n.grad);
  }
}

}  // namespace kla::ad
