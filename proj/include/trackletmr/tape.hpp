#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "trackletmr/tensor.hpp"

namespace tmr::ad {

// Reverse-mode tape. Ops append nodes; backward() walks the nodes once in
// reverse recording order and accumulates vector-Jacobian products into the
// parents' gradient buffers. A tape is single-threaded by construction;
// parallelism happens across tapes.
template <typename S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<S>& gout)>;

  int leaf(Tensor<S> value, bool requires_grad = true) {
    check_value(value, "leaf");
    nodes_.push_back(Node{std::move(value), {}, nullptr, requires_grad});
    return static_cast<int>(nodes_.size()) - 1;
  }

  int constant(Tensor<S> value) { return leaf(std::move(value), false); }

  int push(const char* op, Tensor<S> value, std::vector<int> parents, BackwardFn backward) {
    check_value(value, op);
    bool needs = false;
    for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].needs_grad;
    nodes_.push_back(Node{std::move(value), std::move(parents),
                          needs ? std::move(backward) : nullptr, needs});
    return static_cast<int>(nodes_.size()) - 1;
  }

  const Tensor<S>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  // Lets ops install a closure that may reference its own node id.
  void set_backward(int id, BackwardFn fn) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (node.needs_grad) node.backward = std::move(fn);
  }

  // Gradient of the last backward() root w.r.t. node `id`. Exactly zero for
  // nodes the root does not depend on.
  Tensor<S> grad(int id) const {
    if (static_cast<std::size_t>(id) >= grads_.size() ||
        grads_[static_cast<std::size_t>(id)].data.empty())
      return Tensor<S>::zeros(nodes_[static_cast<std::size_t>(id)].value.shape);
    return grads_[static_cast<std::size_t>(id)];
  }

  void accumulate(int id, const Tensor<S>& g) {
    auto& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad) return;
    if (g.data.size() != node.value.data.size())
      throw ShapeError("gradient size mismatch for node " + std::to_string(id));
    auto& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.data.empty()) {
      slot = g;
      return;
    }
    for (std::size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
  }

  void backward(int root) {
    const auto& root_node = nodes_[static_cast<std::size_t>(root)];
    if (root_node.value.numel() != 1)
      throw ShapeError("backward root must be scalar, got " + shape_str(root_node.value.shape));
    grads_.assign(nodes_.size(), Tensor<S>{});
    grads_[static_cast<std::size_t>(root)] = Tensor<S>::full(root_node.value.shape, S(1));
    for (int i = root; i >= 0; --i) {
      auto& node = nodes_[static_cast<std::size_t>(i)];
      if (!node.needs_grad || !node.backward) continue;
      const auto& g = grads_[static_cast<std::size_t>(i)];
      if (g.data.empty()) continue;
      node.backward(*this, g);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    std::vector<int> parents;
    BackwardFn backward;
    bool needs_grad = false;
  };

  void check_value(const Tensor<S>& value, const char* op) const {
    if (!value.all_finite())
      throw NonFiniteError(std::string("non-finite value produced by op '") + op + "'");
  }

  std::vector<Node> nodes_;
  std::vector<Tensor<S>> grads_;
};

// Lightweight handle tying a node id to its tape; ops are free functions over
// Vars so model code reads as plain expressions.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Tensor<S>& val() const { return tape->val(id); }
  Tensor<S> grad() const { return tape->grad(id); }
};

template <typename S>
Var<S> make_leaf(Tape<S>& tape, Tensor<S> value, bool requires_grad = true) {
  return Var<S>{&tape, tape.leaf(std::move(value), requires_grad)};
}

template <typename S>
Var<S> make_const(Tape<S>& tape, Tensor<S> value) {
  return Var<S>{&tape, tape.constant(std::move(value))};
}

}  // namespace tmr::ad
