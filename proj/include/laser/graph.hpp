// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "laser/errors.hpp"
#include "laser/tensor.hpp"

namespace laser {

template <Real T>
class Graph;

/// Handle to a node recorded on a Graph.
template <Real T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return graph->requires_grad(id); }
};

/// Gradients of a scalar loss keyed by leaf node id.
template <Real T>
class GradientMap {
 public:
  void emplace(std::size_t id, Tensor<T> grad) { grads_.insert_or_assign(id, std::move(grad)); }

  const Tensor<T>& at(std::size_t id) const {
    auto it = grads_.find(id);
    if (it == grads_.end()) throw ContractError("no gradient recorded for node " + std::to_string(id));
    return it->second;
  }
  const Tensor<T>& at(const Var<T>& v) const { return at(v.id); }
  bool contains(std::size_t id) const { return grads_.contains(id); }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<std::size_t, Tensor<T>> grads_;
};

/// View handed to a node's backward rule: the saved forward values and the
/// gradient accumulators of the node's inputs.
template <Real T>
class BackwardContext {
 public:
  BackwardContext(const Graph<T>& g, std::size_t self, std::vector<std::optional<Tensor<T>>>& grads)
      : graph_(g), self_(self), grads_(grads) {}

  const Tensor<T>& in(std::size_t k) const { return graph_.value(graph_.inputs(self_)[k]); }
  const Tensor<T>& out() const { return graph_.value(self_); }

  /// Accumulator for input k, zero-initialised on first use; nullptr when
  /// that input does not need a gradient.
  Tensor<T>* grad(std::size_t k) {
    const std::size_t id = graph_.inputs(self_)[k];
    if (!graph_.requires_grad(id)) return nullptr;
    auto& slot = grads_[id];
    if (!slot) slot.emplace(graph_.value(id).shape());
    return &*slot;
  }

 private:
  const Graph<T>& graph_;
  std::size_t self_;
  std::vector<std::optional<Tensor<T>>>& grads_;
};

/// Append-only tape of differentiable operations.
///
/// Nodes are stored in creation order, which is a topological order since an
/// op can only consume existing handles. backward() sweeps the tape once in
/// reverse. A Graph is not thread-safe; build one per thread.
template <Real T>
class Graph {
 public:
  using BackwardFn = std::function<void(const Tensor<T>& grad_out, BackwardContext<T>& ctx)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable input. Parameters are reported by backward().
  Var<T> leaf(Tensor<T> value, std::string name = {}) {
    Node n;
    n.op = "leaf";
    n.value = std::move(value);
    n.requires_grad = true;
    n.is_leaf = true;
    n.name = std::move(name);
    return push(std::move(n));
  }

  /// Input that never receives a gradient.
  Var<T> constant(Tensor<T> value) {
    Node n;
    n.op = "constant";
    n.value = std::move(value);
    return push(std::move(n));
  }

  /// Records the result of an op. When no input requires a gradient the
  /// backward rule is dropped and the node behaves like a constant.
  Var<T> record(const char* op, Tensor<T> value, std::vector<std::size_t> inputs, BackwardFn fn) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    for (std::size_t id : inputs) {
      if (id >= nodes_.size()) throw ContractError("op input refers to a node not on this graph");
      n.requires_grad = n.requires_grad || nodes_[id].requires_grad;
    }
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(fn);
    return push(std::move(n));
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool is_leaf(std::size_t id) const { return nodes_.at(id).is_leaf; }
  const char* op(std::size_t id) const { return nodes_.at(id).op; }
  const std::string& name(std::size_t id) const { return nodes_.at(id).name; }
  std::size_t size() const { return nodes_.size(); }

  /// Gradient of a scalar (1 x 1) loss with respect to every leaf.
  GradientMap<T> backward(const Var<T>& loss) const {
    check_owner(loss);
    if (value(loss.id).size() != 1) {
      throw ContractError("backward() requires a scalar loss, got shape " +
                          shape_str(value(loss.id).shape()));
    }
    Tensor<T> seed(value(loss.id).shape());
    seed[0] = T(1);
    return backward_from(loss, std::move(seed));
  }

  /// Vector-Jacobian product: propagates the cotangent `seed` from `out`.
  GradientMap<T> backward_from(const Var<T>& out, Tensor<T> seed) const {
    check_owner(out);
    if (seed.shape() != value(out.id).shape()) {
      throw DimensionError("cotangent shape " + shape_str(seed.shape()) + " does not match output " +
                           shape_str(value(out.id).shape()));
    }
    std::vector<std::optional<Tensor<T>>> grads(out.id + 1);
    grads[out.id] = std::move(seed);
    for (std::size_t i = out.id + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (!grads[i] || !n.backward) continue;
      BackwardContext<T> ctx(*this, i, grads);
      n.backward(*grads[i], ctx);
    }
    GradientMap<T> result;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].is_leaf) continue;
      if (i < grads.size() && grads[i]) {
        result.emplace(i, std::move(*grads[i]));
      } else {
        result.emplace(i, Tensor<T>(nodes_[i].value.shape()));
      }
    }
    return result;
  }

 private:
  struct Node {
    const char* op = "";
    Tensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  void check_owner(const Var<T>& v) const {
    if (v.graph != this || v.id >= nodes_.size()) throw ContractError("variable belongs to another graph");
  }

  std::vector<Node> nodes_;
};

}  // namespace laser
