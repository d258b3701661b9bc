#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "hardaware/tensor.hpp"

namespace hardaware {

/// A trainable tensor that outlives individual graphs. Graphs bind a
/// parameter as a leaf; backward() accumulates into `grad`.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad();
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  Graph& graph() const { return *graph_; }
  std::uint32_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  /// Gradient after backward(); empty if the node received none.
  const Tensor& grad() const;
  bool requires_grad() const;
  bool valid() const { return graph_ != nullptr; }

 private:
  friend class Graph;
  Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Append-only tape for reverse-mode differentiation. Node ids are
/// insertion indices, so insertion order is a topological order and
/// backward() walks the tape in reverse exactly once.
///
/// A graph built with record=false still computes forward values but keeps
/// no backward closures; use it for evaluation and sample generation.
class Graph {
 public:
  /// Called during backward with the node's accumulated output gradient.
  using BackwardFn = std::function<void(Graph&, const Tensor& out_grad)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  /// Leaf node. With requires_grad the node's gradient is kept after backward().
  Var input(Tensor value, bool requires_grad = false);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter& p);

  /// Appends an operation result. The backward closure is dropped when the
  /// graph is not recording or when no parent requires a gradient.
  Var record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1, runs every closure in reverse insertion
  /// order, then adds leaf gradients into their bound parameters.
  void backward(Var loss);

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
  const Tensor& grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::string_view op(std::uint32_t id) const { return nodes_[id].op; }
  const std::vector<std::uint32_t>& parents(std::uint32_t id) const { return nodes_[id].parents; }

  /// Zero-initialized gradient buffer of node `id`, or nullptr when the node
  /// does not take part in differentiation. For use inside backward closures.
  Tensor* grad_sink(std::uint32_t id);
  Tensor* grad_sink(Var v) { return grad_sink(v.id()); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::uint32_t> parents;
    std::string op;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Node node);

  bool record_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> param_nodes_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline const Tensor& Var::grad() const { return graph_->grad(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

}  // namespace hardaware
