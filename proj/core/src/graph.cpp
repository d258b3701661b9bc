#include "hardaware/graph.hpp"

#include <limits>

#include "hardaware/errors.hpp"

namespace hardaware {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)), value(std::move(value_)), grad(value.shape(), 0.0) {}

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape(), 0.0);
  } else {
    grad.fill(0.0);
  }
}

Var Graph::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw std::length_error("graph node limit exceeded");
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  return push(std::move(n));
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.op = "input";
  n.requires_grad = requires_grad && record_;
  return push(std::move(n));
}

Var Graph::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.op = "param:" + p.name;
  n.requires_grad = record_;
  n.param = &p;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id());
  return v;
}

Var Graph::record(std::string_view op, Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.op = std::string(op);
  n.parents.reserve(parents.size());
  bool any = false;
  for (const Var& p : parents) {
    if (&p.graph() != this) throw std::logic_error("operation mixes nodes of different graphs");
    n.parents.push_back(p.id());
    any = any || nodes_[p.id()].requires_grad;
  }
  if (record_ && any) {
    n.requires_grad = true;
    n.backward = std::move(backward);
  }
  return push(std::move(n));
}

Tensor* Graph::grad_sink(std::uint32_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return &n.grad;
}

void Graph::backward(Var loss) {
  if (&loss.graph() != this) throw std::logic_error("backward on a foreign node");
  if (backward_done_) throw std::logic_error("backward may run once per graph");
  if (loss.value().size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  backward_done_ = true;
  Node& root = nodes_[loss.id()];
  if (!root.requires_grad) return;
  root.grad = Tensor(root.value.shape(), 1.0);

  for (std::int64_t id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    if (n.param->grad.shape() != n.param->value.shape()) n.param->zero_grad();
    n.param->grad.add_(n.grad);
  }
}

}  // namespace hardaware
