// SPDX-License-Identifier: Apache-2.0
#include "fopa/tensor.hpp"

#include <cassert>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "fopa/error.hpp"

namespace fopa {

std::size_t numel(const Shape &shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double> &detail::Node::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

std::shared_ptr<detail::Node> new_leaf(Shape shape, std::vector<double> values,
                                       bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

const detail::Node &checked(const std::shared_ptr<detail::Node> &node) {
  if (!node) throw ContractError("use of an undefined tensor");
  return *node;
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> values(numel(shape), 0.0);
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(numel(shape), value);
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  return Tensor(new_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape &Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape &s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::size() const { return checked(node_).data.size(); }

std::span<const double> Tensor::data() const { return checked(node_).data; }

std::span<double> Tensor::mutable_data() {
  checked(node_);
  if (!node_->is_leaf()) {
    throw ContractError(std::string("in-place write to the result of op '") +
                        node_->op + "'");
  }
  return node_->data;
}

double Tensor::item() const {
  if (size() != 1) {
    throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape &s = shape();
  if (index.size() != s.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) +
                         " does not match shape " + shape_str(s));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) {
      throw DimensionError("index " + std::to_string(i) + " out of range on axis " +
                           std::to_string(axis));
    }
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  checked(node_);
  if (!node_->is_leaf()) {
    throw ContractError("requires_grad can only be toggled on leaf tensors");
  }
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const {
  const auto &n = checked(node_);
  return !n.grad.empty() && n.grad.size() == n.data.size();
}

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  checked(node_);
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  const auto &n = checked(node_);
  return from_data(n.shape, n.data, false);
}

Tensor Tensor::clone(bool requires_grad) const {
  const auto &n = checked(node_);
  return from_data(n.shape, n.data, requires_grad);
}

const char *Tensor::op_name() const { return checked(node_).op; }

Graph Graph::trace(const Tensor &root) {
  Graph g;
  if (!root.defined()) return g;
  std::unordered_set<const detail::Node *> seen;
  // Iterative post-order DFS; inputs are emitted before their consumers.
  struct Frame {
    std::shared_ptr<detail::Node> node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.node(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Frame &top = stack.back();
    if (top.next < top.node->inputs.size()) {
      auto child = top.node->inputs[top.next++];
      if (child->requires_grad && seen.insert(child.get()).second) {
        stack.push_back({std::move(child), 0});
      }
      continue;
    }
    g.nodes_.push_back(std::move(top.node));
    stack.pop_back();
  }
  return g;
}

std::size_t Graph::op_count() const {
  std::size_t n = 0;
  for (const auto &node : nodes_) n += node->is_leaf() ? 0 : 1;
  return n;
}

void backward(const Tensor &loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " +
                        shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("loss does not depend on any tensor requiring grad");
  }
  auto &root = *loss.node();
  if (root.consumed) {
    throw ContractError(
        "backward already ran on this graph; rebuild the forward pass");
  }
  Graph graph = Graph::trace(loss);
  root.ensure_grad()[0] += 1.0;
  const auto &nodes = graph.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node &node = **it;
    if (node.is_leaf()) continue;
    if (!node.grad.empty() && node.backward_fn) node.backward_fn(node);
    node.consumed = true;
    node.backward_fn = nullptr;
    // Interior gradients are transient.
    std::vector<double>().swap(node.grad);
  }
}

void zero_grads(std::span<Tensor> tensors) {
  for (Tensor &t : tensors) {
    if (t.defined()) t.zero_grad();
  }
}

Tensor detail::make_result(const char *op, Shape shape,
                           std::vector<double> data, std::vector<Tensor> inputs,
                           std::function<void(Node &)> backward_fn) {
  assert(numel(shape) == data.size());
#ifndef NDEBUG
  bool finite_inputs = true;
  for (const Tensor &t : inputs) {
    for (double v : t.data()) finite_inputs = finite_inputs && std::isfinite(v);
  }
  if (finite_inputs) {
    for (double v : data) assert(std::isfinite(v));
  }
#endif
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  bool any_grad = false;
  for (const Tensor &t : inputs) any_grad = any_grad || t.requires_grad();
  if (any_grad) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (Tensor &t : inputs) node->inputs.push_back(t.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace fopa
