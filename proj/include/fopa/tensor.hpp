// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors with a recorded reverse-mode differentiation graph.
//
// Every op that receives at least one input with requires_grad() returns a
// node that remembers its inputs and a backward closure. Ops on constant
// inputs record nothing, so inference paths carry no graph overhead.

#ifndef FOPA_TENSOR_HPP
#define FOPA_TENSOR_HPP

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fopa {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape &shape);
std::string shape_str(const Shape &shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  bool consumed = false;     // set once backward() has run through this node
  const char *op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node &)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<double> &ensure_grad();
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape &shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Mutable access is for leaves only (parameters, inputs).
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Leaf copy of the values, cut from any graph.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  const char *op_name() const;
  const std::shared_ptr<detail::Node> &node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Topologically ordered view of the ops reachable from a root tensor.
class Graph {
 public:
  static Graph trace(const Tensor &root);

  // Inputs always precede the ops that consume them.
  const std::vector<std::shared_ptr<detail::Node>> &nodes() const {
    return nodes_;
  }
  std::size_t op_count() const;

 private:
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

/// Runs reverse-mode differentiation from a scalar loss. Leaf gradients
/// accumulate across calls until zero_grads(); calling backward twice on the
/// same graph is a ContractError.
void backward(const Tensor &loss);

void zero_grads(std::span<Tensor> tensors);

namespace detail {

// Builds an op result. When no input requires grad, the backward closure is
// dropped and the result is a constant leaf.
Tensor make_result(const char *op, Shape shape, std::vector<double> data,
                   std::vector<Tensor> inputs,
                   std::function<void(Node &)> backward_fn);

}  // namespace detail

}  // namespace fopa

#endif  // FOPA_TENSOR_HPP
