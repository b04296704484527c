#pragma once

// Dense 64-bit tensors with a reverse-mode differentiation graph.
//
// A Tensor is a cheap handle onto a shared node. Nodes produced by an op
// while any input requires a gradient record their inputs and a backward
// closure; backward() walks that graph once and then releases it.

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace dosediff {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something is accumulated
  bool requires_grad = false;
  bool is_leaf = true;
  bool consumed = false;
  std::string op;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("tensor: shape " + shape_str(shape) + " needs " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  const std::vector<double>& values() const { return node_->data; }
  double operator[](std::size_t i) const { return node_->data[i]; }

  /// In-place access for leaves owned by an optimizer or a finite-difference probe.
  std::span<double> mutable_data() {
    if (!node_->is_leaf) throw GraphError("mutable_data: tensor is not a leaf");
    return node_->data;
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Copy of the values with no graph attached.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  std::shared_ptr<detail::Node> node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Builds an op result; records the graph only when an input needs gradients.
inline Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!grad_enabled) return out;
  bool track = false;
  for (const Tensor* in : inputs) {
    if (in && in->defined() && in->requires_grad()) track = true;
  }
  if (!track) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  node->op = std::move(op);
  for (const Tensor* in : inputs) {
    node->inputs.push_back(in && in->defined() ? in->node() : nullptr);
  }
  node->backward_fn = std::move(backward_fn);
  return out;
}

inline Tensor make_result(std::string op, Shape shape, std::vector<double> data,
                          const std::vector<Tensor>& inputs,
                          std::function<void(Node&)> backward_fn) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!grad_enabled) return out;
  bool track = false;
  for (const Tensor& in : inputs) track = track || in.requires_grad();
  if (!track) return out;
  auto node = out.node();
  node->requires_grad = true;
  node->is_leaf = false;
  node->op = std::move(op);
  for (const Tensor& in : inputs) node->inputs.push_back(in.node());
  node->backward_fn = std::move(backward_fn);
  return out;
}

/// Gradient buffer of input i, or nullptr when that input takes no gradient.
inline std::vector<double>* input_grad(Node& self, std::size_t i) {
  auto& in = self.inputs[i];
  if (!in || !in->requires_grad) return nullptr;
  return &in->ensure_grad();
}

}  // namespace detail

/// Runs reverse-mode differentiation from a scalar root. Leaves accumulate
/// d(root)/d(leaf) into their grad buffers. The graph is released afterwards,
/// so a second backward over the same nodes throws GraphError.
inline void backward(const Tensor& root) {
  if (!root.defined()) throw GraphError("backward: undefined root");
  if (root.numel() != 1) {
    throw ShapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  auto root_node = root.node();
  if (root_node->consumed) throw GraphError("backward: graph already consumed");
  if (!root_node->requires_grad) throw GraphError("backward: root is not graph-tracked");

  // Iterative post-order DFS gives a topological order.
  std::vector<detail::Node*> order;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  std::unordered_set<detail::Node*> marks;
  stack.emplace_back(root_node.get(), 0);
  marks.insert(root_node.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !marks.count(child)) {
        if (child->consumed) throw GraphError("backward: graph already consumed");
        marks.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root_node->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (!node->is_leaf && node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
  for (detail::Node* node : order) {
    if (node->is_leaf) continue;
    node->inputs.clear();
    node->backward_fn = nullptr;
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
}

}  // namespace dosediff
