#pragma once

#include <cstddef>
#include <concepts>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seam/errors.hpp"

namespace seam {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

/// Dense row-major double tensor with an optional link into a reverse-mode graph.
///
/// Copies are shallow: two Tensor handles may refer to the same node. Leaves own
/// their values; results of operations own the closure that routes gradients
/// back to their inputs.
class Tensor {
 public:
  Tensor() = default;

  /// Zero-filled.
  explicit Tensor(Shape shape) : Tensor(std::move(shape), false) {}

  // Templated so that a braced value list never binds to the flag.
  template <std::same_as<bool> B>
  Tensor(Shape shape, B requires_grad)
      : node_(std::make_shared<detail::Node>()) {
    node_->value.assign(seam::numel(shape), 0.0);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (seam::numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " holds " +
                           std::to_string(seam::numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor full(Shape shape, double v) {
    std::vector<double> values(seam::numel(shape), v);
    return Tensor(std::move(shape), std::move(values));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  /// Direct write access; intended for leaves (parameters, fixtures).
  std::span<double> mutable_values() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool is_leaf() const { return node_->is_leaf(); }
  const char* op_name() const { return node_->op; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Accumulated gradient; zeros when nothing has flowed here yet.
  std::vector<double> grad() const {
    return has_grad() ? node_->grad : std::vector<double>(numel(), 0.0);
  }
  std::span<const double> grad_view() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// A new leaf holding a copy of the values and no history.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }

  /// Records an op result. Nothing is recorded when no input requires grad.
  static Tensor make_result(Shape shape, std::vector<double> values, const char* op,
                            std::vector<Tensor> inputs, std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (!needs) return out;
    out.node_->requires_grad = true;
    out.node_->op = op;
    out.node_->inputs.reserve(inputs.size());
    for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::vector<Node*> topological_order(Node* root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;  // inputs precede their consumers
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate across calls;
/// interior nodes are consumed and a second sweep through them is rejected
/// until reset_graph() is called.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1) {
    throw GraphError("backward() needs a scalar root, got shape " +
                     (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  }
  if (!root.requires_grad()) return;
  auto order = detail::topological_order(&root.node());
  for (auto* node : order) {
    if (node->consumed) {
      throw GraphError(std::string("backward() through already-consumed node '") + node->op +
                       "'; call reset_graph() first");
    }
  }
  for (auto* node : order) {
    if (!node->is_leaf()) node->grad.clear();
  }
  root.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty()) node->backward(*node);
    node->consumed = true;
  }
}

/// Re-arms every interior node reachable from root for another backward().
inline void reset_graph(const Tensor& root) {
  if (!root.defined() || !root.requires_grad()) return;
  for (auto* node : detail::topological_order(&root.node())) {
    node->consumed = false;
    if (!node->is_leaf()) node->grad.clear();
  }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " differ");
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name = "input") {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                         ", got shape " + to_string(t.shape()));
  }
}

}  // namespace seam
