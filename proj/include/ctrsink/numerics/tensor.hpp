#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ctrsink/errors.hpp"

namespace ctrsink {

// Storage for anything Eigen reads. Vectorized reductions peel unaligned
// heads, so the summation order would otherwise depend on the heap address.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

// Dense row-major matrix. Vectors are 1 x n.
template <class T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  Buffer<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T(0)) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, const std::vector<T>& values)
      : rows(r), cols(c), data(values.begin(), values.end()) {
    if (data.size() != r * c) throw ShapeError("Matrix: value count does not match shape");
  }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t size() const noexcept { return data.size(); }
  std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
  bool operator==(const Matrix&) const = default;
};

namespace detail {

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Matrix<T> value;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

// Handle onto a node of the reverse-mode graph. Copies share the node.
template <class T>
class Tensor {
 public:
  using Scalar = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : node_(std::make_shared<detail::Node<T>>()) {}
  explicit Tensor(Matrix<T> value, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    return Tensor(Matrix<T>(rows, cols), requires_grad);
  }
  static Tensor from(std::size_t rows, std::size_t cols, std::vector<T> values,
                     bool requires_grad = false) {
    return Tensor(Matrix<T>(rows, cols, std::move(values)), requires_grad);
  }
  static Tensor scalar(T v, bool requires_grad = false) { return from(1, 1, {v}, requires_grad); }

  std::size_t rows() const noexcept { return node_->value.rows; }
  std::size_t cols() const noexcept { return node_->value.cols; }
  std::size_t size() const noexcept { return node_->value.size(); }

  const Matrix<T>& value() const noexcept { return node_->value; }
  Matrix<T>& mutable_value() noexcept { return node_->value; }
  std::span<const T> data() const noexcept { return node_->value.data; }
  std::span<T> mutable_data() noexcept { return node_->value.data; }
  T operator()(std::size_t r, std::size_t c) const { return node_->value(r, c); }
  T item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar");
    return node_->value.data[0];
  }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  void set_requires_grad(bool on) noexcept { node_->requires_grad = on; }

  bool has_grad() const noexcept { return !node_->grad.empty(); }
  // Zero-filled view when no gradient has reached this tensor.
  std::span<const T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(size(), T(0));
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  // Same values, no history.
  Tensor detach() const { return Tensor(node_->value, false); }

  bool is_leaf() const noexcept { return node_->parents.empty(); }
  const NodePtr& node() const noexcept { return node_; }

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  NodePtr node_;
};

namespace detail {

// Wraps a freshly computed value into a tensor, recording parents and the
// backward rule only when some parent needs a gradient.
template <class T>
Tensor<T> make_result(Matrix<T> value, std::initializer_list<Tensor<T>> parents,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(value));
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

template <class T>
Tensor<T> make_result(Matrix<T> value, const std::vector<Tensor<T>>& parents,
                      std::function<void(Node<T>&)> backward) {
  Tensor<T> out(std::move(value));
  if (!grad_mode()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

// Gradient sink of parent i, or an empty span when it needs none.
template <class T>
std::span<T> parent_grad(Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  if (!p.requires_grad) return {};
  return p.grad_buffer();
}

}  // namespace detail

// Accumulates d(loss)/d(x) into every tensor reachable from `loss` that
// requires a gradient. Gradients add onto whatever is already stored.
template <class T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1) throw ShapeError("backward: loss must be a scalar");
  using NodeT = detail::Node<T>;
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (!node->backward || node->grad.empty()) continue;
    node->backward(*node);
    // Interior gradients are transient: a later backward() through a shared
    // subgraph must not see them again. Only leaves accumulate.
    Buffer<T>().swap(node->grad);
  }
}

}  // namespace ctrsink
