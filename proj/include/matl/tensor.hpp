#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "matl/error.hpp"

namespace matl {

namespace detail {

inline std::size_t shape_numel(const std::vector<int>& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  std::size_t n = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] <= 0)
      throw DimensionError("tensor shape axis " + std::to_string(i) + " must be positive, got " +
                           std::to_string(shape[i]));
    n *= static_cast<std::size_t>(shape[i]);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename T>
struct TensorNode {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;          // allocated iff needs_grad
  bool requires_grad = false;   // leaf marker: a trainable parameter
  bool needs_grad = false;      // this node or some ancestor requires grad
};

}  // namespace detail

// Dense n-dimensional array participating in reverse-mode differentiation.
// A Tensor is a cheap shared handle; copies alias the same storage.
template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    return make(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    return make(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    if (n != values.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_str(shape));
    return make(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return make({1}, std::vector<T>{v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }

  const std::vector<int>& shape() const { return checked()->shape; }
  int rank() const { return static_cast<int>(checked()->shape.size()); }
  int dim(int axis) const { return checked()->shape.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const { return checked()->value.size(); }

  std::vector<T>& values() { return checked()->value; }
  const std::vector<T>& values() const { return checked()->value; }

  bool requires_grad() const { return checked()->requires_grad; }
  bool needs_grad() const { return checked()->needs_grad; }

  std::vector<T>& grad() {
    auto* n = checked();
    if (!n->needs_grad) throw UsageError("tensor does not carry a gradient");
    return n->grad;
  }
  const std::vector<T>& grad() const {
    const auto* n = checked();
    if (!n->needs_grad) throw UsageError("tensor does not carry a gradient");
    return n->grad;
  }

  void zero_grad() {
    auto* n = checked();
    if (n->needs_grad) std::fill(n->grad.begin(), n->grad.end(), T(0));
  }

  T item() const {
    const auto* n = checked();
    if (n->value.size() != 1) throw UsageError("item() requires a scalar tensor, shape is " + detail::shape_str(n->shape));
    return n->value[0];
  }

  bool all_finite() const {
    for (const T v : checked()->value)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  static Tensor make(std::vector<int> shape, std::vector<T> values, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    t.node_->requires_grad = requires_grad;
    t.node_->needs_grad = requires_grad;
    if (requires_grad) t.node_->grad.assign(t.node_->value.size(), T(0));
    return t;
  }

  Node* checked() const {
    if (!node_) throw UsageError("operation on an undefined tensor");
    return node_.get();
  }

  std::shared_ptr<Node> node_;
};

// Records one backward rule per forward operation, in execution order. Inputs
// of every recorded operation were created before it, so walking the list in
// reverse is a valid reverse topological order and visits each rule once.
template <typename T>
class Tape {
 public:
  void record(const char* name, std::function<void()> fn) {
    entries_.push_back(Entry{name, std::move(fn)});
  }

  // Seeds d(output)/d(output) = 1 and runs every recorded rule once, newest
  // first. Gradients accumulate into each participating tensor's grad buffer.
  void backward(const Tensor<T>& output) {
    if (!output.defined() || output.numel() != 1)
      throw UsageError("backward requires a scalar output tensor");
    if (!output.needs_grad()) return;  // constant graph: all gradients stay zero
    auto out = output.node();
    std::fill(out->grad.begin(), out->grad.end(), T(0));
    out->grad[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->fn();
  }

  std::size_t size() const { return entries_.size(); }

  std::size_t count(std::string_view name) const {
    std::size_t c = 0;
    for (const auto& e : entries_)
      if (name == e.name) ++c;
    return c;
  }

  void clear() { entries_.clear(); }

 private:
  struct Entry {
    const char* name;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
};

}  // namespace matl
