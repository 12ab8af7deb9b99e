#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "evq/memory.hpp"

namespace evq {

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NumericError : std::domain_error {
  using std::domain_error::domain_error;
};
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
using Buffer = std::vector<T, TrackingAllocator<T>>;

/// Global op counters used by the cost benchmarks.
struct OpCounters {
  std::uint64_t matmul_macs = 0;
  /// One unit per query-key score computed, summed over heads.
  std::uint64_t attention_scores = 0;
  std::uint64_t attention_macs = 0;

  static OpCounters& get() {
    static OpCounters c;
    return c;
  }
  static void reset() { get() = OpCounters{}; }
};

/// While alive, ops executed on this thread record no graph.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }

 private:
  bool prev_;
};

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Buffer<T>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor handle with reverse-mode gradient support.
///
/// Copies share the underlying node.  Values are immutable once an op has
/// consumed them; parameters are the exception and are updated in place by
/// optimizers between steps.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node<T>>();
    n->value.assign(shape_size(shape), T(0));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.node_->value.begin(), t.node_->value.end(), v);
    return t;
  }

  template <typename Range>
  static Tensor from(Shape shape, const Range& values, bool requires_grad = false) {
    auto n = std::make_shared<detail::Node<T>>();
    n->value.assign(std::begin(values), std::end(values));
    if (n->value.size() != shape_size(shape))
      throw DimensionError("Tensor::from: " + std::to_string(n->value.size()) + " values for shape " +
                           shape_str(shape));
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::initializer_list<T> values, bool requires_grad = false) {
    return from<std::initializer_list<T>>(std::move(shape), values, requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return full({1}, v, requires_grad); }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return ndim() >= 2 ? node_->shape[1] : 1; }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return {node_->value.data(), node_->value.size()}; }
  /// Write access for leaves (parameters, inputs); never for op outputs.
  std::span<T> mutable_data() { return {node_->value.data(), node_->value.size()}; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return {node_->grad.data(), node_->grad.size()}; }
  std::span<T> mutable_grad() {
    auto& g = node_->ensure_grad();
    return {g.data(), g.size()};
  }
  void zero_grad() { node_->grad.clear(); }

  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Fresh leaf holding a copy of the values, cut from the graph.
  Tensor detach() const { return from(shape(), node_->value, false); }

  /// Leaf with the same values but marked for gradients.
  Tensor as_leaf(bool requires_grad = true) const { return from(shape(), node_->value, requires_grad); }

  /// Reverse-mode sweep from this scalar.  Seeds d(self)/d(self) = 1.
  void backward() const {
    if (size() != 1) throw DimensionError("backward() requires a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad) return;
    std::vector<detail::Node<T>*> order;
    topo_sort(node_.get(), order);
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node<T>& n = **it;
      if (n.backward_fn && !n.grad.empty()) n.backward_fn(n);
    }
  }

  const NodePtr& node() const { return node_; }

  /// Builds an op output.  `fn` receives the output node during backward and
  /// must accumulate into the parents' gradients.
  static Tensor make_result(Shape shape, Buffer<T> value, std::vector<Tensor> inputs,
                            std::function<void(detail::Node<T>&)> fn) {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (n->value.size() != shape_size(n->shape)) throw DimensionError("make_result: size/shape mismatch");
    bool any = false;
    if (NoGradGuard::enabled()) {
      for (const auto& t : inputs) any = any || t.requires_grad();
    }
    if (any) {
      n->requires_grad = true;
      n->parents.reserve(inputs.size());
      for (const auto& t : inputs) n->parents.push_back(t.node_);
      n->backward_fn = std::move(fn);
    }
    return Tensor(std::move(n));
  }

 private:
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static void topo_sort(detail::Node<T>* root, std::vector<detail::Node<T>*>& order) {
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
      auto& [n, i] = stack.back();
      if (i < n->parents.size()) {
        detail::Node<T>* p = n->parents[i++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  NodePtr node_;
};

/// Accumulate into a parent's gradient if it participates in the graph.
template <typename T>
inline Buffer<T>* grad_of(detail::Node<T>& out, std::size_t parent) {
  auto& p = *out.parents[parent];
  if (!p.requires_grad) return nullptr;
  return &p.ensure_grad();
}

}  // namespace evq
