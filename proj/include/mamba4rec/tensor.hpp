#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mamba4rec/errors.hpp"

namespace m4r {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Scalar multiply-add tally. Ops add their nominal MAC count while a
// counter is active on the current thread; used for linear-cost checks.
class OpCounter {
 public:
  OpCounter() : previous_(active()) { active() = this; }
  ~OpCounter() { active() = previous_; }
  OpCounter(const OpCounter&) = delete;
  OpCounter& operator=(const OpCounter&) = delete;

  std::uint64_t macs() const { return macs_; }

  static void add(std::uint64_t n) {
    if (auto* c = active()) c->macs_ += n;
  }

 private:
  static OpCounter*& active() {
    thread_local OpCounter* current = nullptr;
    return current;
  }

  OpCounter* previous_;
  std::uint64_t macs_ = 0;
};

template <class T>
class Tensor;

namespace detail {

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  bool backward_done = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void()> backward_fn;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T{0});
    return grad;
  }
};

}  // namespace detail

// Dense row-major array with an optional gradient slot. Copies share
// storage (handle semantics); use clone() for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using Node = detail::TensorNode<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive");
    }
    if (numel(shape) != values.size()) {
      throw DimensionError("tensor data length " +
                           std::to_string(values.size()) +
                           " does not match shape " + to_string(shape));
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  // Extent of axis i; negative i counts from the end.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(rank());
    const int k = i < 0 ? r + i : i;
    if (k < 0 || k >= r) throw DimensionError("axis out of range");
    return node_->shape[static_cast<std::size_t>(k)];
  }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (size() != 1) throw ContractError("item() on non-scalar tensor");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<T> grad() { return node_->ensure_grad(); }
  std::span<const T> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), T{0}); }

  Tensor clone() const {
    return from(node_->shape, node_->data, node_->requires_grad);
  }

  // Same storage viewed with a new shape of equal element count. The view
  // participates in autodiff as an identity op.
  Tensor reshape(Shape shape) const;

  const char* op() const { return node_->op; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  Tensor(Shape shape, bool requires_grad) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive");
    }
    node_ = std::make_shared<Node>();
    node_->data.assign(numel(shape), T{0});
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  std::shared_ptr<Node> node_;
};

template <class T>
void ensure_finite(std::span<const T> values, const char* what) {
  for (const T v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + what);
    }
  }
}

namespace detail {

// Creates the output node of an op. Parents and the backward closure are
// attached only when some input requires a gradient, so inference builds
// no graph.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> data, const char* op,
                      std::initializer_list<Tensor<T>> inputs) {
  ensure_finite<T>(data, op);
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data));
  out.node()->op = op;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (any) {
    out.set_requires_grad(true);
    for (const auto& in : inputs) {
      if (in.defined()) out.node()->parents.push_back(in.node_ptr());
    }
  }
  return out;
}

template <class T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

// Installs the backward closure on `out` if it is part of a graph.
template <class T, class F>
void on_backward(Tensor<T>& out, F&& fn) {
  if (out.requires_grad()) out.node()->backward_fn = std::forward<F>(fn);
}

}  // namespace detail

template <class T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (numel(shape) != size()) {
    throw DimensionError("reshape " + to_string(node_->shape) + " -> " +
                         to_string(shape));
  }
  Tensor out = detail::make_result<T>(std::move(shape), node_->data, "reshape",
                                      {*this});
  if (out.requires_grad()) {
    Node* o = out.node();
    Node* in = node_.get();
    out.node()->backward_fn = [o, in] {
      auto& g = in->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o->grad[i];
    };
  }
  return out;
}

// Topologically ordered record of the ops that produced a scalar loss.
// backward() visits every node once, in reverse order.
template <class T>
class Graph {
 public:
  explicit Graph(Tensor<T> loss) : loss_(std::move(loss)) {
    if (!loss_.defined() || loss_.size() != 1) {
      throw ContractError("backward requires a scalar loss");
    }
    std::unordered_set<detail::TensorNode<T>*> seen;
    // Iterative post-order DFS; recursion depth would follow the op chain.
    std::vector<std::pair<detail::TensorNode<T>*, std::size_t>> stack;
    stack.emplace_back(loss_.node(), 0);
    seen.insert(loss_.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        auto* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }

  // Bytes held by recorded values (not gradients); a proxy for the
  // activation memory a training step keeps alive.
  std::size_t value_bytes() const {
    std::size_t n = 0;
    for (auto* node : order_) n += node->data.size() * sizeof(T);
    return n;
  }

  // Operation names in forward (topological) order.
  std::vector<std::string> ops() const {
    std::vector<std::string> names;
    for (auto* n : order_) names.emplace_back(n->op);
    return names;
  }

  void backward() {
    auto* root = loss_.node();
    if (root->backward_done) {
      throw ContractError("backward called twice without reset");
    }
    if (!root->requires_grad) {
      throw ContractError("loss does not depend on any trainable tensor");
    }
    for (auto* n : order_) {
      if (n != root) n->ensure_grad();
    }
    root->ensure_grad();
    root->grad[0] += T{1};
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if ((*it)->backward_fn) (*it)->backward_fn();
    }
    root->backward_done = true;
  }

  // Clears the gradients of every recorded node so backward may run again.
  void reset() {
    for (auto* n : order_) {
      if (!n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T{0});
      n->backward_done = false;
    }
  }

 private:
  Tensor<T> loss_;
  std::vector<detail::TensorNode<T>*> order_;
};

template <class T>
void backward(const Tensor<T>& loss) {
  Graph<T>(loss).backward();
}

}  // namespace m4r
