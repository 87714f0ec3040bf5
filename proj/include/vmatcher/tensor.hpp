#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vmatcher/error.hpp"

namespace vmatcher {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense row-major array with shared ownership of its storage.
///
/// Copies of a BasicTensor alias the same node, which is how layers and the
/// parameter registry refer to one weight. Values are treated as immutable
/// once an operation has consumed them; only gradient buffers and optimizer
/// updates write in place.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    node_->data.assign(numel(shape), T(0));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + to_string(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }

  static BasicTensor full(Shape shape, T value) {
    BasicTensor t(std::move(shape));
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static BasicTensor scalar(T value) { return BasicTensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const T* ptr() const { return node_->data.data(); }
  T operator[](std::size_t i) const { return node_->data[i]; }

  T item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  BasicTensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy without gradient participation.
  BasicTensor detach() const { return BasicTensor(shape(), node_->data); }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return BasicTensor<U>(shape(), std::move(out), requires_grad());
  }

  bool same_node(const BasicTensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

using Tensor = BasicTensor<float>;

/// Ordered record of executed differentiable operations.
///
/// Operations record a closure that maps the output gradient onto input
/// gradients. run_backward() replays the closures in reverse execution order
/// exactly once and then discards them.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void(const std::vector<T>& out_grad)>;

  struct Entry {
    const char* op;
    std::shared_ptr<TensorNode<T>> output;
    Backward backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(const char* op, std::shared_ptr<TensorNode<T>> output, Backward fn) {
    entries_.push_back(Entry{op, std::move(output), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }

  void run_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      auto& out = *it->output;
      if (out.grad.empty()) continue;  // nothing downstream depends on this value
      if (!fault_op().empty() && fault_op() == it->op) {
        for (auto& g : out.grad) g *= T(1.5);
      }
      it->backward(out.grad);
    }
    entries_.clear();
  }

  void clear() { entries_.clear(); }

  static Tape*& active() {
    thread_local Tape* tape = nullptr;
    return tape;
  }

  /// Test hook: scales the upstream gradient of every entry whose op name
  /// matches, which makes finite-difference checks through that op fail.
  static std::string& fault_op() {
    thread_local std::string name;
    return name;
  }

 private:
  std::vector<Entry> entries_;
};

/// Installs a fresh tape for the current thread for the lifetime of the scope.
template <typename T>
class GradScope {
 public:
  GradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = &tape_; }
  ~GradScope() { Tape<T>::active() = previous_; }
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

  Tape<T>& tape() { return tape_; }

 private:
  Tape<T> tape_;
  Tape<T>* previous_;
};

/// Disables recording for the current thread (inference, finite differences).
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates gradients to every leaf that
/// requires them. Leaf gradients accumulate across calls until zero_grad().
template <typename T>
void backward(const BasicTensor<T>& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  auto* tape = Tape<T>::active();
  if (tape == nullptr) throw ContractError("backward() called without an active tape");
  if (!loss.requires_grad()) throw ContractError("loss is not connected to any recorded operation");
  loss.node()->grad_buffer()[0] += T(1);
  tape->run_backward();
}

namespace detail {

template <typename T, typename... Ts>
bool needs_grad(const BasicTensor<T>& first, const Ts&... rest) {
  if (Tape<T>::active() == nullptr) return false;
  return first.requires_grad() || (rest.requires_grad() || ...);
}

template <typename T>
void record(const char* op, const BasicTensor<T>& out, typename Tape<T>::Backward fn) {
  out.node()->requires_grad = true;
  Tape<T>::active()->record(op, out.node(), std::move(fn));
}

/// Gradient buffer of an input node, or nullptr when the input is constant.
template <typename T>
T* grad_of(const std::shared_ptr<TensorNode<T>>& node) {
  if (!node || !node->requires_grad) return nullptr;
  return node->grad_buffer().data();
}

}  // namespace detail

}  // namespace vmatcher
