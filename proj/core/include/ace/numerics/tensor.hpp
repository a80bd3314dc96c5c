#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ace/error.hpp"

namespace ace::num {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

namespace detail {

template <typename Real>
struct Node {
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;

  void accumulate(std::size_t i, Real g) {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    grad[i] += g;
  }
  std::span<Real> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

// Dense row-major array. Copies share the underlying node, so a Tensor is a
// cheap handle; values are fixed after construction except through
// mutable_values(), which is reserved for optimizer updates between steps.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;
  using NodePtr = std::shared_ptr<detail::Node<Real>>;

  Tensor() : Tensor(Shape{1}, std::vector<Real>{Real(0)}) {}

  Tensor(Shape shape, std::vector<Real> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<Real>>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
    }
    if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
    if (element_count(shape) != values.size()) {
      throw DimensionError("shape " + to_string(shape) + " needs " + std::to_string(element_count(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), Real(0), requires_grad); }
  static Tensor full(Shape shape, Real v, bool requires_grad = false) {
    const std::size_t n = element_count(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, v), requires_grad);
  }
  static Tensor scalar(Real v, bool requires_grad = false) { return Tensor(Shape{1}, {v}, requires_grad); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t extent(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }
  bool is_scalar() const { return size() == 1; }

  std::span<const Real> values() const { return node_->value; }
  std::span<Real> mutable_values() { return node_->value; }
  Real operator[](std::size_t i) const { return node_->value[i]; }
  Real at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.back() + c]; }
  Real item() const {
    if (!is_scalar()) throw DimensionError("item() on non-scalar tensor of shape " + to_string(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Same values, fresh node, outside any recorded graph.
  Tensor detach() const { return Tensor(shape(), node_->value, false); }
  // Deep copy that keeps the requires_grad flag (a new leaf).
  Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

  const NodePtr& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  NodePtr node_;
};

// Ordered record of primitive ops for one forward pass. Ops append entries
// while a Recording guard for the tape is alive on the current thread; the
// append order is a topological order of the graph, so backward() is a plain
// reverse sweep that visits every entry once.
template <typename Real>
class Tape {
 public:
  using NodePtr = typename Tensor<Real>::NodePtr;
  using BackwardFn = std::function<void()>;

  class Recording {
   public:
    explicit Recording(Tape& tape) : previous_(active_) { active_ = &tape; }
    ~Recording() { active_ = previous_; }
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

   private:
    Tape* previous_;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape() {
    if (active_ == this) active_ = nullptr;
  }

  [[nodiscard]] Recording record() { return Recording(*this); }

  static Tape* active() { return active_; }

  // Records an op whose output depends on inputs; `fn` reads output->grad and
  // accumulates into the inputs that require gradients.
  void push(NodePtr output, std::vector<NodePtr> inputs, BackwardFn fn) {
    entries_.push_back(Entry{std::move(output), std::move(inputs), std::move(fn)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Gradients of
  // leaves accumulate; the tape is cleared afterwards.
  void backward(const Tensor<Real>& loss) {
    if (!loss.is_scalar()) {
      throw DimensionError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    std::size_t last = entries_.size();
    while (last > 0 && entries_[last - 1].output != loss.node()) --last;
    if (last == 0) throw DomainError("backward(): loss was not recorded on this tape");
    loss.node()->accumulate(0, Real(1));
    for (std::size_t i = last; i-- > 0;) {
      Entry& e = entries_[i];
      if (!e.output->grad.empty()) e.fn();
    }
    // Intermediate gradients belong to the consumed graph, leaves keep theirs.
    for (Entry& e : entries_) e.output->grad.clear();
    clear();
  }

 private:
  struct Entry {
    NodePtr output;
    std::vector<NodePtr> inputs;
    BackwardFn fn;
  };

  std::vector<Entry> entries_;
  static thread_local Tape* active_;
};

template <typename Real>
thread_local Tape<Real>* Tape<Real>::active_ = nullptr;

using Tensor64 = Tensor<double>;
using Tensor32 = Tensor<float>;
using Tape64 = Tape<double>;
using Tape32 = Tape<float>;

}  // namespace ace::num
