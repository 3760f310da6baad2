#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cmtboost/errors.hpp"

namespace cmtboost {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Dense row-major tensor. Copies are handles onto shared storage; ops treat
/// tensors as immutable once written, so sharing is safe. The scalar type is
/// float for training/eval and double for gradient checking.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : impl_(std::make_shared<Impl>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(shape_numel(impl_->shape), fill);
  }

  static Tensor from_data(Shape shape, std::vector<T> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(T v) { return from_data({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t numel() const { return impl_->data.size(); }

  std::vector<T>& data() { return impl_->data; }
  const std::vector<T>& data() const { return impl_->data; }

  T item() const {
    if (numel() != 1) throw DimensionError("item() on tensor with " + std::to_string(numel()) + " elements");
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  /// Gradient buffer, allocated as zeros on first access.
  std::vector<T>& grad() {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), T(0));
    return impl_->grad;
  }
  bool has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }
  void zero_grad() {
    if (impl_) impl_->grad.assign(impl_->data.size(), T(0));
  }

  /// Deep copy of values only (no grad, no graph).
  Tensor clone() const {
    Tensor t = from_data(shape(), data());
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(data()[i]);
    return Tensor<U>::from_data(shape(), std::move(out));
  }

  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }
  const void* storage_id() const { return impl_.get(); }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

/// Ordered record of one forward pass. Ops append nodes in execution order,
/// which is already topological; backward() replays the list in reverse and
/// visits each node exactly once, then clears itself.
template <typename T>
class GradientTape {
 public:
  struct Node {
    const char* op;
    std::vector<Tensor<T>> parents;
    Tensor<T> output;
    std::function<void()> backward;
  };

  /// Installs the tape as the recording target on this thread.
  class Scope {
   public:
    explicit Scope(GradientTape& tape) : prev_(active_) { active_ = &tape; }
    ~Scope() { active_ = prev_; }
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    GradientTape* prev_;
  };

  static GradientTape* active() { return active_; }

  void record(const char* op, std::vector<Tensor<T>> parents, Tensor<T> output,
              std::function<void()> backward) {
    nodes_.push_back(Node{op, std::move(parents), std::move(output), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }

  /// Seeds d(loss)/d(loss) = 1 and propagates through the recorded nodes in
  /// reverse. Consumes the tape.
  void backward(Tensor<T>& loss) {
    if (nodes_.empty()) throw ParameterError("backward() without a recorded tape");
    if (loss.numel() != 1) {
      throw DimensionError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->backward) it->backward();
    }
    nodes_.clear();
  }

  void reset() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
  static thread_local GradientTape* active_;
};

template <typename T>
thread_local GradientTape<T>* GradientTape<T>::active_ = nullptr;

/// Named trainable tensor. The tensor's grad buffer is the accumulator; the
/// optimizer zeroes it between steps.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;

  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)) {
    value.set_requires_grad(true);
  }
};

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class GradientTape<float>;
extern template class GradientTape<double>;

}  // namespace cmtboost
