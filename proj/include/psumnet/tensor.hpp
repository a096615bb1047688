#pragma once

// Dense row-major tensor with reverse-mode gradient tracking.
//
// A Tensor is a shared handle: copies alias the same buffer and graph node.
// Ops record a backward closure on their output when grad mode is enabled and
// at least one input requires grad; `backward()` on a one-element tensor walks
// the recorded graph in reverse topological order.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace psumnet {

class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::int64_t> dims);
  explicit Shape(std::vector<std::int64_t> dims);

  std::size_t rank() const { return dims_.size(); }
  std::int64_t operator[](std::size_t axis) const { return dims_[axis]; }
  std::int64_t numel() const;
  const std::vector<std::int64_t>& dims() const { return dims_; }
  std::string str() const;

  bool operator==(const Shape& other) const = default;

 private:
  std::vector<std::int64_t> dims_;
};

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool enabled);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
using BackwardFn = std::function<void(std::span<const T> grad_out)>;

namespace detail {

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  BackwardFn<T> backward;
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;

  /// An undefined tensor; most accessors require `defined()`.
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t axis) const { return impl_->shape[axis]; }
  std::size_t rank() const { return impl_->shape.rank(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  std::span<T> data() & { return impl_->data; }
  std::span<const T> data() const& { return impl_->data; }
  /// A span into a temporary would dangle once the temporary is destroyed.
  std::span<const T> data() const&& = delete;
  T item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient buffer; empty until something has been accumulated.
  std::span<const T> grad() const { return impl_->grad; }
  /// Gradient buffer, zero-allocated on first use. Const because a Tensor is
  /// a handle: backward closures hold const copies of their inputs.
  std::span<T> mutable_grad() const;
  void zero_grad();

  /// Reverse pass from a one-element tensor with seed gradient 1.
  void backward();

  /// Same values, no graph, requires_grad = false. Shares nothing.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  /// Identity of the underlying buffer.
  const void* id() const { return impl_.get(); }

  /// Registers `fn` as this tensor's backward when grad mode is on and an
  /// input requires grad. Used by op implementations.
  void attach_backward(std::initializer_list<Tensor> inputs, BackwardFn<T> fn);
  void attach_backward(const std::vector<Tensor>& inputs, BackwardFn<T> fn);

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

/// True when any input would make an op's output require grad.
template <typename T>
bool needs_grad(std::initializer_list<Tensor<T>> inputs) {
  if (!GradMode::enabled()) return false;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return true;
  }
  return false;
}

/// Throws NumericError if the tensor holds NaN or Inf.
template <typename T>
void check_finite(const Tensor<T>& t, const char* op);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace psumnet
