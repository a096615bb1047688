#include "psumnet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "psumnet/errors.hpp"

namespace psumnet {

Shape::Shape(std::initializer_list<std::int64_t> dims) : Shape(std::vector<std::int64_t>(dims)) {}

Shape::Shape(std::vector<std::int64_t> dims) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d <= 0) throw DimensionError("shape extents must be positive, got " + str());
  }
}

std::int64_t Shape::numel() const {
  return std::accumulate(dims_.begin(), dims_.end(), std::int64_t{1}, std::multiplies<>());
}

std::string Shape::str() const {
  std::string s = "[";
  for (std::size_t i = 0; i < dims_.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims_[i]);
  }
  return s + "]";
}

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool enabled) { grad_mode_enabled = enabled; }

NoGradGuard::NoGradGuard() : previous_(GradMode::enabled()) { GradMode::set_enabled(false); }
NoGradGuard::~NoGradGuard() { GradMode::set_enabled(previous_); }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  impl_->data.assign(static_cast<std::size_t>(shape.numel()), fill);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : impl_(std::make_shared<detail::TensorImpl<T>>()) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape.str());
  }
  impl_->data = std::move(values);
  impl_->shape = std::move(shape);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
T Tensor<T>::item() const {
  if (impl_->data.size() != 1) {
    throw DimensionError("item() needs a one-element tensor, got " + impl_->shape.str());
  }
  return impl_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  return *this;
}

template <typename T>
std::span<T> Tensor<T>::mutable_grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
  return impl_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  impl_->grad.clear();
}

template <typename T>
void Tensor<T>::backward() {
  if (impl_->data.size() != 1) {
    throw DimensionError("backward() needs a one-element tensor, got " + impl_->shape.str());
  }
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  using Impl = detail::TensorImpl<T>;
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  mutable_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* node = *it;
    if (!node->backward) continue;
    if (!node->grad.empty()) node->backward(node->grad);
    // Interior gradients are not retained once propagated.
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename T>
void Tensor<T>::attach_backward(std::initializer_list<Tensor> inputs, BackwardFn<T> fn) {
  attach_backward(std::vector<Tensor>(inputs), std::move(fn));
}

template <typename T>
void Tensor<T>::attach_backward(const std::vector<Tensor>& inputs, BackwardFn<T> fn) {
  if (!GradMode::enabled()) return;
  bool any = false;
  for (const auto& in : inputs) {
    if (in.defined() && in.requires_grad()) {
      impl_->parents.push_back(in.impl_);
      any = true;
    }
  }
  if (!any) return;
  impl_->requires_grad = true;
  impl_->backward = std::move(fn);
}

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  // An all-ones exponent marks Inf and NaN; testing the bits keeps the scan
  // branch-free and vectorized.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  auto d = t.data();
  Bits bad = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    bad |= static_cast<Bits>((std::bit_cast<Bits>(d[i]) & exponent) == exponent);
  }
  if (bad) {
    throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                       t.shape().str());
  }
}

template class Tensor<float>;
template class Tensor<double>;
template void check_finite<float>(const Tensor<float>&, const char*);
template void check_finite<double>(const Tensor<double>&, const char*);

}  // namespace psumnet
