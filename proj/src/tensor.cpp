#include "tempo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace tempo {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must have at least one extent");
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

template <class T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->data.assign(shape_numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <class T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <class T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

template <class T>
std::size_t Tensor<T>::cols() const {
  return impl_->shape.back();
}

template <class T>
std::size_t Tensor<T>::rows() const {
  return impl_->data.size() / impl_->shape.back();
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <class T>
std::vector<T> Tensor<T>::grad() const {
  if (impl_->grad.empty()) return std::vector<T>(impl_->data.size(), T(0));
  return impl_->grad;
}

template <class T>
std::span<T> Tensor<T>::mutable_grad() {
  return detail::grad_buffer(*impl_);
}

template <class T>
Tensor<T> Tensor<T>::clone() const {
  return from(shape(), impl_->data, impl_->requires_grad);
}

template <class T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), impl_->data, false);
}

template <class T>
bool Tensor<T>::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(), [](T v) { return std::isfinite(v); });
}

template <class T>
void Tensor<T>::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward() needs a scalar seed, got shape " + shape_str(shape()));
  }
  using Impl = detail::TensorImpl<T>;

  // Iterative post-order DFS: every node is emitted after all of its inputs.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    const std::size_t n_inputs = cur->node ? cur->node->inputs.size() : 0;
    if (next < n_inputs) {
      Impl* child = cur->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(cur);
    stack.pop_back();
  }

  // Intermediate gradients restart from zero on every call; leaves accumulate.
  for (Impl* impl : order) {
    if (impl->node) impl->grad.assign(impl->data.size(), T(0));
  }
  detail::grad_buffer(*impl_)[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* impl = *it;
    if (!impl->node) continue;
    impl->node->backward(impl->grad, impl->data);
  }
  for (Impl* impl : order) {
    if (impl->node) std::vector<T>().swap(impl->grad);
  }
}

namespace detail {

template <class T>
std::span<T> grad_buffer(TensorImpl<T>& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>, std::span<const T>)> backward) {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  const bool track = NoGradGuard::grad_enabled() &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.defined() && t.requires_grad(); });
  if (track) {
    impl->requires_grad = true;
    impl->node = std::make_unique<Node<T>>();
    impl->node->op = op;
    for (auto& t : inputs) {
      if (t.defined()) impl->node->inputs.push_back(t.impl());
    }
    impl->node->backward = std::move(backward);
  }
  return Tensor<T>(std::move(impl));
}

template std::span<float> grad_buffer(TensorImpl<float>&);
template std::span<double> grad_buffer(TensorImpl<double>&);
template Tensor<float> make_result(const char*, Shape, std::vector<float>, std::vector<Tensor<float>>,
                                   std::function<void(std::span<const float>, std::span<const float>)>);
template Tensor<double> make_result(const char*, Shape, std::vector<double>,
                                    std::vector<Tensor<double>>,
                                    std::function<void(std::span<const double>, std::span<const double>)>);

}  // namespace detail

template class Tensor<float>;
template class Tensor<double>;

}  // namespace tempo
