#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tempo {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <class T>
class Tensor;

namespace detail {

template <class T>
struct TensorImpl;

// One recorded operation. `inputs` keeps the operands alive until the
// consuming graph is released; `backward` receives the gradient of the
// op's output and its forward value and adds into the inputs' gradients.
template <class T>
struct Node {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(std::span<const T> grad_out, std::span<const T> out)> backward;
};

template <class T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::unique_ptr<Node<T>> node;  // null for leaves and constants
};

}  // namespace detail

// Disables graph recording on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

// Dense row-major tensor handle. Copies share storage; use clone() for a
// deep copy. Participates in reverse-mode differentiation when
// requires_grad is set on a leaf or inherited from an operand.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  // Size of the trailing extent, and the number of trailing rows.
  std::size_t cols() const;
  std::size_t rows() const;

  std::span<const T> data() const { return impl_->data; }
  std::span<T> mutable_data() { return impl_->data; }
  T item() const;
  T at(std::size_t i) const { return impl_->data.at(i); }

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->node == nullptr; }
  bool has_grad() const { return !impl_->grad.empty(); }
  // Zeros when no gradient has been accumulated yet.
  std::vector<T> grad() const;
  std::span<T> mutable_grad();
  void zero_grad() { impl_->grad.clear(); }

  Tensor clone() const;
  // Same data, cut from the graph.
  Tensor detach() const;
  bool all_finite() const;

  void backward() const;

  // Internal access for op implementations.
  const std::shared_ptr<detail::TensorImpl<T>>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl<T>> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl<T>> impl_;
};

namespace detail {

// Gradient buffer of `impl`, allocated (zeroed) on first use.
template <class T>
std::span<T> grad_buffer(TensorImpl<T>& impl);

// Wraps a freshly computed value into a Tensor and records `backward`
// against `inputs` when grad mode is on and any input requires grad.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> values,
                      std::vector<Tensor<T>> inputs,
                      std::function<void(std::span<const T>, std::span<const T>)> backward);

}  // namespace detail

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace tempo
