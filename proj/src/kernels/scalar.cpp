#include "tempo/kernels.hpp"

namespace tempo::kernels::detail {
namespace {

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <class T>
void scale(T alpha, T* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] *= alpha;
}

template <class T>
void add(const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aip * b[p * n + j];
    }
  }
}

template <class T>
Table<T> make_table() {
  return Table<T>{&dot<T>, &axpy<T>, &scale<T>, &add<T>, &gemm_nn<T>};
}

}  // namespace

Dispatch make_scalar() {
  return Dispatch{Isa::scalar, make_table<float>(), make_table<double>()};
}

}  // namespace tempo::kernels::detail
