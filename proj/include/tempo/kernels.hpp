#pragma once

// Inner-loop arithmetic kernels. Every kernel has a scalar reference
// implementation; vectorized variants (AVX2+FMA on x86-64, NEON on aarch64)
// are compiled in separate translation units and chosen once per process.

#include <cstddef>
#include <string_view>

namespace tempo::kernels {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

template <class T>
struct Table {
  T (*dot)(const T* a, const T* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  // x *= alpha
  void (*scale)(T alpha, T* x, std::size_t n);
  // y += x
  void (*add)(const T* x, T* y, std::size_t n);
  // C (m x n) += A (m x k) * B (k x n), all row-major and contiguous
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
};

struct Dispatch {
  Isa isa;
  Table<float> f32;
  Table<double> f64;

  template <class T>
  const Table<T>& get() const {
    if constexpr (sizeof(T) == sizeof(float)) {
      return f32;
    } else {
      return f64;
    }
  }
};

const Dispatch& scalar_dispatch();
// Null when the variant was not built or the CPU lacks the instructions.
const Dispatch* avx2_dispatch();
const Dispatch* neon_dispatch();

// The table used by the tensor engine. Picked on first use: the best
// supported variant, unless TEMPO_ISA=scalar|avx2|neon overrides it.
const Dispatch& active();

template <class T>
inline const Table<T>& table() {
  return active().get<T>();
}

// Dense row-major GEMM on top of a kernel table:
//   C (m x n) (+)= op(A) * op(B)
// op(A) is m x k (A stored k x m when trans_a), op(B) is k x n (B stored
// n x k when trans_b).
template <class T>
void gemm(const Table<T>& kt, bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const T* a, const T* b, T* c, bool accumulate);

template <class T>
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 const T* a, const T* b, T* c, bool accumulate) {
  gemm(table<T>(), trans_a, trans_b, m, n, k, a, b, c, accumulate);
}

namespace detail {
// Per-ISA table factories, defined in the per-ISA translation units.
Dispatch make_scalar();
#if defined(TEMPO_HAVE_AVX2)
Dispatch make_avx2();
#endif
#if defined(TEMPO_HAVE_NEON)
Dispatch make_neon();
#endif
}  // namespace detail

}  // namespace tempo::kernels
