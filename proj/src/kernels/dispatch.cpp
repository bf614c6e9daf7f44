#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "tempo/kernels.hpp"

namespace tempo::kernels {

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::scalar: return "scalar";
    case Isa::avx2: return "avx2";
    case Isa::neon: return "neon";
  }
  return "unknown";
}

const Dispatch& scalar_dispatch() {
  static const Dispatch d = detail::make_scalar();
  return d;
}

const Dispatch* avx2_dispatch() {
#if defined(TEMPO_HAVE_AVX2)
  static const bool supported = [] {
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  }();
  if (!supported) return nullptr;
  static const Dispatch d = detail::make_avx2();
  return &d;
#else
  return nullptr;
#endif
}

const Dispatch* neon_dispatch() {
#if defined(TEMPO_HAVE_NEON)
  // Advanced SIMD is mandatory on aarch64.
  static const Dispatch d = detail::make_neon();
  return &d;
#else
  return nullptr;
#endif
}

namespace {

const Dispatch& select() {
  if (const char* env = std::getenv("TEMPO_ISA"); env != nullptr && *env != '\0') {
    const std::string want(env);
    if (want == "scalar") return scalar_dispatch();
    if (want == "avx2" && avx2_dispatch() != nullptr) return *avx2_dispatch();
    if (want == "neon" && neon_dispatch() != nullptr) return *neon_dispatch();
    throw std::runtime_error("TEMPO_ISA=" + want + " is not available on this machine/build");
  }
  if (const Dispatch* d = avx2_dispatch()) return *d;
  if (const Dispatch* d = neon_dispatch()) return *d;
  return scalar_dispatch();
}

}  // namespace

const Dispatch& active() {
  static const Dispatch& d = select();
  return d;
}

namespace {

// dst (cols x rows) = src (rows x cols)^T
template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, std::vector<T>& dst) {
  dst.resize(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
  }
}

}  // namespace

template <class T>
void gemm(const Table<T>& kt, bool trans_a, bool trans_b, std::size_t m, std::size_t n,
          std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(T) * m * n);
  // Transposed operands are copied into row-major order so every case runs
  // the same register-blocked kernel; the copies are O(mk + kn) against the
  // O(mnk) product.
  std::vector<T> at, bt;
  if (trans_a) {
    transpose(a, k, m, at);
    a = at.data();
  }
  if (trans_b) {
    transpose(b, n, k, bt);
    b = bt.data();
  }
  kt.gemm_nn(m, n, k, a, b, c);
}

template void gemm<float>(const Table<float>&, bool, bool, std::size_t, std::size_t, std::size_t,
                          const float*, const float*, float*, bool);
template void gemm<double>(const Table<double>&, bool, bool, std::size_t, std::size_t, std::size_t,
                           const double*, const double*, double*, bool);

}  // namespace tempo::kernels
