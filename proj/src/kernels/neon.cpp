#include <arm_neon.h>

#include "tempo/kernels.hpp"

namespace tempo::kernels::detail {
namespace {

float dot_f32(const float* a, const float* b, std::size_t n) {
  float32x4_t acc0 = vdupq_n_f32(0.0f);
  float32x4_t acc1 = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
    acc1 = vfmaq_f32(acc1, vld1q_f32(a + i + 4), vld1q_f32(b + i + 4));
  }
  for (; i + 4 <= n; i += 4) acc0 = vfmaq_f32(acc0, vld1q_f32(a + i), vld1q_f32(b + i));
  float acc = vaddvq_f32(vaddq_f32(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double dot_f64(const double* a, const double* b, std::size_t n) {
  float64x2_t acc0 = vdupq_n_f64(0.0);
  float64x2_t acc1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
    acc1 = vfmaq_f64(acc1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  for (; i + 2 <= n; i += 2) acc0 = vfmaq_f64(acc0, vld1q_f64(a + i), vld1q_f64(b + i));
  double acc = vaddvq_f64(vaddq_f64(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

void axpy_f32(float alpha, const float* x, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vfmaq_n_f32(vld1q_f32(y + i), vld1q_f32(x + i), alpha));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void axpy_f64(double alpha, const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_n_f64(vld1q_f64(y + i), vld1q_f64(x + i), alpha));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_f32(float alpha, float* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(x + i, vmulq_n_f32(vld1q_f32(x + i), alpha));
  for (; i < n; ++i) x[i] *= alpha;
}

void scale_f64(double alpha, double* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(x + i, vmulq_n_f64(vld1q_f64(x + i), alpha));
  for (; i < n; ++i) x[i] *= alpha;
}

void add_f32(const float* x, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) vst1q_f32(y + i, vaddq_f32(vld1q_f32(x + i), vld1q_f32(y + i)));
  for (; i < n; ++i) y[i] += x[i];
}

void add_f64(const double* x, double* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vaddq_f64(vld1q_f64(x + i), vld1q_f64(y + i)));
  for (; i < n; ++i) y[i] += x[i];
}

void gemm_nn_f32(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const float* arow = a + i * k;
    float* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 16 <= n; j += 16) {
      float32x4_t c0 = vld1q_f32(crow + j), c1 = vld1q_f32(crow + j + 4);
      float32x4_t c2 = vld1q_f32(crow + j + 8), c3 = vld1q_f32(crow + j + 12);
      for (std::size_t p = 0; p < k; ++p) {
        const float ap = arow[p];
        const float* brow = b + p * n + j;
        c0 = vfmaq_n_f32(c0, vld1q_f32(brow), ap);
        c1 = vfmaq_n_f32(c1, vld1q_f32(brow + 4), ap);
        c2 = vfmaq_n_f32(c2, vld1q_f32(brow + 8), ap);
        c3 = vfmaq_n_f32(c3, vld1q_f32(brow + 12), ap);
      }
      vst1q_f32(crow + j, c0);
      vst1q_f32(crow + j + 4, c1);
      vst1q_f32(crow + j + 8, c2);
      vst1q_f32(crow + j + 12, c3);
    }
    for (; j + 4 <= n; j += 4) {
      float32x4_t c0 = vld1q_f32(crow + j);
      for (std::size_t p = 0; p < k; ++p) c0 = vfmaq_n_f32(c0, vld1q_f32(b + p * n + j), arow[p]);
      vst1q_f32(crow + j, c0);
    }
    for (; j < n; ++j) {
      float acc = crow[j];
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * b[p * n + j];
      crow[j] = acc;
    }
  }
}

void gemm_nn_f64(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                 double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
      float64x2_t c0 = vld1q_f64(crow + j), c1 = vld1q_f64(crow + j + 2);
      float64x2_t c2 = vld1q_f64(crow + j + 4), c3 = vld1q_f64(crow + j + 6);
      for (std::size_t p = 0; p < k; ++p) {
        const double ap = arow[p];
        const double* brow = b + p * n + j;
        c0 = vfmaq_n_f64(c0, vld1q_f64(brow), ap);
        c1 = vfmaq_n_f64(c1, vld1q_f64(brow + 2), ap);
        c2 = vfmaq_n_f64(c2, vld1q_f64(brow + 4), ap);
        c3 = vfmaq_n_f64(c3, vld1q_f64(brow + 6), ap);
      }
      vst1q_f64(crow + j, c0);
      vst1q_f64(crow + j + 2, c1);
      vst1q_f64(crow + j + 4, c2);
      vst1q_f64(crow + j + 6, c3);
    }
    for (; j + 2 <= n; j += 2) {
      float64x2_t c0 = vld1q_f64(crow + j);
      for (std::size_t p = 0; p < k; ++p) c0 = vfmaq_n_f64(c0, vld1q_f64(b + p * n + j), arow[p]);
      vst1q_f64(crow + j, c0);
    }
    for (; j < n; ++j) {
      double acc = crow[j];
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * b[p * n + j];
      crow[j] = acc;
    }
  }
}

}  // namespace

Dispatch make_neon() {
  return Dispatch{Isa::neon, Table<float>{&dot_f32, &axpy_f32, &scale_f32, &add_f32, &gemm_nn_f32},
                  Table<double>{&dot_f64, &axpy_f64, &scale_f64, &add_f64, &gemm_nn_f64}};
}

}  // namespace tempo::kernels::detail
