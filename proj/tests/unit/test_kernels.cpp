#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "tempo/kernels.hpp"

using namespace tempo;

namespace {

template <class T>
std::vector<T> random_vec(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return v;
}

template <class T>
double tol() {
  return sizeof(T) == sizeof(float) ? 2e-5 : 1e-12;
}

// Relative comparison scaled by the magnitude of the reference.
template <class T>
void check_close(const std::vector<T>& got, const std::vector<T>& want, double scale) {
  REQUIRE(got.size() == want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    CHECK(std::fabs(double(got[i]) - double(want[i])) <= tol<T>() * scale);
  }
}

template <class T>
void compare_tables(const kernels::Table<T>& ref, const kernels::Table<T>& simd) {
  std::mt19937_64 rng(11);
  // Lengths straddle every vector width and tail case.
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 9u, 15u, 16u, 17u, 31u, 32u, 33u, 100u, 257u}) {
    const auto a = random_vec<T>(rng, n), b = random_vec<T>(rng, n);
    CHECK(std::fabs(double(ref.dot(a.data(), b.data(), n)) - double(simd.dot(a.data(), b.data(), n))) <=
          tol<T>() * (1.0 + std::sqrt(double(n))));
    auto y1 = b, y2 = b;
    ref.axpy(T(0.7), a.data(), y1.data(), n);
    simd.axpy(T(0.7), a.data(), y2.data(), n);
    check_close(y2, y1, 4.0);
    y1 = a;
    y2 = a;
    ref.scale(T(-1.3), y1.data(), n);
    simd.scale(T(-1.3), y2.data(), n);
    check_close(y2, y1, 4.0);
    y1 = b;
    y2 = b;
    ref.add(a.data(), y1.data(), n);
    simd.add(a.data(), y2.data(), n);
    check_close(y2, y1, 4.0);
  }
  for (std::size_t m : {1u, 2u, 5u}) {
    for (std::size_t n : {1u, 7u, 8u, 17u, 33u, 70u}) {
      for (std::size_t k : {1u, 3u, 16u, 29u}) {
        const auto a = random_vec<T>(rng, m * k), b = random_vec<T>(rng, k * n);
        auto c1 = random_vec<T>(rng, m * n);
        auto c2 = c1;
        ref.gemm_nn(m, n, k, a.data(), b.data(), c1.data());
        simd.gemm_nn(m, n, k, a.data(), b.data(), c2.data());
        check_close(c2, c1, 1.0 + std::sqrt(double(k)) * 4.0);
      }
    }
  }
}

}  // namespace

TEST_CASE("scalar kernels against direct loops") {
  const auto& t = kernels::scalar_dispatch().f64;
  std::mt19937_64 rng(3);
  const std::size_t m = 3, n = 5, k = 4;
  const auto a = random_vec<double>(rng, m * k), b = random_vec<double>(rng, k * n);
  std::vector<double> c(m * n, 1.0);
  t.gemm_nn(m, n, k, a.data(), b.data(), c.data());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double want = 1.0;
      for (std::size_t p = 0; p < k; ++p) want += a[i * k + p] * b[p * n + j];
      CHECK(c[i * n + j] == doctest::Approx(want).epsilon(1e-14));
    }
  }
  CHECK(t.dot(a.data(), a.data(), 0) == 0.0);
}

TEST_CASE("vectorized kernels match the scalar reference") {
  const kernels::Dispatch* variants[] = {kernels::avx2_dispatch(), kernels::neon_dispatch()};
  bool any = false;
  for (const auto* d : variants) {
    if (!d) continue;
    any = true;
    INFO("isa " << kernels::isa_name(d->isa));
    compare_tables(kernels::scalar_dispatch().f32, d->f32);
    compare_tables(kernels::scalar_dispatch().f64, d->f64);
  }
  if (!any) MESSAGE("no vectorized variant on this machine; scalar only");
}

TEST_CASE("gemm transposes match explicit transposition") {
  std::mt19937_64 rng(5);
  const std::size_t m = 4, n = 6, k = 5;
  const auto a = random_vec<double>(rng, m * k);  // m x k
  const auto b = random_vec<double>(rng, k * n);  // k x n
  std::vector<double> at(k * m), bt(n * k);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) at[p * m + i] = a[i * k + p];
  }
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  std::vector<double> want(m * n, 0.0);
  kernels::gemm<double>(false, false, m, n, k, a.data(), b.data(), want.data(), false);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      std::vector<double> c(m * n, 9.0);
      kernels::gemm<double>(ta, tb, m, n, k, ta ? at.data() : a.data(), tb ? bt.data() : b.data(), c.data(), false);
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-13));
      std::vector<double> acc(m * n, 1.0);
      kernels::gemm<double>(ta, tb, m, n, k, ta ? at.data() : a.data(), tb ? bt.data() : b.data(), acc.data(), true);
      for (std::size_t i = 0; i < c.size(); ++i) CHECK(acc[i] == doctest::Approx(want[i] + 1.0).epsilon(1e-13));
    }
  }
}
