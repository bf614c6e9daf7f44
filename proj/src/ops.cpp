#include "tempo/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "tempo/kernels.hpp"
#include "tempo/rng.hpp"

namespace tempo::ops {

using detail::grad_buffer;
using detail::make_result;

namespace {

template <class T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

template <class T>
std::span<T> gbuf(const Tensor<T>& t) {
  return grad_buffer(*t.impl());
}

template <class T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

template <class T>
Shape with_last(const Shape& s, std::size_t last) {
  Shape out = s;
  out.back() = last;
  return out;
}

// Elementwise unary op given f(x) and f'(x, y).
template <class T, class F, class D>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, D df) {
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = f(xs[i]);
  return make_result<T>(op, x.shape(), std::move(out), {x},
                        [x, df](std::span<const T> g, std::span<const T> y) {
                          auto gx = gbuf(x);
                          const auto xs = x.data();
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xs[i], y[i]);
                        });
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<T> out(m * n);
  kernels::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
  return make_result<T>("matmul", {m, n}, std::move(out), {a, b},
                        [a, b, m, n, k](std::span<const T> g, std::span<const T>) {
                          if (wants_grad(a)) {
                            kernels::gemm<T>(false, true, m, k, n, g.data(), b.data().data(),
                                             gbuf(a).data(), true);
                          }
                          if (wants_grad(b)) {
                            kernels::gemm<T>(true, false, k, n, m, a.data().data(), g.data(),
                                             gbuf(b).data(), true);
                          }
                        });
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.dim() != 2 || x.cols() != w.shape()[0]) {
    throw std::invalid_argument("linear: shape mismatch " + shape_str(x.shape()) + " x " +
                                shape_str(w.shape()));
  }
  const std::size_t rows = x.rows(), in = w.shape()[0], out_dim = w.shape()[1];
  if (bias.defined() && bias.numel() != out_dim) {
    throw std::invalid_argument("linear: bias " + shape_str(bias.shape()) + " does not match " +
                                shape_str(w.shape()));
  }
  std::vector<T> out(rows * out_dim);
  kernels::gemm<T>(false, false, rows, out_dim, in, x.data().data(), w.data().data(), out.data(),
                   false);
  if (bias.defined()) {
    const auto& kt = kernels::table<T>();
    for (std::size_t r = 0; r < rows; ++r) kt.add(bias.data().data(), out.data() + r * out_dim, out_dim);
  }
  return make_result<T>(
      "linear", with_last<T>(x.shape(), out_dim), std::move(out), {x, w, bias},
      [x, w, bias, rows, in, out_dim](std::span<const T> g, std::span<const T>) {
        if (wants_grad(x)) {
          kernels::gemm<T>(false, true, rows, in, out_dim, g.data(), w.data().data(), gbuf(x).data(),
                           true);
        }
        if (wants_grad(w)) {
          kernels::gemm<T>(true, false, in, out_dim, rows, x.data().data(), g.data(), gbuf(w).data(),
                           true);
        }
        if (wants_grad(bias)) {
          auto gb = gbuf(bias);
          const auto& kt = kernels::table<T>();
          for (std::size_t r = 0; r < rows; ++r) kt.add(g.data() + r * out_dim, gb.data(), out_dim);
        }
      });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> out(a.data().begin(), a.data().end());
  kernels::table<T>().add(b.data().data(), out.data(), out.size());
  return make_result<T>("add", a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const T> g, std::span<const T>) {
                          const auto& kt = kernels::table<T>();
                          if (wants_grad(a)) kt.add(g.data(), gbuf(a).data(), g.size());
                          if (wants_grad(b)) kt.add(g.data(), gbuf(b).data(), g.size());
                        });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] - bs[i];
  return make_result<T>("sub", a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const T> g, std::span<const T>) {
                          const auto& kt = kernels::table<T>();
                          if (wants_grad(a)) kt.add(g.data(), gbuf(a).data(), g.size());
                          if (wants_grad(b)) kt.axpy(T(-1), g.data(), gbuf(b).data(), g.size());
                        });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  const auto as = a.data(), bs = b.data();
  std::vector<T> out(as.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = as[i] * bs[i];
  return make_result<T>("mul", a.shape(), std::move(out), {a, b},
                        [a, b](std::span<const T> g, std::span<const T>) {
                          if (wants_grad(a)) {
                            auto ga = gbuf(a);
                            const auto bs = b.data();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bs[i];
                          }
                          if (wants_grad(b)) {
                            auto gb = gbuf(b);
                            const auto as = a.data();
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * as[i];
                          }
                        });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.data().begin(), x.data().end());
  kernels::table<T>().scale(factor, out.data(), out.size());
  return make_result<T>("scale", x.shape(), std::move(out), {x},
                        [x, factor](std::span<const T> g, std::span<const T>) {
                          kernels::table<T>().axpy(factor, g.data(), gbuf(x).data(), g.size());
                        });
}

template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row) {
  const std::size_t d = x.cols();
  if (row.numel() != d) {
    throw std::invalid_argument("add_row: row " + shape_str(row.shape()) + " does not match " +
                                shape_str(x.shape()));
  }
  const std::size_t rows = x.rows();
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto& kt = kernels::table<T>();
  for (std::size_t r = 0; r < rows; ++r) kt.add(row.data().data(), out.data() + r * d, d);
  return make_result<T>("add_row", x.shape(), std::move(out), {x, row},
                        [x, row, rows, d](std::span<const T> g, std::span<const T>) {
                          const auto& kt = kernels::table<T>();
                          if (wants_grad(x)) kt.add(g.data(), gbuf(x).data(), g.size());
                          if (wants_grad(row)) {
                            auto gr = gbuf(row);
                            for (std::size_t r = 0; r < rows; ++r) kt.add(g.data() + r * d, gr.data(), d);
                          }
                        });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return unary<T>(
      "gelu", x, [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        return cdf + v * pdf;
      });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  return unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
  return unary<T>(
      "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const std::size_t n = x.cols();
  const std::size_t rows = x.rows();
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xs.data() + r * n;
    T* o = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    const T inv = T(1) / total;
    for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
  }
  return make_result<T>("softmax_rows", x.shape(), std::move(out), {x},
                        [x, rows, n](std::span<const T> g, std::span<const T> y) {
                          auto gx = gbuf(x);
                          const auto& kt = kernels::table<T>();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gr = g.data() + r * n;
                            const T* yr = y.data() + r * n;
                            const T inner = kt.dot(gr, yr, n);
                            T* out = gx.data() + r * n;
                            for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - inner);
                          }
                        });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw std::invalid_argument("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                                shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  }
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = x.rows();
  const auto xs = x.data(), gs = gain.data(), bs = bias.data();
  std::vector<T> out(xs.size()), xhat(xs.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xs.data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += in[j];
    mu /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (in[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gs[j] + bs[j];
    }
  }
  return make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](
          std::span<const T> g, std::span<const T>) {
        const auto gs = gain.data();
        if (wants_grad(x)) {
          auto gx = gbuf(x);
          std::vector<T> dy(d);
          for (std::size_t r = 0; r < rows; ++r) {
            const T* gr = g.data() + r * d;
            const T* hr = xhat.data() + r * d;
            T mean_dy = 0, mean_dy_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
              dy[j] = gr[j] * gs[j];
              mean_dy += dy[j];
              mean_dy_h += dy[j] * hr[j];
            }
            mean_dy /= T(d);
            mean_dy_h /= T(d);
            T* o = gx.data() + r * d;
            for (std::size_t j = 0; j < d; ++j) o[j] += inv_std[r] * (dy[j] - mean_dy - hr[j] * mean_dy_h);
          }
        }
        if (wants_grad(gain)) {
          auto gg = gbuf(gain);
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
          }
        }
        if (wants_grad(bias)) {
          auto gb = gbuf(bias);
          const auto& kt = kernels::table<T>();
          for (std::size_t r = 0; r < rows; ++r) kt.add(g.data() + r * d, gb.data(), d);
        }
      });
}

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows() || a.dim() != b.dim()) {
    throw std::invalid_argument("concat_cols: row mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const std::size_t rows = a.rows(), p = a.cols(), q = b.cols();
  std::vector<T> out(rows * (p + q));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * p, p, out.data() + r * (p + q));
    std::copy_n(b.data().data() + r * q, q, out.data() + r * (p + q) + p);
  }
  return make_result<T>("concat_cols", with_last<T>(a.shape(), p + q), std::move(out), {a, b},
                        [a, b, rows, p, q](std::span<const T> g, std::span<const T>) {
                          const auto& kt = kernels::table<T>();
                          if (wants_grad(a)) {
                            auto ga = gbuf(a);
                            for (std::size_t r = 0; r < rows; ++r) kt.add(g.data() + r * (p + q), ga.data() + r * p, p);
                          }
                          if (wants_grad(b)) {
                            auto gb = gbuf(b);
                            for (std::size_t r = 0; r < rows; ++r) {
                              kt.add(g.data() + r * (p + q) + p, gb.data() + r * q, q);
                            }
                          }
                        });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
  const std::size_t n = x.cols();
  if (begin >= end || end > n) {
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.rows(), w = end - begin;
  std::vector<T> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data().data() + r * n + begin, w, out.data() + r * w);
  return make_result<T>("slice_cols", with_last<T>(x.shape(), w), std::move(out), {x},
                        [x, rows, n, begin, w](std::span<const T> g, std::span<const T>) {
                          auto gx = gbuf(x);
                          const auto& kt = kernels::table<T>();
                          for (std::size_t r = 0; r < rows; ++r) kt.add(g.data() + r * w, gx.data() + r * n + begin, w);
                        });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (index.empty()) throw std::invalid_argument("gather_rows: empty index");
  std::vector<T> out(index.size() * d);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(index[i]) + " at position " +
                              std::to_string(i) + " exceeds " + std::to_string(rows) + " rows");
    }
    std::copy_n(x.data().data() + index[i] * d, d, out.data() + i * d);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result<T>("gather_rows", {index.size(), d}, std::move(out), {x},
                        [x, idx = std::move(idx), d](std::span<const T> g, std::span<const T>) {
                          auto gx = gbuf(x);
                          const auto& kt = kernels::table<T>();
                          for (std::size_t i = 0; i < idx.size(); ++i) kt.add(g.data() + i * d, gx.data() + idx[i] * d, d);
                        });
}

template <class T>
Tensor<T> replace_rows(const Tensor<T>& x, std::span<const std::size_t> index, const Tensor<T>& src) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (src.cols() != d || src.rows() != index.size()) {
    throw std::invalid_argument("replace_rows: source " + shape_str(src.shape()) + " does not match " +
                                std::to_string(index.size()) + " rows of width " + std::to_string(d));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  std::vector<char> replaced(rows, 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) throw std::out_of_range("replace_rows: index " + std::to_string(index[i]));
    if (replaced[index[i]]) throw std::invalid_argument("replace_rows: duplicate index " + std::to_string(index[i]));
    replaced[index[i]] = 1;
    std::copy_n(src.data().data() + i * d, d, out.data() + index[i] * d);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result<T>(
      "replace_rows", x.shape(), std::move(out), {x, src},
      [x, src, idx = std::move(idx), replaced = std::move(replaced), rows, d](std::span<const T> g,
                                                                              std::span<const T>) {
        const auto& kt = kernels::table<T>();
        if (wants_grad(x)) {
          auto gx = gbuf(x);
          for (std::size_t r = 0; r < rows; ++r) {
            if (!replaced[r]) kt.add(g.data() + r * d, gx.data() + r * d, d);
          }
        }
        if (wants_grad(src)) {
          auto gs = gbuf(src);
          for (std::size_t i = 0; i < idx.size(); ++i) kt.add(g.data() + idx[i] * d, gs.data() + i * d, d);
        }
      });
}

template <class T>
Tensor<T> add_indexed_rows(const Tensor<T>& x, const Tensor<T>& table,
                           std::span<const std::size_t> index) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (table.cols() != d || index.size() != rows) {
    throw std::invalid_argument("add_indexed_rows: table " + shape_str(table.shape()) + " / index " +
                                std::to_string(index.size()) + " do not match " + shape_str(x.shape()));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  const auto& kt = kernels::table<T>();
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= table.rows()) throw std::out_of_range("add_indexed_rows: index " + std::to_string(index[r]));
    kt.add(table.data().data() + index[r] * d, out.data() + r * d, d);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result<T>("add_indexed_rows", x.shape(), std::move(out), {x, table},
                        [x, table, idx = std::move(idx), d](std::span<const T> g, std::span<const T>) {
                          const auto& kt = kernels::table<T>();
                          if (wants_grad(x)) kt.add(g.data(), gbuf(x).data(), g.size());
                          if (wants_grad(table)) {
                            auto gt = gbuf(table);
                            for (std::size_t r = 0; r < idx.size(); ++r) kt.add(g.data() + r * d, gt.data() + idx[r] * d, d);
                          }
                        });
}

template <class T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t groups,
                           std::size_t heads, T scale) {
  const std::size_t d = q.cols();
  if (k.cols() != d || groups == 0 || heads == 0 || d % heads != 0 || q.rows() % groups != 0 ||
      k.rows() % groups != 0) {
    throw std::invalid_argument("attention_scores: incompatible q " + shape_str(q.shape()) + ", k " +
                                shape_str(k.shape()) + " for " + std::to_string(groups) + " groups, " +
                                std::to_string(heads) + " heads");
  }
  const std::size_t lq = q.rows() / groups, lk = k.rows() / groups, dh = d / heads;
  const auto& kt = kernels::table<T>();
  const T* qs = q.data().data();
  const T* ks = k.data().data();
  std::vector<T> out(groups * heads * lq * lk);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        const T* qi = qs + (g * lq + i) * d + h * dh;
        T* o = out.data() + ((g * heads + h) * lq + i) * lk;
        for (std::size_t j = 0; j < lk; ++j) o[j] = scale * kt.dot(qi, ks + (g * lk + j) * d + h * dh, dh);
      }
    }
  }
  return make_result<T>(
      "attention_scores", {groups * heads * lq, lk}, std::move(out), {q, k},
      [q, k, groups, heads, lq, lk, d, dh, scale](std::span<const T> gout, std::span<const T>) {
        const auto& kt = kernels::table<T>();
        const bool gq = wants_grad(q), gk = wants_grad(k);
        T* dq = gq ? gbuf(q).data() : nullptr;
        T* dk = gk ? gbuf(k).data() : nullptr;
        const T* qs = q.data().data();
        const T* ks = k.data().data();
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              const T* gr = gout.data() + ((g * heads + h) * lq + i) * lk;
              const std::size_t qoff = (g * lq + i) * d + h * dh;
              for (std::size_t j = 0; j < lk; ++j) {
                const T c = scale * gr[j];
                const std::size_t koff = (g * lk + j) * d + h * dh;
                if (gq) kt.axpy(c, ks + koff, dq + qoff, dh);
                if (gk) kt.axpy(c, qs + qoff, dk + koff, dh);
              }
            }
          }
        }
      });
}

template <class T>
Tensor<T> attention_mix(const Tensor<T>& probs, const Tensor<T>& v, std::size_t groups,
                        std::size_t heads) {
  const std::size_t d = v.cols();
  const std::size_t lk = probs.cols();
  if (groups == 0 || heads == 0 || d % heads != 0 || v.rows() != groups * lk ||
      probs.rows() % (groups * heads) != 0) {
    throw std::invalid_argument("attention_mix: incompatible probs " + shape_str(probs.shape()) +
                                ", v " + shape_str(v.shape()));
  }
  const std::size_t lq = probs.rows() / (groups * heads), dh = d / heads;
  const auto& kt = kernels::table<T>();
  const T* ps = probs.data().data();
  const T* vs = v.data().data();
  std::vector<T> out(groups * lq * d, T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < lq; ++i) {
        const T* pr = ps + ((g * heads + h) * lq + i) * lk;
        T* o = out.data() + (g * lq + i) * d + h * dh;
        for (std::size_t j = 0; j < lk; ++j) kt.axpy(pr[j], vs + (g * lk + j) * d + h * dh, o, dh);
      }
    }
  }
  return make_result<T>(
      "attention_mix", {groups * lq, d}, std::move(out), {probs, v},
      [probs, v, groups, heads, lq, lk, d, dh](std::span<const T> gout, std::span<const T>) {
        const auto& kt = kernels::table<T>();
        const bool gp = wants_grad(probs), gv = wants_grad(v);
        T* dp = gp ? gbuf(probs).data() : nullptr;
        T* dv = gv ? gbuf(v).data() : nullptr;
        const T* ps = probs.data().data();
        const T* vs = v.data().data();
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            for (std::size_t i = 0; i < lq; ++i) {
              const std::size_t prow = ((g * heads + h) * lq + i) * lk;
              const T* go = gout.data() + (g * lq + i) * d + h * dh;
              for (std::size_t j = 0; j < lk; ++j) {
                const std::size_t voff = (g * lk + j) * d + h * dh;
                if (gp) dp[prow + j] += kt.dot(go, vs + voff, dh);
                if (gv) kt.axpy(ps[prow + j], go, dv + voff, dh);
              }
            }
          }
        }
      });
}

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, const DropoutKey& key) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (rate == 0.0) return x;
  const std::size_t d = x.cols();
  const std::size_t rows = x.rows();
  const std::size_t per = std::max<std::size_t>(1, key.rows_per_sample);
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  for (std::size_t r0 = 0; r0 < rows; r0 += per) {
    auto engine = keyed_engine({key.seed, key.site, key.step, key.first_sample + r0 / per});
    const std::size_t r1 = std::min(rows, r0 + per);
    for (std::size_t i = r0 * d; i < r1 * d; ++i) mask[i] = uniform01(engine) >= rate ? keep_scale : T(0);
  }
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * mask[i];
  return make_result<T>("dropout", x.shape(), std::move(out), {x},
                        [x, mask = std::move(mask)](std::span<const T> g, std::span<const T>) {
                          auto gx = gbuf(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
                        });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return make_result<T>("sum", {1}, {total}, {x}, [x](std::span<const T> g, std::span<const T>) {
    auto gx = gbuf(x);
    for (auto& v : gx) v += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

#define TEMPO_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> add_row(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> tanh(const Tensor<T>&);                                                      \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                   \
  template Tensor<T> log(const Tensor<T>&);                                                       \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> concat_cols(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);                 \
  template Tensor<T> replace_rows(const Tensor<T>&, std::span<const std::size_t>, const Tensor<T>&); \
  template Tensor<T> add_indexed_rows(const Tensor<T>&, const Tensor<T>&, std::span<const std::size_t>); \
  template Tensor<T> attention_scores(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, T); \
  template Tensor<T> attention_mix(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t); \
  template Tensor<T> dropout(const Tensor<T>&, double, const DropoutKey&);                        \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);

TEMPO_INSTANTIATE_OPS(float)
TEMPO_INSTANTIATE_OPS(double)

#undef TEMPO_INSTANTIATE_OPS

}  // namespace tempo::ops
