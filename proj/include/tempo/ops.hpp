#pragma once

// Differentiable operations over row-major tensors. "Rows" are all leading
// extents flattened; most ops act on the trailing extent.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tempo/tensor.hpp"

namespace tempo::ops {

// Standard matrix product of a (m x k) and b (k x n).
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x (.. x in) * w (in x out) + bias (out). `bias` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor);
// Adds a length-d vector to every trailing row of x.
template <class T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& row);

template <class T>
Tensor<T> relu(const Tensor<T>& x);
// Exact (erf) form.
template <class T>
Tensor<T> gelu(const Tensor<T>& x);
template <class T>
Tensor<T> tanh(const Tensor<T>& x);
template <class T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <class T>
Tensor<T> log(const Tensor<T>& x);

// Softmax over each trailing row, max-subtracted.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x);

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end);

// out[i] = x[index[i]]
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> index);
// out = x with out[index[i]] = src[i]; all other rows pass through untouched.
template <class T>
Tensor<T> replace_rows(const Tensor<T>& x, std::span<const std::size_t> index, const Tensor<T>& src);
// out[i] = x[i] + table[index[i]]
template <class T>
Tensor<T> add_indexed_rows(const Tensor<T>& x, const Tensor<T>& table,
                           std::span<const std::size_t> index);

// Grouped multi-head scores. q is (groups*Lq x d), k is (groups*Lk x d),
// d = heads*head_dim. Output row (g*heads + h)*Lq + i, column j holds
// scale * <q[g,i,head h], k[g,j,head h]>.
template <class T>
Tensor<T> attention_scores(const Tensor<T>& q, const Tensor<T>& k, std::size_t groups,
                           std::size_t heads, T scale);
// Inverse layout of attention_scores: probs (groups*heads*Lq x Lk) mixes
// v (groups*Lk x d) into (groups*Lq x d).
template <class T>
Tensor<T> attention_mix(const Tensor<T>& probs, const Tensor<T>& v, std::size_t groups,
                        std::size_t heads);

// Reproducible dropout mask source. Rows [s*rows_per_sample, (s+1)*rows_per_sample)
// belong to sample first_sample + s and draw from a stream keyed by
// (seed, site, step, sample), so masks do not depend on how samples are batched.
struct DropoutKey {
  std::uint64_t seed = 0;
  std::uint64_t site = 0;
  std::uint64_t step = 0;
  std::uint64_t first_sample = 0;
  std::size_t rows_per_sample = 1;
};

// Inverted dropout; identity when rate == 0.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, const DropoutKey& key);

template <class T>
Tensor<T> sum(const Tensor<T>& x);
template <class T>
Tensor<T> mean(const Tensor<T>& x);

}  // namespace tempo::ops
