#pragma once

// Rotary position embeddings and the temporal rotary multi-head attention
// used over the per-post [CLS] vectors of a stream.
//
// A row with phase p has each coordinate pair (2i, 2i+1) of every head
// rotated by the angle p * theta_i, theta_i = 10000^(-2i/head_dim). Dot
// products between rotated rows then depend only on phase differences, so
// feeding log-transformed timestamps as phases makes attention a function of
// elapsed time instead of sequence distance.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "tempo/nn.hpp"
#include "tempo/tensor.hpp"

namespace tempo::rotary {

class RotaryAngles {
 public:
  // Throws std::invalid_argument for an odd or zero dimension.
  explicit RotaryAngles(std::size_t head_dim);

  std::size_t head_dim() const { return 2 * theta_.size(); }
  std::span<const double> theta() const { return theta_; }

 private:
  std::vector<double> theta_;
};

// x is (n x d) with d a multiple of head_dim; phases has one entry per row.
template <class T>
Tensor<T> rotary_apply(const Tensor<T>& x, std::span<const double> phases, std::size_t head_dim);

// score[m][n] = (R(phase_m) q_m) . (R(phase_n) k_n) for single-head q, k (K x d_h).
template <class T>
Tensor<T> rope_scores(const Tensor<T>& q, const Tensor<T>& k, std::span<const double> phases);

// tau_k = ln(1 + max(0, t_k - anchor)).
std::vector<double> log_time_transform(std::span<const double> timestamps, double anchor);

// Mirror image for an anchor at or after every timestamp:
// tau_k = -ln(1 + max(0, anchor - t_k)).
std::vector<double> log_time_before(std::span<const double> timestamps, double anchor);

// Multi-head self-attention over `groups` sequences of CLS vectors with q and
// k phase-rotated per row. No feed-forward and no normalization. With no
// phases it is exactly nn::multi_head_attention.
template <class T>
Tensor<T> temporal_rotary_mha(const Tensor<T>& cls, std::optional<std::span<const double>> phases,
                              std::span<const std::uint8_t> key_mask,
                              const nn::AttentionParams<T>& params, std::size_t groups);

}  // namespace tempo::rotary
