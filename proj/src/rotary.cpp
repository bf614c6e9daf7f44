#include "tempo/rotary.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "tempo/ops.hpp"

namespace tempo::rotary {

RotaryAngles::RotaryAngles(std::size_t head_dim) {
  if (head_dim == 0 || head_dim % 2 != 0) {
    throw std::invalid_argument("rotary: dimension must be even and positive, got " +
                                std::to_string(head_dim));
  }
  theta_.resize(head_dim / 2);
  for (std::size_t i = 0; i < theta_.size(); ++i) {
    theta_[i] = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
  }
}

template <class T>
Tensor<T> rotary_apply(const Tensor<T>& x, std::span<const double> phases, std::size_t head_dim) {
  const RotaryAngles angles(head_dim);
  const std::size_t d = x.cols(), rows = x.rows();
  if (d % head_dim != 0) {
    throw std::invalid_argument("rotary_apply: width " + std::to_string(d) +
                                " is not a multiple of head dimension " + std::to_string(head_dim));
  }
  if (phases.size() != rows) {
    throw std::invalid_argument("rotary_apply: " + std::to_string(phases.size()) + " phases for " +
                                std::to_string(rows) + " rows");
  }
  const std::size_t pairs = head_dim / 2;
  // cos/sin per (row, pair), shared by every head of the row.
  std::vector<T> cs(rows * pairs), sn(rows * pairs);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!std::isfinite(phases[r])) throw std::invalid_argument("rotary_apply: non-finite phase");
    for (std::size_t i = 0; i < pairs; ++i) {
      const double angle = phases[r] * angles.theta()[i];
      cs[r * pairs + i] = static_cast<T>(std::cos(angle));
      sn[r * pairs + i] = static_cast<T>(std::sin(angle));
    }
  }
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h0 = 0; h0 < d; h0 += head_dim) {
      for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t a = r * d + h0 + 2 * i;
        const T c = cs[r * pairs + i], s = sn[r * pairs + i];
        out[a] = xs[a] * c - xs[a + 1] * s;
        out[a + 1] = xs[a] * s + xs[a + 1] * c;
      }
    }
  }
  return detail::make_result<T>(
      "rotary_apply", x.shape(), std::move(out), {x},
      [x, cs = std::move(cs), sn = std::move(sn), rows, d, head_dim, pairs](std::span<const T> g,
                                                                            std::span<const T>) {
        auto gx = detail::grad_buffer(*x.impl());
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t h0 = 0; h0 < d; h0 += head_dim) {
            for (std::size_t i = 0; i < pairs; ++i) {
              const std::size_t a = r * d + h0 + 2 * i;
              const T c = cs[r * pairs + i], s = sn[r * pairs + i];
              gx[a] += g[a] * c + g[a + 1] * s;
              gx[a + 1] += -g[a] * s + g[a + 1] * c;
            }
          }
        }
      });
}

template <class T>
Tensor<T> rope_scores(const Tensor<T>& q, const Tensor<T>& k, std::span<const double> phases) {
  if (q.shape() != k.shape() || q.dim() != 2) {
    throw std::invalid_argument("rope_scores: q " + shape_str(q.shape()) + " and k " +
                                shape_str(k.shape()) + " must be equal-shaped matrices");
  }
  const std::size_t dh = q.cols();
  return ops::attention_scores(rotary_apply(q, phases, dh), rotary_apply(k, phases, dh), 1, 1, T(1));
}

std::vector<double> log_time_transform(std::span<const double> timestamps, double anchor) {
  std::vector<double> tau(timestamps.size());
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    if (!std::isfinite(timestamps[i])) {
      throw std::invalid_argument("log_time_transform: timestamp " + std::to_string(i) +
                                  " is missing or not finite");
    }
    tau[i] = std::log1p(std::max(0.0, timestamps[i] - anchor));
  }
  return tau;
}

std::vector<double> log_time_before(std::span<const double> timestamps, double anchor) {
  std::vector<double> tau(timestamps.size());
  for (std::size_t i = 0; i < timestamps.size(); ++i) {
    if (!std::isfinite(timestamps[i])) {
      throw std::invalid_argument("log_time_before: timestamp " + std::to_string(i) +
                                  " is missing or not finite");
    }
    tau[i] = -std::log1p(std::max(0.0, anchor - timestamps[i]));
  }
  return tau;
}

template <class T>
Tensor<T> temporal_rotary_mha(const Tensor<T>& cls, std::optional<std::span<const double>> phases,
                              std::span<const std::uint8_t> key_mask,
                              const nn::AttentionParams<T>& params, std::size_t groups) {
  Tensor<T> q = params.query(cls);
  Tensor<T> k = params.key(cls);
  const Tensor<T> v = params.value(cls);
  if (phases) {
    q = rotary_apply(q, *phases, params.head_dim());
    k = rotary_apply(k, *phases, params.head_dim());
  }
  return params.output(nn::scaled_attention(q, k, v, key_mask, groups, params.heads));
}

#define TEMPO_INSTANTIATE_ROTARY(T)                                                              \
  template Tensor<T> rotary_apply(const Tensor<T>&, std::span<const double>, std::size_t);       \
  template Tensor<T> rope_scores(const Tensor<T>&, const Tensor<T>&, std::span<const double>);   \
  template Tensor<T> temporal_rotary_mha(const Tensor<T>&, std::optional<std::span<const double>>, \
                                         std::span<const std::uint8_t>,                          \
                                         const nn::AttentionParams<T>&, std::size_t);

TEMPO_INSTANTIATE_ROTARY(float)
TEMPO_INSTANTIATE_ROTARY(double)

#undef TEMPO_INSTANTIATE_ROTARY

}  // namespace tempo::rotary
