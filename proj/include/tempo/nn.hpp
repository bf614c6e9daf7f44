#pragma once

// Transformer building blocks over batches of independent sequences
// ("groups"). A (groups*L x d) tensor holds `groups` sequences of L rows.

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tempo/ops.hpp"
#include "tempo/tensor.hpp"

namespace tempo::nn {

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  // False for biases and layer-norm affine terms.
  bool decay = true;
};

template <class T>
class ParameterSet {
 public:
  Tensor<T> add(std::string name, Tensor<T> value, bool decay);

  const std::vector<Parameter<T>>& items() const { return items_; }
  std::vector<Parameter<T>>& items() { return items_; }
  const Parameter<T>* find(std::string_view name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Parameter<T>> items_;
};

// Deterministic initializer driven by one engine.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : engine_(seed) {}
  template <class T>
  Tensor<T> normal(Shape shape, double stddev);
  template <class T>
  Tensor<T> xavier(std::size_t fan_in, std::size_t fan_out);

 private:
  std::mt19937_64 engine_;
};

struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  // Index of the first sample of this batch within the optimizer step.
  std::uint64_t first_sample = 0;
};

template <class T>
Tensor<T> apply_dropout(const Tensor<T>& x, double rate, const ForwardContext& ctx,
                        std::uint64_t site, std::size_t rows_per_sample);

template <class T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // out; undefined when created without bias

  static Linear create(ParameterSet<T>& params, const std::string& name, std::size_t in,
                       std::size_t out, Initializer& init, bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  static constexpr double kEps = 1e-12;
  static LayerNorm create(ParameterSet<T>& params, const std::string& name, std::size_t d);
  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::layer_norm(x, gain, bias, static_cast<T>(kEps));
  }
};

template <class T>
struct EmbeddingTables {
  Tensor<T> word;      // vocab x d
  Tensor<T> position;  // max_len x d

  static EmbeddingTables create(ParameterSet<T>& params, const std::string& name,
                                std::size_t vocab, std::size_t max_len, std::size_t d,
                                Initializer& init);
};

template <class T>
struct AttentionParams {
  Linear<T> query, key, value, output;
  std::size_t heads = 1;

  // A key bias only shifts each query's scores by a constant, which softmax
  // discards, unless keys are rotated afterwards; rotary attention asks for it.
  static AttentionParams create(ParameterSet<T>& params, const std::string& name, std::size_t d,
                                std::size_t heads, Initializer& init, bool key_bias = false);
  std::size_t dim() const { return query.weight.shape()[1]; }
  std::size_t head_dim() const { return dim() / heads; }
};

template <class T>
struct EncoderLayerParams {
  AttentionParams<T> attention;
  LayerNorm<T> attention_norm;
  Linear<T> ff_in, ff_out;
  LayerNorm<T> output_norm;
  double dropout = 0.0;

  static EncoderLayerParams create(ParameterSet<T>& params, const std::string& name,
                                   std::size_t d, std::size_t heads, std::size_t d_ff,
                                   double dropout, Initializer& init);
};

// Row k = word[ids[k]] + position[positions[k]].
template <class T>
Tensor<T> embed(const EmbeddingTables<T>& tables, std::span<const std::int32_t> ids,
                std::span<const std::size_t> positions);

// Additive mask (groups*heads*L x L): 0 for valid keys, -1e9 for masked ones.
// Throws if some group has no valid key.
template <class T>
Tensor<T> key_mask_bias(std::span<const std::uint8_t> key_mask, std::size_t groups,
                        std::size_t heads);

// softmax(q k^T / sqrt(head_dim) + mask) v per group and head, on already
// projected q, k, v. Returns the mixed values before the output map.
template <class T>
Tensor<T> scaled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::uint8_t> key_mask, std::size_t groups,
                           std::size_t heads);

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x, std::span<const std::uint8_t> key_mask,
                               const AttentionParams<T>& params, std::size_t groups);

// Post-norm layer: y = LN(x + Drop(MHA(x))); out = LN(y + Drop(FFN(y))), GELU FFN.
// `site` distinguishes dropout streams between layers; `rows_per_sample` is
// how many consecutive rows of x belong to one training sample.
template <class T>
Tensor<T> encoder_layer(const Tensor<T>& x, std::span<const std::uint8_t> key_mask,
                        const EncoderLayerParams<T>& params, std::size_t groups,
                        const ForwardContext& ctx, std::uint64_t site,
                        std::size_t rows_per_sample);

// tanh(W h + b)
template <class T>
Tensor<T> cls_pool(const Tensor<T>& h_cls, const Linear<T>& pooler);

}  // namespace tempo::nn
