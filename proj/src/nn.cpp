#include "tempo/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tempo::nn {

template <class T>
Tensor<T> ParameterSet<T>::add(std::string name, Tensor<T> value, bool decay) {
  if (find(name) != nullptr) throw std::invalid_argument("duplicate parameter name " + name);
  auto impl = value.impl();
  impl->requires_grad = true;
  items_.push_back(Parameter<T>{std::move(name), value, decay});
  return value;
}

template <class T>
const Parameter<T>* ParameterSet<T>::find(std::string_view name) const {
  for (const auto& p : items_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template <class T>
std::size_t ParameterSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.numel();
  return n;
}

template <class T>
void ParameterSet<T>::zero_grad() {
  for (auto& p : items_) p.value.zero_grad();
}

template <class T>
Tensor<T> Initializer::normal(Shape shape, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(engine_));
  return Tensor<T>::from(std::move(shape), std::move(values));
}

template <class T>
Tensor<T> Initializer::xavier(std::size_t fan_in, std::size_t fan_out) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> values(fan_in * fan_out);
  for (auto& v : values) v = static_cast<T>(dist(engine_));
  return Tensor<T>::from({fan_in, fan_out}, std::move(values));
}

template <class T>
Tensor<T> apply_dropout(const Tensor<T>& x, double rate, const ForwardContext& ctx,
                        std::uint64_t site, std::size_t rows_per_sample) {
  if (!ctx.training || rate == 0.0) return x;
  return ops::dropout(x, rate,
                      ops::DropoutKey{ctx.seed, site, ctx.step, ctx.first_sample, rows_per_sample});
}

template <class T>
Linear<T> Linear<T>::create(ParameterSet<T>& params, const std::string& name, std::size_t in,
                            std::size_t out, Initializer& init, bool with_bias) {
  Linear l;
  l.weight = params.add(name + ".weight", init.xavier<T>(in, out), true);
  if (with_bias) l.bias = params.add(name + ".bias", Tensor<T>::zeros({out}), false);
  return l;
}

template <class T>
LayerNorm<T> LayerNorm<T>::create(ParameterSet<T>& params, const std::string& name, std::size_t d) {
  LayerNorm ln;
  ln.gain = params.add(name + ".gain", Tensor<T>::full({d}, T(1)), false);
  ln.bias = params.add(name + ".bias", Tensor<T>::zeros({d}), false);
  return ln;
}

template <class T>
EmbeddingTables<T> EmbeddingTables<T>::create(ParameterSet<T>& params, const std::string& name,
                                              std::size_t vocab, std::size_t max_len,
                                              std::size_t d, Initializer& init) {
  EmbeddingTables e;
  e.word = params.add(name + ".word", init.normal<T>({vocab, d}, 0.02), true);
  e.position = params.add(name + ".position", init.normal<T>({max_len, d}, 0.02), true);
  return e;
}

template <class T>
AttentionParams<T> AttentionParams<T>::create(ParameterSet<T>& params, const std::string& name,
                                              std::size_t d, std::size_t heads, Initializer& init,
                                              bool key_bias) {
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument(name + ": hidden size " + std::to_string(d) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  }
  if ((d / heads) % 2 != 0) {
    throw std::invalid_argument(name + ": head dimension " + std::to_string(d / heads) +
                                " must be even for rotary pairing");
  }
  AttentionParams a;
  a.query = Linear<T>::create(params, name + ".query", d, d, init);
  a.key = Linear<T>::create(params, name + ".key", d, d, init, key_bias);
  a.value = Linear<T>::create(params, name + ".value", d, d, init);
  a.output = Linear<T>::create(params, name + ".output", d, d, init);
  a.heads = heads;
  return a;
}

template <class T>
EncoderLayerParams<T> EncoderLayerParams<T>::create(ParameterSet<T>& params,
                                                    const std::string& name, std::size_t d,
                                                    std::size_t heads, std::size_t d_ff,
                                                    double dropout, Initializer& init) {
  if (d_ff < d) throw std::invalid_argument(name + ": d_ff must be at least d");
  EncoderLayerParams e;
  e.attention = AttentionParams<T>::create(params, name + ".attention", d, heads, init);
  e.attention_norm = LayerNorm<T>::create(params, name + ".attention_norm", d);
  e.ff_in = Linear<T>::create(params, name + ".ff_in", d, d_ff, init);
  e.ff_out = Linear<T>::create(params, name + ".ff_out", d_ff, d, init);
  e.output_norm = LayerNorm<T>::create(params, name + ".output_norm", d);
  e.dropout = dropout;
  return e;
}

template <class T>
Tensor<T> embed(const EmbeddingTables<T>& tables, std::span<const std::int32_t> ids,
                std::span<const std::size_t> positions) {
  if (ids.size() != positions.size() || ids.empty()) {
    throw std::invalid_argument("embed: ids and positions must be non-empty and equally long");
  }
  const std::size_t vocab = tables.word.shape()[0];
  const std::size_t max_len = tables.position.shape()[0];
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embed: token id " + std::to_string(ids[i]) + " at index " +
                              std::to_string(i) + " outside vocabulary of " + std::to_string(vocab));
    }
    if (positions[i] >= max_len) {
      throw std::out_of_range("embed: position " + std::to_string(positions[i]) + " at index " +
                              std::to_string(i) + " exceeds max length " + std::to_string(max_len));
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return ops::add_indexed_rows(ops::gather_rows(tables.word, std::span<const std::size_t>(rows)),
                               tables.position, positions);
}

template <class T>
Tensor<T> key_mask_bias(std::span<const std::uint8_t> key_mask, std::size_t groups,
                        std::size_t heads) {
  if (groups == 0 || key_mask.size() % groups != 0) {
    throw std::invalid_argument("attention: key mask length does not split into groups");
  }
  const std::size_t len = key_mask.size() / groups;
  std::vector<T> bias(groups * heads * len * len, T(0));
  for (std::size_t g = 0; g < groups; ++g) {
    bool any = false;
    for (std::size_t j = 0; j < len; ++j) any = any || key_mask[g * len + j] != 0;
    if (!any) {
      throw std::invalid_argument("attention: every key is masked in group " + std::to_string(g));
    }
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < len; ++i) {
        T* row = bias.data() + ((g * heads + h) * len + i) * len;
        for (std::size_t j = 0; j < len; ++j) {
          if (!key_mask[g * len + j]) row[j] = T(-1e9);
        }
      }
    }
  }
  return Tensor<T>::from({groups * heads * len, len}, std::move(bias));
}

template <class T>
Tensor<T> scaled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::uint8_t> key_mask, std::size_t groups,
                           std::size_t heads) {
  if (key_mask.size() != k.rows()) {
    throw std::invalid_argument("attention: key mask has " + std::to_string(key_mask.size()) +
                                " entries for " + std::to_string(k.rows()) + " keys");
  }
  const Tensor<T> bias = key_mask_bias<T>(key_mask, groups, heads);
  const std::size_t head_dim = q.cols() / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
  const Tensor<T> scores = ops::add(ops::attention_scores(q, k, groups, heads, scale), bias);
  return ops::attention_mix(ops::softmax_rows(scores), v, groups, heads);
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x, std::span<const std::uint8_t> key_mask,
                               const AttentionParams<T>& params, std::size_t groups) {
  const Tensor<T> q = params.query(x);
  const Tensor<T> k = params.key(x);
  const Tensor<T> v = params.value(x);
  return params.output(scaled_attention(q, k, v, key_mask, groups, params.heads));
}

template <class T>
Tensor<T> encoder_layer(const Tensor<T>& x, std::span<const std::uint8_t> key_mask,
                        const EncoderLayerParams<T>& params, std::size_t groups,
                        const ForwardContext& ctx, std::uint64_t site,
                        std::size_t rows_per_sample) {
  const Tensor<T> attn = multi_head_attention(x, key_mask, params.attention, groups);
  const Tensor<T> y = params.attention_norm(
      ops::add(x, apply_dropout(attn, params.dropout, ctx, site * 4 + 0, rows_per_sample)));
  const Tensor<T> ff = params.ff_out(ops::gelu(params.ff_in(y)));
  return params.output_norm(
      ops::add(y, apply_dropout(ff, params.dropout, ctx, site * 4 + 1, rows_per_sample)));
}

template <class T>
Tensor<T> cls_pool(const Tensor<T>& h_cls, const Linear<T>& pooler) {
  return ops::tanh(pooler(h_cls));
}

#define TEMPO_INSTANTIATE_NN(T)                                                                    \
  template class ParameterSet<T>;                                                                  \
  template Tensor<T> Initializer::normal<T>(Shape, double);                                        \
  template Tensor<T> Initializer::xavier<T>(std::size_t, std::size_t);                             \
  template Tensor<T> apply_dropout(const Tensor<T>&, double, const ForwardContext&, std::uint64_t, \
                                   std::size_t);                                                   \
  template struct Linear<T>;                                                                       \
  template struct LayerNorm<T>;                                                                    \
  template struct EmbeddingTables<T>;                                                              \
  template struct AttentionParams<T>;                                                              \
  template struct EncoderLayerParams<T>;                                                           \
  template Tensor<T> embed(const EmbeddingTables<T>&, std::span<const std::int32_t>,              \
                           std::span<const std::size_t>);                                          \
  template Tensor<T> key_mask_bias<T>(std::span<const std::uint8_t>, std::size_t, std::size_t);    \
  template Tensor<T> scaled_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                      std::span<const std::uint8_t>, std::size_t, std::size_t);    \
  template Tensor<T> multi_head_attention(const Tensor<T>&, std::span<const std::uint8_t>,         \
                                          const AttentionParams<T>&, std::size_t);                 \
  template Tensor<T> encoder_layer(const Tensor<T>&, std::span<const std::uint8_t>,                \
                                   const EncoderLayerParams<T>&, std::size_t,                      \
                                   const ForwardContext&, std::uint64_t, std::size_t);             \
  template Tensor<T> cls_pool(const Tensor<T>&, const Linear<T>&);

TEMPO_INSTANTIATE_NN(float)
TEMPO_INSTANTIATE_NN(double)

#undef TEMPO_INSTANTIATE_NN

}  // namespace tempo::nn
