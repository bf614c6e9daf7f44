#include "tempo/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "tempo/ops.hpp"
#include "tempo/rotary.hpp"

namespace tempo::model {

using nlohmann::json;

std::string to_string(TimeMode m) {
  switch (m) {
    case TimeMode::temporal: return "temporal";
    case TimeMode::positional: return "positional";
    case TimeMode::none: return "none";
  }
  return "?";
}

std::string to_string(TimeTransform t) { return t == TimeTransform::log1p ? "log1p" : "identity"; }

std::string to_string(TimeAnchor a) { return a == TimeAnchor::first ? "first" : "current"; }

std::string to_string(ModelKind k) {
  return k == ModelKind::tempoformer ? "tempoformer" : "ro_tempoformer";
}

TimeMode parse_time_mode(std::string_view s) {
  if (s == "temporal") return TimeMode::temporal;
  if (s == "positional") return TimeMode::positional;
  if (s == "none") return TimeMode::none;
  throw std::invalid_argument("unknown time mode \"" + std::string(s) + "\"");
}

TimeTransform parse_time_transform(std::string_view s) {
  if (s == "log1p") return TimeTransform::log1p;
  if (s == "identity") return TimeTransform::identity;
  throw std::invalid_argument("unknown time transform \"" + std::string(s) + "\"");
}

TimeAnchor parse_time_anchor(std::string_view s) {
  if (s == "first") return TimeAnchor::first;
  if (s == "current") return TimeAnchor::current;
  throw std::invalid_argument("unknown time anchor \"" + std::string(s) + "\"");
}

ModelKind parse_model_kind(std::string_view s) {
  if (s == "tempoformer") return ModelKind::tempoformer;
  if (s == "ro_tempoformer") return ModelKind::ro_tempoformer;
  throw std::invalid_argument("unknown model kind \"" + std::string(s) + "\"");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("model config: " + what); };
  if (d_model == 0 || heads == 0 || d_ff == 0 || max_len == 0 || window == 0 || class_count == 0 ||
      head_hidden == 0) {
    fail("sizes must be positive");
  }
  if (vocab <= data::Vocabulary::kSpecialCount) fail("vocab must include tokens beyond the specials");
  if (max_len < 2) fail("max_len must hold [CLS] and [SEP]");
  if (d_model % heads != 0) fail("d_model must be divisible by heads");
  if ((d_model / heads) % 2 != 0) fail("head dimension must be even");
  if (d_ff < d_model) fail("d_ff must be at least d_model");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

json to_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"heads", c.heads},
              {"d_ff", c.d_ff},
              {"vocab", c.vocab},
              {"max_len", c.max_len},
              {"window", c.window},
              {"local_layers", c.local_layers},
              {"class_count", c.class_count},
              {"head_hidden", c.head_hidden},
              {"dropout", c.dropout},
              {"time_mode", to_string(c.time_mode)},
              {"time_transform", to_string(c.time_transform)},
              {"time_anchor", to_string(c.time_anchor)},
              {"kind", to_string(c.kind)}};
}

json to_json(const AblationFlags& f) {
  return json{{"no_temporal_rope", f.no_temporal_rope},
              {"no_rope_mha", f.no_rope_mha},
              {"no_stream_embed_s11", f.no_stream_embed_s11},
              {"no_stream_embed_s10_s11", f.no_stream_embed_s10_s11},
              {"no_gate_norm", f.no_gate_norm}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "d_model") c.d_model = v.get<std::size_t>();
    else if (key == "heads") c.heads = v.get<std::size_t>();
    else if (key == "d_ff") c.d_ff = v.get<std::size_t>();
    else if (key == "vocab") c.vocab = v.get<std::size_t>();
    else if (key == "max_len") c.max_len = v.get<std::size_t>();
    else if (key == "window") c.window = v.get<std::size_t>();
    else if (key == "local_layers") c.local_layers = v.get<std::size_t>();
    else if (key == "class_count") c.class_count = v.get<std::size_t>();
    else if (key == "head_hidden") c.head_hidden = v.get<std::size_t>();
    else if (key == "dropout") c.dropout = v.get<double>();
    else if (key == "time_mode") c.time_mode = parse_time_mode(v.get<std::string>());
    else if (key == "time_transform") c.time_transform = parse_time_transform(v.get<std::string>());
    else if (key == "time_anchor") c.time_anchor = parse_time_anchor(v.get<std::string>());
    else if (key == "kind") c.kind = parse_model_kind(v.get<std::string>());
    else throw std::invalid_argument("model config: unknown key \"" + key + "\"");
  }
  return c;
}

AblationFlags ablation_flags_from_json(const json& j) {
  AblationFlags f;
  for (const auto& [key, v] : j.items()) {
    if (key == "no_temporal_rope") f.no_temporal_rope = v.get<bool>();
    else if (key == "no_rope_mha") f.no_rope_mha = v.get<bool>();
    else if (key == "no_stream_embed_s11") f.no_stream_embed_s11 = v.get<bool>();
    else if (key == "no_stream_embed_s10_s11") f.no_stream_embed_s10_s11 = v.get<bool>();
    else if (key == "no_gate_norm") f.no_gate_norm = v.get<bool>();
    else throw std::invalid_argument("ablation flags: unknown key \"" + key + "\"");
  }
  return f;
}

PhaseMode resolve_phase_mode(const ModelConfig& config, const AblationFlags& flags, bool has_times) {
  if (flags.no_rope_mha || config.time_mode == TimeMode::none) return PhaseMode::vanilla;
  if (flags.no_temporal_rope || config.time_mode == TimeMode::positional || !has_times) {
    return PhaseMode::positional;
  }
  return PhaseMode::temporal;
}

std::vector<double> stream_phases(const data::StreamBatch& batch, PhaseMode mode,
                                  TimeTransform transform, TimeAnchor anchor) {
  const std::size_t w = batch.window;
  std::vector<double> phases(batch.size * w, 0.0);
  if (mode == PhaseMode::vanilla) return phases;
  for (std::size_t b = 0; b < batch.size; ++b) {
    const std::size_t first = batch.first_real_slot(b);
    if (first == w) continue;
    if (mode == PhaseMode::positional) {
      for (std::size_t p = first; p < w; ++p) phases[b * w + p] = static_cast<double>(p - first);
      continue;
    }
    const std::span<const double> times(batch.times.data() + b * w + first, w - first);
    std::vector<double> tau;
    if (transform == TimeTransform::log1p) {
      tau = anchor == TimeAnchor::first ? rotary::log_time_transform(times, times.front())
                                        : rotary::log_time_before(times, times.back());
    } else {
      const double origin = anchor == TimeAnchor::first ? times.front() : times.back();
      for (double t : times) {
        if (!std::isfinite(t)) throw std::invalid_argument("stream_phases: missing timestamp");
        tau.push_back(anchor == TimeAnchor::first ? std::max(0.0, t - origin) : -std::max(0.0, origin - t));
      }
    }
    std::copy(tau.begin(), tau.end(), phases.begin() + static_cast<std::ptrdiff_t>(b * w + first));
  }
  return phases;
}

std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t window, std::size_t max_len) {
  std::vector<std::size_t> rows(batch * window);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i * max_len;
  return rows;
}

std::vector<std::size_t> current_slots(std::size_t batch, std::size_t window) {
  std::vector<std::size_t> rows(batch);
  for (std::size_t b = 0; b < batch; ++b) rows[b] = b * window + window - 1;
  return rows;
}

namespace {

// Dropout sites; encoder layer i uses sites 4*(i+1) and 4*(i+1)+1.
constexpr std::uint64_t kSiteEmbed = 0;
constexpr std::uint64_t kSiteHeadIn = 1;
constexpr std::uint64_t kSiteHeadHidden = 2;

// Slot index of every flattened token row.
std::vector<std::size_t> token_slots(std::size_t batch, std::size_t window, std::size_t max_len) {
  std::vector<std::size_t> slots(batch * window * max_len);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = (i / max_len) % window;
  return slots;
}

}  // namespace

template <class T>
TempoFormer<T>::TempoFormer(const ModelConfig& config, const AblationFlags& flags,
                            std::uint64_t init_seed)
    : config_(config), flags_(flags) {
  config_.validate();
  if (flags_.no_stream_embed_s10_s11) flags_.no_stream_embed_s11 = true;
  const std::size_t d = config_.d_model;
  nn::Initializer init(init_seed);
  auto& p = params_;
  m_.embeddings = nn::EmbeddingTables<T>::create(p, "embeddings", config_.vocab, config_.max_len, d, init);
  m_.embed_norm = nn::LayerNorm<T>::create(p, "embeddings.norm", d);
  for (std::size_t l = 0; l < config_.local_layers; ++l) {
    m_.local.push_back(nn::EncoderLayerParams<T>::create(p, "local." + std::to_string(l), d,
                                                         config_.heads, config_.d_ff,
                                                         config_.dropout, init));
  }
  m_.pooler = nn::Linear<T>::create(p, "pooler", d, d, init);
  if (!flags_.skip_s10()) m_.s10 = p.add("stream.s10", init.normal<T>({config_.window, d}, 0.02), true);
  m_.stream_layer = nn::EncoderLayerParams<T>::create(p, "stream.layer", d, config_.heads, config_.d_ff,
                                                      config_.dropout, init);
  m_.stream_mha = nn::AttentionParams<T>::create(p, "stream.mha", d, config_.heads, init, true);
  if (!flags_.skip_s11()) m_.s11 = p.add("context.s11", init.normal<T>({config_.window, d}, 0.02), true);
  m_.context_layer = nn::EncoderLayerParams<T>::create(p, "context.layer", d, config_.heads,
                                                       config_.d_ff, config_.dropout, init);
  m_.context_mha = nn::AttentionParams<T>::create(p, "context.mha", d, config_.heads, init, true);
  if (!flags_.no_gate_norm) {
    m_.gate = nn::Linear<T>::create(p, "gate.linear", 2 * d, d, init);
    m_.gate_norm = nn::LayerNorm<T>::create(p, "gate.norm", d);
  }
  m_.fc1 = nn::Linear<T>::create(p, "head.fc1", 2 * d, config_.head_hidden, init);
  m_.fc2 = nn::Linear<T>::create(p, "head.fc2", config_.head_hidden, config_.head_hidden, init);
  m_.out = nn::Linear<T>::create(p, "head.out", config_.head_hidden, config_.class_count, init);
}

template <class T>
void TempoFormer<T>::check_batch(const data::StreamBatch& batch) const {
  if (batch.size == 0) throw std::invalid_argument("model: empty batch");
  if (batch.window != config_.window || batch.max_len != config_.max_len) {
    throw std::invalid_argument("model: batch shape (window " + std::to_string(batch.window) +
                                ", max_len " + std::to_string(batch.max_len) +
                                ") does not match the model (window " +
                                std::to_string(config_.window) + ", max_len " +
                                std::to_string(config_.max_len) + ")");
  }
  const std::size_t posts = batch.size * batch.window;
  if (batch.post_mask.size() != posts || batch.times.size() != posts ||
      batch.token_ids.size() != posts * batch.max_len ||
      batch.token_mask.size() != posts * batch.max_len) {
    throw std::invalid_argument("model: batch time/mask lengths are inconsistent");
  }
  for (std::size_t b = 0; b < batch.size; ++b) {
    if (!batch.post_mask[b * batch.window + batch.window - 1]) {
      throw std::invalid_argument("model: sample " + std::to_string(b) + " has no current post");
    }
  }
}

template <class T>
PhaseMode TempoFormer<T>::phase_mode(const data::StreamBatch& batch) const {
  return resolve_phase_mode(config_, flags_, batch.has_times);
}

template <class T>
typename TempoFormer<T>::LocalOutput TempoFormer<T>::encode_local(const data::StreamBatch& batch,
                                                                  const nn::ForwardContext& ctx) const {
  check_batch(batch);
  const std::size_t w = batch.window, K = batch.max_len, posts = batch.size * w;
  const std::size_t per_sample = w * K;
  std::vector<std::size_t> positions(posts * K);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i % K;
  Tensor<T> x = nn::embed(m_.embeddings, std::span<const std::int32_t>(batch.token_ids),
                          std::span<const std::size_t>(positions));
  x = nn::apply_dropout(m_.embed_norm(x), config_.dropout, ctx, kSiteEmbed, per_sample);
  for (std::size_t l = 0; l < m_.local.size(); ++l) {
    x = nn::encoder_layer(x, std::span<const std::uint8_t>(batch.token_mask), m_.local[l], posts, ctx,
                          l + 1, per_sample);
  }
  std::vector<std::size_t> current = current_slots(batch.size, w);
  for (auto& r : current) r *= K;
  Tensor<T> c_local = nn::cls_pool(ops::gather_rows(x, std::span<const std::size_t>(current)), m_.pooler);
  return {x, c_local};
}

template <class T>
typename TempoFormer<T>::StreamOutput TempoFormer<T>::encode_stream(
    const Tensor<T>& h10, const data::StreamBatch& batch, const nn::ForwardContext& ctx) const {
  check_batch(batch);
  const std::size_t w = batch.window, K = batch.max_len, posts = batch.size * w;
  if (h10.rows() != posts * K) throw std::invalid_argument("encode_stream: hidden states do not match the batch");
  Tensor<T> x = h10;
  if (m_.s10) {
    const auto slots = token_slots(batch.size, w, K);
    x = ops::add_indexed_rows(x, *m_.s10, std::span<const std::size_t>(slots));
  }
  const Tensor<T> encoded = nn::encoder_layer(x, std::span<const std::uint8_t>(batch.token_mask),
                                              m_.stream_layer, posts, ctx, m_.local.size() + 1, w * K);
  const auto rows = cls_rows(batch.size, w, K);
  const auto phases = stream_phases(batch, phase_mode(batch), config_.time_transform, config_.time_anchor);
  std::optional<std::span<const double>> ph;
  if (phase_mode(batch) != PhaseMode::vanilla) ph = std::span<const double>(phases);
  const Tensor<T> mixed = rotary::temporal_rotary_mha(
      ops::gather_rows(encoded, std::span<const std::size_t>(rows)), ph,
      std::span<const std::uint8_t>(batch.post_mask), m_.stream_mha, batch.size);
  return {encoded, ops::replace_rows(encoded, std::span<const std::size_t>(rows), mixed)};
}

template <class T>
typename TempoFormer<T>::ContextOutput TempoFormer<T>::encode_context(
    const Tensor<T>& h11, const data::StreamBatch& batch, const nn::ForwardContext& ctx) const {
  check_batch(batch);
  const std::size_t w = batch.window, K = batch.max_len, posts = batch.size * w;
  if (h11.rows() != posts * K) throw std::invalid_argument("encode_context: hidden states do not match the batch");
  Tensor<T> x = h11;
  if (m_.s11) {
    const auto slots = token_slots(batch.size, w, K);
    x = ops::add_indexed_rows(x, *m_.s11, std::span<const std::size_t>(slots));
  }
  ContextOutput out;
  out.h12 = nn::encoder_layer(x, std::span<const std::uint8_t>(batch.token_mask), m_.context_layer,
                              posts, ctx, m_.local.size() + 2, w * K);
  const auto rows = cls_rows(batch.size, w, K);
  out.h12_cls = ops::gather_rows(out.h12, std::span<const std::size_t>(rows));
  const auto phases = stream_phases(batch, phase_mode(batch), config_.time_transform, config_.time_anchor);
  std::optional<std::span<const double>> ph;
  if (phase_mode(batch) != PhaseMode::vanilla) ph = std::span<const double>(phases);
  const Tensor<T> mixed = rotary::temporal_rotary_mha(
      out.h12_cls, ph, std::span<const std::uint8_t>(batch.post_mask), m_.context_mha, batch.size);
  out.h12_replaced = ops::replace_rows(out.h12, std::span<const std::size_t>(rows), mixed);
  out.h12_prime_cls = ops::gather_rows(out.h12_replaced, std::span<const std::size_t>(rows));
  return out;
}

template <class T>
Tensor<T> TempoFormer<T>::gate_fuse(const Tensor<T>& h12_cls, const Tensor<T>& h12_prime_cls) const {
  if (h12_cls.shape() != h12_prime_cls.shape()) {
    throw std::invalid_argument("gate_fuse: shapes " + shape_str(h12_cls.shape()) + " and " +
                                shape_str(h12_prime_cls.shape()) + " differ");
  }
  if (!m_.gate) return h12_prime_cls;
  const Tensor<T> g = ops::sigmoid((*m_.gate)(ops::concat_cols(h12_cls, h12_prime_cls)));
  // (1-g)*a + g*b, written as a + g*(b-a)
  return (*m_.gate_norm)(ops::add(h12_cls, ops::mul(g, ops::sub(h12_prime_cls, h12_cls))));
}

template <class T>
Tensor<T> TempoFormer<T>::head(const Tensor<T>& z, const nn::ForwardContext& ctx) const {
  Tensor<T> h = nn::apply_dropout(z, config_.dropout, ctx, kSiteHeadIn, 1);
  h = ops::relu(m_.fc1(h));
  h = nn::apply_dropout(h, config_.dropout, ctx, kSiteHeadHidden, 1);
  h = ops::relu(m_.fc2(h));
  return m_.out(h);
}

template <class T>
Tensor<T> TempoFormer<T>::classify(const Tensor<T>& c_local, const Tensor<T>& c_global_current,
                                   const nn::ForwardContext& ctx) const {
  return head(ops::concat_cols(c_local, c_global_current), ctx);
}

template <class T>
typename TempoFormer<T>::Trace TempoFormer<T>::trace(const data::StreamBatch& batch,
                                                     const nn::ForwardContext& ctx) const {
  Trace t;
  t.local = encode_local(batch, ctx);
  t.stream = encode_stream(t.local.h10, batch, ctx);
  t.context = encode_context(t.stream.replaced, batch, ctx);
  t.c_global = gate_fuse(t.context.h12_cls, t.context.h12_prime_cls);
  const auto current = current_slots(batch.size, batch.window);
  t.logits = classify(t.local.c_local,
                      ops::gather_rows(t.c_global, std::span<const std::size_t>(current)), ctx);
  return t;
}

template <class T>
Tensor<T> TempoFormer<T>::forward(const data::StreamBatch& batch, const nn::ForwardContext& ctx) const {
  return trace(batch, ctx).logits;
}

template <class T>
RoTempoFormer<T>::RoTempoFormer(const ModelConfig& config, const AblationFlags& flags,
                                std::uint64_t init_seed)
    : TempoFormer<T>(config, flags, init_seed) {
  const std::size_t d = this->config_.d_model, hidden = d;
  nn::Initializer init(init_seed ^ 0x4C53544DULL);
  for (auto [name, lstm] : {std::pair{"recurrent.forward", &fwd_}, std::pair{"recurrent.backward", &bwd_}}) {
    lstm->input = nn::Linear<T>::create(this->params_, std::string(name) + ".input", d, 4 * hidden, init);
    lstm->recurrent = this->params_.add(std::string(name) + ".recurrent", init.xavier<T>(hidden, 4 * hidden), true);
  }
}

template <class T>
Tensor<T> RoTempoFormer<T>::forward(const data::StreamBatch& batch, const nn::ForwardContext& ctx) const {
  const auto local = this->encode_local(batch, ctx);
  const auto stream = this->encode_stream(local.h10, batch, ctx);
  const auto context = this->encode_context(stream.replaced, batch, ctx);
  const Tensor<T> pooled = nn::cls_pool(this->gate_fuse(context.h12_cls, context.h12_prime_cls),
                                        this->m_.pooler);  // B*w x d
  const std::size_t B = batch.size, w = batch.window, H = this->config_.d_model;

  auto run = [&](const LstmParams& lstm, bool reverse) {
    Tensor<T> h = Tensor<T>::zeros({B, H}), c = Tensor<T>::zeros({B, H});
    for (std::size_t step = 0; step < w; ++step) {
      const std::size_t slot = reverse ? w - 1 - step : step;
      std::vector<std::size_t> rows(B);
      std::vector<T> keep(B * H);
      for (std::size_t b = 0; b < B; ++b) {
        rows[b] = b * w + slot;
        std::fill_n(keep.begin() + static_cast<std::ptrdiff_t>(b * H), H,
                    batch.post_mask[b * w + slot] ? T(1) : T(0));
      }
      const Tensor<T> x = ops::gather_rows(pooled, std::span<const std::size_t>(rows));
      const Tensor<T> gates = ops::add(lstm.input(x), ops::matmul(h, lstm.recurrent));
      const Tensor<T> i = ops::sigmoid(ops::slice_cols(gates, 0, H));
      const Tensor<T> f = ops::sigmoid(ops::slice_cols(gates, H, 2 * H));
      const Tensor<T> g = ops::tanh(ops::slice_cols(gates, 2 * H, 3 * H));
      const Tensor<T> o = ops::sigmoid(ops::slice_cols(gates, 3 * H, 4 * H));
      const Tensor<T> c_new = ops::add(ops::mul(f, c), ops::mul(i, g));
      const Tensor<T> h_new = ops::mul(o, ops::tanh(c_new));
      const Tensor<T> m = Tensor<T>::from({B, H}, std::move(keep));
      c = ops::add(c, ops::mul(m, ops::sub(c_new, c)));
      h = ops::add(h, ops::mul(m, ops::sub(h_new, h)));
    }
    return h;
  };
  return this->head(ops::concat_cols(run(fwd_, false), run(bwd_, true)), ctx);
}

template <class T>
std::unique_ptr<Classifier<T>> make_classifier(const ModelConfig& config, const AblationFlags& flags,
                                               std::uint64_t init_seed) {
  if (config.kind == ModelKind::ro_tempoformer) {
    return std::make_unique<RoTempoFormer<T>>(config, flags, init_seed);
  }
  return std::make_unique<TempoFormer<T>>(config, flags, init_seed);
}

template class TempoFormer<float>;
template class TempoFormer<double>;
template class RoTempoFormer<float>;
template class RoTempoFormer<double>;
template std::unique_ptr<Classifier<float>> make_classifier(const ModelConfig&, const AblationFlags&, std::uint64_t);
template std::unique_ptr<Classifier<double>> make_classifier(const ModelConfig&, const AblationFlags&, std::uint64_t);

}  // namespace tempo::model
