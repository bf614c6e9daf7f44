#pragma once

// TempoFormer: per-post local encoding, a stream layer and a context layer
// whose [CLS] vectors exchange information through temporal rotary MHA,
// gated fusion, and a two-layer classification head.
//
// Batches use the layout of data::StreamBatch: B samples of w post slots of
// K tokens, flattened to (B*w*K x d) hidden states. The current post of every
// sample sits at slot w-1.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/data.hpp"
#include "tempo/nn.hpp"
#include "tempo/tensor.hpp"

namespace tempo::model {

enum class TimeMode { temporal, positional, none };
// How temporal phases are derived from a timestamp offset dt: ln(1 + dt) or
// dt itself.
enum class TimeTransform { log1p, identity };
// Where offsets are measured from. `first` gives t_k - t_first >= 0.
// `current` gives -(t_cur - t_k) <= 0, so the current post's query sees
// each key at a phase that depends on its own gap alone.
enum class TimeAnchor { first, current };
enum class ModelKind { tempoformer, ro_tempoformer };

std::string to_string(TimeMode m);
std::string to_string(TimeTransform t);
std::string to_string(TimeAnchor a);
std::string to_string(ModelKind k);
TimeMode parse_time_mode(std::string_view s);
TimeTransform parse_time_transform(std::string_view s);
TimeAnchor parse_time_anchor(std::string_view s);
ModelKind parse_model_kind(std::string_view s);

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab = 0;
  std::size_t max_len = 64;
  std::size_t window = 10;
  std::size_t local_layers = 2;
  std::size_t class_count = 2;
  std::size_t head_hidden = 64;
  double dropout = 0.1;
  TimeMode time_mode = TimeMode::temporal;
  TimeTransform time_transform = TimeTransform::log1p;
  TimeAnchor time_anchor = TimeAnchor::first;
  ModelKind kind = ModelKind::tempoformer;

  void validate() const;
};

struct AblationFlags {
  bool no_temporal_rope = false;
  bool no_rope_mha = false;
  bool no_stream_embed_s11 = false;
  bool no_stream_embed_s10_s11 = false;
  bool no_gate_norm = false;

  bool skip_s10() const { return no_stream_embed_s10_s11; }
  bool skip_s11() const { return no_stream_embed_s11 || no_stream_embed_s10_s11; }
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const AblationFlags& f);
ModelConfig model_config_from_json(const nlohmann::json& j);
AblationFlags ablation_flags_from_json(const nlohmann::json& j);

enum class PhaseMode { vanilla, positional, temporal };

// Flags win over the configured mode; data without timestamps falls back to
// post positions.
PhaseMode resolve_phase_mode(const ModelConfig& config, const AblationFlags& flags, bool has_times);

// One phase per (sample, slot). Padded slots get 0. Positional phases count
// real posts from the first one; temporal phases transform the offset from
// the anchor post's timestamp.
std::vector<double> stream_phases(const data::StreamBatch& batch, PhaseMode mode,
                                  TimeTransform transform, TimeAnchor anchor = TimeAnchor::first);

// Row indices into the flattened hidden states.
std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t window, std::size_t max_len);
std::vector<std::size_t> current_slots(std::size_t batch, std::size_t window);

template <class T>
class Classifier {
 public:
  virtual ~Classifier() = default;
  // Logits (B x class_count).
  virtual Tensor<T> forward(const data::StreamBatch& batch, const nn::ForwardContext& ctx) const = 0;
  virtual nn::ParameterSet<T>& parameters() = 0;
  virtual const nn::ParameterSet<T>& parameters() const = 0;
  virtual const ModelConfig& config() const = 0;
  virtual const AblationFlags& flags() const = 0;
};

template <class T>
class TempoFormer : public Classifier<T> {
 public:
  TempoFormer(const ModelConfig& config, const AblationFlags& flags, std::uint64_t init_seed);

  struct LocalOutput {
    Tensor<T> h10;      // B*w*K x d
    Tensor<T> c_local;  // B x d, pooled current-post CLS
  };
  struct StreamOutput {
    Tensor<T> encoded;   // after the stream encoder layer, before CLS replacement
    Tensor<T> replaced;  // H'11
  };
  struct ContextOutput {
    Tensor<T> h12;            // B*w*K x d
    Tensor<T> h12_replaced;   // h12 with CLS rows replaced by the second MHA
    Tensor<T> h12_cls;        // B*w x d
    Tensor<T> h12_prime_cls;  // B*w x d
  };
  struct Trace {
    LocalOutput local;
    StreamOutput stream;
    ContextOutput context;
    Tensor<T> c_global;  // B*w x d
    Tensor<T> logits;    // B x class_count
  };

  LocalOutput encode_local(const data::StreamBatch& batch, const nn::ForwardContext& ctx) const;
  StreamOutput encode_stream(const Tensor<T>& h10, const data::StreamBatch& batch,
                             const nn::ForwardContext& ctx) const;
  ContextOutput encode_context(const Tensor<T>& h11, const data::StreamBatch& batch,
                               const nn::ForwardContext& ctx) const;
  Tensor<T> gate_fuse(const Tensor<T>& h12_cls, const Tensor<T>& h12_prime_cls) const;
  Tensor<T> classify(const Tensor<T>& c_local, const Tensor<T>& c_global_current,
                     const nn::ForwardContext& ctx) const;

  Trace trace(const data::StreamBatch& batch, const nn::ForwardContext& ctx) const;
  Tensor<T> forward(const data::StreamBatch& batch, const nn::ForwardContext& ctx) const override;

  nn::ParameterSet<T>& parameters() override { return params_; }
  const nn::ParameterSet<T>& parameters() const override { return params_; }
  const ModelConfig& config() const override { return config_; }
  const AblationFlags& flags() const override { return flags_; }

  PhaseMode phase_mode(const data::StreamBatch& batch) const;

  // Direct access for tests that hand-set weights.
  struct Modules {
    nn::EmbeddingTables<T> embeddings;
    nn::LayerNorm<T> embed_norm;
    std::vector<nn::EncoderLayerParams<T>> local;
    nn::Linear<T> pooler;
    std::optional<Tensor<T>> s10, s11;  // window x d
    nn::EncoderLayerParams<T> stream_layer, context_layer;
    nn::AttentionParams<T> stream_mha, context_mha;
    std::optional<nn::Linear<T>> gate;
    std::optional<nn::LayerNorm<T>> gate_norm;
    nn::Linear<T> fc1, fc2, out;
  };
  const Modules& modules() const { return m_; }

 protected:
  void check_batch(const data::StreamBatch& batch) const;
  // Head on an arbitrary (B x 2d) input.
  Tensor<T> head(const Tensor<T>& z, const nn::ForwardContext& ctx) const;

  ModelConfig config_;
  AblationFlags flags_;
  nn::ParameterSet<T> params_;
  Modules m_;
};

// TempoFormer trunk whose pooled fused [CLS] sequence runs through a
// bidirectional LSTM (hidden size d). The concatenated final states feed the
// same head shape. Padded slots leave the recurrent state untouched.
template <class T>
class RoTempoFormer : public TempoFormer<T> {
 public:
  RoTempoFormer(const ModelConfig& config, const AblationFlags& flags, std::uint64_t init_seed);
  Tensor<T> forward(const data::StreamBatch& batch, const nn::ForwardContext& ctx) const override;

  struct LstmParams {
    nn::Linear<T> input;  // d x 4H, gate order i, f, g, o
    Tensor<T> recurrent;  // H x 4H
  };
  const LstmParams& forward_lstm() const { return fwd_; }
  const LstmParams& backward_lstm() const { return bwd_; }

 private:
  LstmParams fwd_, bwd_;
};

template <class T>
std::unique_ptr<Classifier<T>> make_classifier(const ModelConfig& config, const AblationFlags& flags,
                                               std::uint64_t init_seed);

}  // namespace tempo::model
