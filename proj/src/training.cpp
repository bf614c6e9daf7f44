#include "tempo/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "tempo/metrics.hpp"
#include "tempo/ops.hpp"
#include "tempo/rng.hpp"

namespace tempo::training {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("train config: " + what); };
  if (epochs == 0) fail("epochs must be positive");
  if (batch_size == 0) fail("batch_size must be positive");
  if (accumulation == 0) fail("accumulation must be positive");
  if (!(gamma >= 0.0)) fail("gamma must be non-negative");
  if (learning_rates.empty()) fail("at least one learning rate is required");
  for (double lr : learning_rates) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) fail("learning rates must be finite and non-negative");
  }
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
}

std::vector<double> compute_alpha(std::span<const std::size_t> counts,
                                  std::span<const std::string> labels) {
  if (counts.size() != labels.size()) throw std::invalid_argument("compute_alpha: counts and labels differ in length");
  std::size_t total = 0;
  for (std::size_t c : counts) total += c;
  std::vector<double> alpha(counts.size());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) {
      throw std::invalid_argument("compute_alpha: class \"" + labels[k] + "\" has no training examples");
    }
    alpha[k] = std::sqrt(static_cast<double>(total) / static_cast<double>(counts[k]));
  }
  return alpha;
}

std::vector<std::size_t> label_counts(std::span<const data::Stream> streams, const data::LabelSet& labels) {
  std::vector<std::size_t> counts(labels.size(), 0);
  for (const auto& s : streams) ++counts[static_cast<std::size_t>(labels.index(s.label))];
  return counts;
}

template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, std::span<const int> labels,
                     std::span<const double> alpha, double gamma) {
  if (logits.dim() != 2) throw std::invalid_argument("focal_loss: logits must be a matrix");
  const std::size_t n = logits.rows(), c = logits.cols();
  if (labels.size() != n) throw std::invalid_argument("focal_loss: one label per logits row is required");
  if (alpha.size() != c) throw std::invalid_argument("focal_loss: one alpha per class is required");
  if (!(gamma >= 0.0)) throw std::invalid_argument("focal_loss: gamma must be non-negative");
  const auto z = logits.data();
  std::size_t valid = 0;
  for (int y : labels) {
    if (y >= static_cast<int>(c)) throw std::invalid_argument("focal_loss: label out of range");
    if (y >= 0) ++valid;
  }
  if (valid == 0) throw std::invalid_argument("focal_loss: no labeled samples in batch");

  // Per-row softmax and the scalar factor A with dL_i/dz_j = A_i (delta_jy - p_j).
  std::vector<double> probs(n * c, 0.0), factor(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0) continue;
    const std::size_t y = static_cast<std::size_t>(labels[i]);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(z[i * c + j]));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(static_cast<double>(z[i * c + j]) - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(static_cast<double>(z[i * c + j]) - lse);
    const double log_p = static_cast<double>(z[i * c + y]) - lse;
    const double p = std::exp(log_p);
    const double q = -std::expm1(log_p);  // 1 - p
    const double a = alpha[y];
    const double mod = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    total += -a * mod * log_p;
    const double extra = (gamma == 0.0 || q <= 0.0) ? 0.0 : gamma * p * std::pow(q, gamma - 1.0) * log_p;
    factor[i] = -a * (mod - extra);
  }
  const double inv = 1.0 / static_cast<double>(valid);
  return detail::make_result<T>(
      "focal_loss", {1}, {static_cast<T>(total * inv)}, {logits},
      [logits, probs = std::move(probs), factor = std::move(factor),
       labels = std::vector<int>(labels.begin(), labels.end()), n, c, inv](std::span<const T> g,
                                                                          std::span<const T>) {
        auto gz = detail::grad_buffer(*logits.impl());
        const double g0 = static_cast<double>(g[0]) * inv;
        for (std::size_t i = 0; i < n; ++i) {
          if (labels[i] < 0) continue;
          for (std::size_t j = 0; j < c; ++j) {
            const double delta = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
            gz[i * c + j] += static_cast<T>(g0 * factor[i] * (delta - probs[i * c + j]));
          }
        }
      });
}

template <class T>
AdamW<T>::AdamW(nn::ParameterSet<T>& params, double beta1, double beta2, double eps,
                double weight_decay)
    : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_.items()) {
    m_.emplace_back(p.value.numel(), 0.0);
    v_.emplace_back(p.value.numel(), 0.0);
  }
}

template <class T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  auto& items = params_.items();
  for (std::size_t k = 0; k < items.size(); ++k) {
    auto& p = items[k];
    if (!p.value.has_grad()) continue;  // unused this step
    const auto g = p.value.mutable_grad();
    auto x = p.value.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    const double decay = p.decay ? weight_decay_ : 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + decay * static_cast<double>(x[i]);
      x[i] -= static_cast<T>(lr * update);
    }
  }
}

double linear_schedule(double base, std::size_t step, std::size_t total) {
  if (total == 0 || step >= total) return 0.0;
  return base * (1.0 - static_cast<double>(step) / static_cast<double>(total));
}

nlohmann::json to_json(const TrainResult& r) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : r.history) {
    history.push_back({{"epoch", e.epoch},
                       {"train_loss", e.train_loss},
                       {"dev_macro_f1", e.dev_macro_f1},
                       {"steps", e.steps}});
  }
  return {{"learning_rate", r.learning_rate}, {"alpha", r.alpha},
          {"history", std::move(history)},    {"step_losses", r.step_losses},
          {"best_epoch", r.best_epoch},       {"best_dev_macro_f1", r.best_dev_f1},
          {"stopped_early", r.stopped_early}};
}

namespace {

int argmax_row(std::span<const float> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}
int argmax_row(std::span<const double> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

template <class T>
std::vector<std::vector<T>> snapshot(const nn::ParameterSet<T>& params) {
  std::vector<std::vector<T>> out;
  for (const auto& p : params.items()) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

template <class T>
void restore(nn::ParameterSet<T>& params, const std::vector<std::vector<T>>& values) {
  auto& items = params.items();
  for (std::size_t k = 0; k < items.size(); ++k) {
    std::copy(values[k].begin(), values[k].end(), items[k].value.mutable_data().begin());
  }
}

}  // namespace

template <class T>
Predictions predict(const model::Classifier<T>& model, std::span<const data::Stream> streams,
                    const data::Vocabulary& vocab, const data::LabelSet& labels,
                    std::size_t batch_size) {
  NoGradGuard no_grad;
  Predictions out;
  const auto& cfg = model.config();
  for (std::size_t begin = 0; begin < streams.size(); begin += batch_size) {
    const auto chunk = streams.subspan(begin, std::min(batch_size, streams.size() - begin));
    const auto batch = data::make_batch(chunk, vocab, labels, cfg.window, cfg.max_len);
    const Tensor<T> logits = model.forward(batch, nn::ForwardContext{});
    const std::size_t c = logits.cols();
    for (std::size_t i = 0; i < batch.size; ++i) {
      out.preds.push_back(argmax_row(logits.data().subspan(i * c, c)));
      out.golds.push_back(batch.labels[i]);
    }
  }
  return out;
}

template <class T>
double macro_f1(const model::Classifier<T>& model, std::span<const data::Stream> streams,
                const data::Vocabulary& vocab, const data::LabelSet& labels) {
  const auto p = predict(model, streams, vocab, labels);
  return metrics::f1_scores(p.preds, p.golds, labels.names()).macro_f1;
}

template <class T>
TrainResult train(model::Classifier<T>& model, std::span<const data::Stream> train,
                  std::span<const data::Stream> dev, const data::Vocabulary& vocab,
                  const data::LabelSet& labels, const TrainConfig& config, double learning_rate,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("train: no training streams");
  const auto& mc = model.config();
  TrainResult result;
  result.learning_rate = learning_rate;
  result.alpha = compute_alpha(label_counts(train, labels), labels.names());
  const auto eval_set = dev.empty() ? train : dev;

  const std::size_t n = train.size();
  const std::size_t micro_batches = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t steps_per_epoch = (micro_batches + config.accumulation - 1) / config.accumulation;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  auto& params = model.parameters();
  AdamW<T> optimizer(params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
  std::vector<std::vector<T>> best = snapshot(params);
  std::size_t since_best = 0;

  std::vector<std::size_t> order(n);
  std::vector<data::Stream> chunk;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    auto engine = keyed_engine({config.seed, 0x0DE5, epoch});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[engine() % i]);

    double epoch_loss = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t first_micro = s * config.accumulation;
      const std::size_t last_micro = std::min(micro_batches, first_micro + config.accumulation);
      const std::size_t step_begin = first_micro * config.batch_size;
      const std::size_t step_end = std::min(n, last_micro * config.batch_size);
      params.zero_grad();
      double step_loss = 0.0;
      for (std::size_t mb = first_micro; mb < last_micro; ++mb) {
        const std::size_t b0 = mb * config.batch_size, b1 = std::min(n, b0 + config.batch_size);
        chunk.clear();
        for (std::size_t i = b0; i < b1; ++i) chunk.push_back(train[order[i]]);
        const auto batch = data::make_batch(std::span<const data::Stream>(chunk), vocab, labels,
                                            mc.window, mc.max_len);
        nn::ForwardContext ctx{true, config.seed, optimizer.steps(), b0 - step_begin};
        const Tensor<T> loss = focal_loss(model.forward(batch, ctx), batch.labels, result.alpha, config.gamma);
        const double weight = static_cast<double>(b1 - b0) / static_cast<double>(step_end - step_begin);
        const Tensor<T> scaled = ops::scale(loss, static_cast<T>(weight));
        const double value = static_cast<double>(scaled.item());
        if (!std::isfinite(value)) {
          std::ostringstream msg;
          msg << "train: non-finite loss at epoch " << epoch + 1 << ", step " << optimizer.steps() + 1
              << " (micro-batch " << mb - first_micro + 1 << ", learning rate "
              << linear_schedule(learning_rate, optimizer.steps(), total_steps) << ")";
          throw std::runtime_error(msg.str());
        }
        scaled.backward();
        step_loss += value;
      }
      optimizer.step(linear_schedule(learning_rate, optimizer.steps(), total_steps));
      result.step_losses.push_back(step_loss);
      epoch_loss += step_loss;
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = epoch_loss / static_cast<double>(steps_per_epoch);
    rec.dev_macro_f1 = macro_f1(model, eval_set, vocab, labels);
    rec.steps = optimizer.steps();
    rec.learning_rate = learning_rate;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (rec.dev_macro_f1 > result.best_dev_f1) {
      result.best_dev_f1 = rec.dev_macro_f1;
      result.best_epoch = rec.epoch;
      best = snapshot(params);
      since_best = 0;
    } else if (++since_best >= std::max<std::size_t>(1, config.patience)) {
      result.stopped_early = epoch + 1 < config.epochs;
      break;
    }
  }
  restore(params, best);
  params.zero_grad();
  return result;
}

template <class T>
GridResult<T> train_grid(const std::function<std::unique_ptr<model::Classifier<T>>()>& factory,
                         std::span<const data::Stream> train_streams, std::span<const data::Stream> dev,
                         const data::Vocabulary& vocab, const data::LabelSet& labels,
                         const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  GridResult<T> out;
  for (double lr : config.learning_rates) {
    auto candidate = factory();
    TrainResult r = train(*candidate, train_streams, dev, vocab, labels, config, lr, on_epoch);
    out.scores.emplace_back(lr, r.best_dev_f1);
    if (!out.model || r.best_dev_f1 > out.result.best_dev_f1) {
      out.model = std::move(candidate);
      out.result = std::move(r);
    }
  }
  return out;
}

#define TEMPO_INSTANTIATE_TRAINING(T)                                                              \
  template Tensor<T> focal_loss(const Tensor<T>&, std::span<const int>, std::span<const double>,   \
                                double);                                                           \
  template class AdamW<T>;                                                                         \
  template Predictions predict(const model::Classifier<T>&, std::span<const data::Stream>,         \
                               const data::Vocabulary&, const data::LabelSet&, std::size_t);       \
  template double macro_f1(const model::Classifier<T>&, std::span<const data::Stream>,             \
                           const data::Vocabulary&, const data::LabelSet&);                        \
  template TrainResult train(model::Classifier<T>&, std::span<const data::Stream>,                 \
                             std::span<const data::Stream>, const data::Vocabulary&,               \
                             const data::LabelSet&, const TrainConfig&, double,                    \
                             const EpochCallback&);                                                \
  template GridResult<T> train_grid(                                                               \
      const std::function<std::unique_ptr<model::Classifier<T>>()>&, std::span<const data::Stream>, \
      std::span<const data::Stream>, const data::Vocabulary&, const data::LabelSet&,               \
      const TrainConfig&, const EpochCallback&);

TEMPO_INSTANTIATE_TRAINING(float)
TEMPO_INSTANTIATE_TRAINING(double)

#undef TEMPO_INSTANTIATE_TRAINING

}  // namespace tempo::training
