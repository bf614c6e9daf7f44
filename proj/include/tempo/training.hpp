#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/data.hpp"
#include "tempo/model.hpp"
#include "tempo/nn.hpp"
#include "tempo/tensor.hpp"

namespace tempo::training {

struct TrainConfig {
  std::size_t epochs = 4;
  std::size_t patience = 3;
  double gamma = 2.0;
  std::vector<double> learning_rates = {1e-5, 5e-6};
  std::size_t batch_size = 16;
  std::size_t accumulation = 1;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

// alpha_c = sqrt(1 / p_c) from per-class counts. Throws naming the first
// class with no examples.
std::vector<double> compute_alpha(std::span<const std::size_t> counts,
                                  std::span<const std::string> labels);
std::vector<std::size_t> label_counts(std::span<const data::Stream> streams, const data::LabelSet& labels);

// Mean over samples with label >= 0 of -alpha_y (1 - p_y)^gamma ln p_y,
// p = softmax(logits row). Throws when no sample has a label.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& logits, std::span<const int> labels,
                     std::span<const double> alpha, double gamma);

// Decoupled weight decay Adam. Parameters with decay == false skip the decay term.
template <class T>
class AdamW {
 public:
  AdamW(nn::ParameterSet<T>& params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  nn::ParameterSet<T>& params_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Learning rate for optimizer step `step` (0-based) of `total`, decaying
// linearly from `base` to 0 with no warmup.
double linear_schedule(double base, std::size_t step, std::size_t total);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double dev_macro_f1 = 0.0;
  std::size_t steps = 0;  // optimizer steps completed
  double learning_rate = 0.0;
};

struct TrainResult {
  double learning_rate = 0.0;
  std::vector<double> alpha;
  std::vector<EpochRecord> history;
  std::vector<double> step_losses;
  std::size_t best_epoch = 0;
  double best_dev_f1 = -1.0;
  bool stopped_early = false;
};

nlohmann::json to_json(const TrainResult& r);

struct Predictions {
  std::vector<int> preds;
  std::vector<int> golds;
};

template <class T>
Predictions predict(const model::Classifier<T>& model, std::span<const data::Stream> streams,
                    const data::Vocabulary& vocab, const data::LabelSet& labels,
                    std::size_t batch_size = 64);

template <class T>
double macro_f1(const model::Classifier<T>& model, std::span<const data::Stream> streams,
                const data::Vocabulary& vocab, const data::LabelSet& labels);

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place and leaves the best-dev parameters loaded. When `dev` is
// empty the early-stopping metric is computed on `train`.
template <class T>
TrainResult train(model::Classifier<T>& model, std::span<const data::Stream> train,
                  std::span<const data::Stream> dev, const data::Vocabulary& vocab,
                  const data::LabelSet& labels, const TrainConfig& config, double learning_rate,
                  const EpochCallback& on_epoch = {});

template <class T>
struct GridResult {
  std::unique_ptr<model::Classifier<T>> model;
  TrainResult result;
  std::vector<std::pair<double, double>> scores;  // (learning rate, best dev macro-F1)
};

// One fresh model per learning rate; keeps the best by dev macro-F1 (first wins ties).
template <class T>
GridResult<T> train_grid(const std::function<std::unique_ptr<model::Classifier<T>>()>& factory,
                         std::span<const data::Stream> train, std::span<const data::Stream> dev,
                         const data::Vocabulary& vocab, const data::LabelSet& labels,
                         const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace tempo::training
