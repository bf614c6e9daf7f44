#pragma once

// Experiment plumbing shared by the CLI and the acceptance suite: a flat run
// configuration, single (fold, seed) runs that persist their artifacts,
// cross-validation over folds and seeds, and the window / ablation drivers.
//
// Layout of an output directory written by cross_validate:
//   config.json                 the RunConfig used
//   seed-<s>/fold-<f>/run.json  per-run metrics, predictions and history
//   seed-<s>/fold-<f>/model.ckpt
//   report.json, report.txt     aggregate
// Aggregates are always recomputed from the per-run records, so
// aggregate(load_runs(dir)) reproduces report.json.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/data.hpp"
#include "tempo/grad_check.hpp"
#include "tempo/metrics.hpp"
#include "tempo/model.hpp"
#include "tempo/training.hpp"

namespace tempo::experiment {

struct RunConfig {
  model::ModelConfig model;  // vocab and class_count are filled in from the data
  model::AblationFlags flags;
  training::TrainConfig train;
  std::string data;  // timelines file
  std::string output_dir = "runs";
  std::size_t folds = 5;
  std::size_t fold = 0;          // single runs
  std::uint64_t seed = 0;        // single runs; training and initialization seed
  std::size_t max_folds = 0;     // cross-validation runs folds [0, max_folds); 0 = all
  std::uint64_t split_seed = 0;  // fixed across training seeds
  double dev_fraction = 0.25;
  std::vector<std::uint64_t> seeds = {0, 1, 12, 123};  // cross-validation
  std::vector<std::size_t> windows = {5, 10, 20};

  void validate() const;
};

// Flat object; every key above appears once. Model, flag and training keys
// keep their own names (d_model, no_gate_norm, epochs, ...); vocab and
// class_count are derived from the data and are not keys.
nlohmann::json to_json(const RunConfig& c);
// Starts from `base` and applies the keys present. Unknown keys throw.
RunConfig run_config_from_json(const nlohmann::json& j, const RunConfig& base = {});
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const std::filesystem::path& path, const RunConfig& c);

// Everything one (fold, seed) run produced.
struct RunRecord {
  std::uint64_t seed = 0;
  std::size_t fold = 0;
  std::size_t window = 0;
  double learning_rate = 0.0;
  double dev_macro_f1 = 0.0;
  metrics::F1Report test;
  std::vector<std::string> test_timelines;
  std::vector<std::string> test_stream_ids;  // "<timeline>#<index>"
  std::vector<int> test_preds;
  std::vector<int> test_golds;
  training::TrainResult history;
};

nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

struct Split {
  std::vector<const data::Timeline*> train, dev, test;
};
Split make_split(std::span<const data::Timeline> timelines, const RunConfig& config, std::size_t fold);

using Log = std::function<void(const std::string&)>;

// Trains one model on fold `fold` with training seed `seed` (also the
// initialization seed), evaluates it on the fold's test timelines and, when
// `run_dir` is non-empty, writes run.json and model.ckpt there.
RunRecord run_single(const RunConfig& config, std::span<const data::Timeline> timelines,
                     std::size_t fold, std::uint64_t seed, const std::filesystem::path& run_dir,
                     const Log& log = {});

struct SeedScore {
  std::uint64_t seed = 0;
  std::vector<double> fold_macro_f1;  // in fold order
  double mean_macro_f1 = 0.0;
};

struct Report {
  std::vector<SeedScore> seeds;
  metrics::Summary macro_f1;  // across per-seed fold means
  // Per-class scores averaged over every (fold, seed) run.
  std::vector<metrics::ClassScore> classes;
};

// Groups by seed (ascending), averages folds, then summarizes across seeds.
Report aggregate(std::span<const RunRecord> runs);
nlohmann::json to_json(const Report& r);

// Reads every seed-*/fold-*/run.json below `dir`.
std::vector<RunRecord> load_runs(const std::filesystem::path& dir);

struct CrossValidation {
  std::vector<RunRecord> runs;
  Report report;
};

// Runs every (seed, fold) pair. With a non-empty `dir` the config, per-run
// artifacts and report are written below it.
CrossValidation cross_validate(const RunConfig& config, std::span<const data::Timeline> timelines,
                               const std::filesystem::path& dir, const Log& log = {});

struct SweepRow {
  std::string name;
  std::size_t parameters = 0;
  Report report;
};

// One cross-validation per window, written to <dir>/window-<w>.
std::vector<SweepRow> window_sweep(const RunConfig& config, std::span<const data::Timeline> timelines,
                                   const std::filesystem::path& dir, const Log& log = {});

// The full model followed by each single-component removal.
std::vector<std::pair<std::string, model::AblationFlags>> ablation_configurations();

// One cross-validation per ablation configuration, written to <dir>/<name>.
std::vector<SweepRow> ablation_study(const RunConfig& config, std::span<const data::Timeline> timelines,
                                     const std::filesystem::path& dir, const Log& log = {});

// Aligned text table: name, parameters, macro-F1 mean and std, per-seed means.
std::string format_table(std::span<const SweepRow> rows, const std::string& first_column);

// Finite-difference check of the focal loss with respect to every model
// parameter, in 64-bit, on a tiny synthetic batch with dropout off.
struct ModelGradCheck {
  GradCheckResult worst;
  std::string worst_parameter;
  std::size_t parameters = 0;
};
ModelGradCheck model_grad_check(const model::ModelConfig& tiny, const model::AblationFlags& flags,
                                std::uint64_t seed);

// ModelConfig for the gradient check: d=8, 2 heads, w=3, K=6, one local layer.
model::ModelConfig tiny_model_config();

// Model parameter count for a given config and flags (vocab must be set).
std::size_t parameter_count(const model::ModelConfig& config, const model::AblationFlags& flags);

}  // namespace tempo::experiment
