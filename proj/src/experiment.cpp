#include "tempo/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tempo/checkpoint.hpp"
#include "tempo/ops.hpp"

namespace tempo::experiment {

using nlohmann::json;

namespace {

// Keys owned by ModelConfig / AblationFlags in the flat file. vocab and
// class_count come from the data.
const std::set<std::string>& model_keys() {
  static const std::set<std::string> keys = {"d_model",     "heads",      "d_ff",         "max_len",
                                             "window",      "local_layers", "head_hidden", "dropout",
                                             "time_mode",   "time_transform", "time_anchor", "kind"};
  return keys;
}

const std::set<std::string>& flag_keys() {
  static const std::set<std::string> keys = {"no_temporal_rope", "no_rope_mha", "no_stream_embed_s11",
                                             "no_stream_embed_s10_s11", "no_gate_norm"};
  return keys;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

std::vector<data::Stream> streams_of(std::span<const data::Timeline* const> timelines, std::size_t window) {
  std::vector<data::Stream> out;
  for (const auto* t : timelines) {
    auto s = data::build_streams(*t, window);
    out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
  }
  return out;
}

json to_json(const metrics::ClassScore& c) {
  return {{"label", c.label}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
          {"support", c.support}};
}

metrics::ClassScore class_score_from_json(const json& j) {
  metrics::ClassScore c;
  c.label = j.at("label").get<std::string>();
  c.precision = j.at("precision").get<double>();
  c.recall = j.at("recall").get<double>();
  c.f1 = j.at("f1").get<double>();
  c.support = j.at("support").get<std::size_t>();
  return c;
}

training::TrainResult train_result_from_json(const json& j) {
  training::TrainResult r;
  r.learning_rate = j.at("learning_rate").get<double>();
  r.alpha = j.at("alpha").get<std::vector<double>>();
  for (const auto& e : j.at("history")) {
    r.history.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(),
                         e.at("dev_macro_f1").get<double>(), e.at("steps").get<std::size_t>(), r.learning_rate});
  }
  r.step_losses = j.at("step_losses").get<std::vector<double>>();
  r.best_epoch = j.at("best_epoch").get<std::size_t>();
  r.best_dev_f1 = j.at("best_dev_macro_f1").get<double>();
  r.stopped_early = j.at("stopped_early").get<bool>();
  return r;
}

std::size_t fold_count(const RunConfig& c) {
  return c.max_folds == 0 ? c.folds : std::min(c.max_folds, c.folds);
}

}  // namespace

void RunConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("run config: " + what); };
  model::ModelConfig probe = model;
  probe.vocab = std::max<std::size_t>(probe.vocab, data::Vocabulary::kSpecialCount + 1);
  probe.class_count = std::max<std::size_t>(probe.class_count, 2);
  probe.validate();
  train.validate();
  if (folds < 2) fail("folds must be at least 2");
  if (fold >= folds) fail("fold " + std::to_string(fold) + " is out of range for " + std::to_string(folds) + " folds");
  if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) fail("dev_fraction must be in [0, 1)");
  if (seeds.empty()) fail("seeds must not be empty");
  if (windows.empty()) fail("windows must not be empty");
  for (std::size_t w : windows) {
    if (w == 0) fail("windows must be positive");
  }
}

json to_json(const RunConfig& c) {
  json j = json::object();
  const json model_json = model::to_json(c.model);
  for (auto it = model_json.begin(); it != model_json.end(); ++it) {
    if (model_keys().count(it.key())) j[it.key()] = it.value();
  }
  const json flag_json = model::to_json(c.flags);
  for (auto it = flag_json.begin(); it != flag_json.end(); ++it) j[it.key()] = it.value();
  const auto& t = c.train;
  j["epochs"] = t.epochs;
  j["patience"] = t.patience;
  j["gamma"] = t.gamma;
  j["learning_rates"] = t.learning_rates;
  j["batch_size"] = t.batch_size;
  j["accumulation"] = t.accumulation;
  j["weight_decay"] = t.weight_decay;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["data"] = c.data;
  j["output_dir"] = c.output_dir;
  j["folds"] = c.folds;
  j["fold"] = c.fold;
  j["seed"] = c.seed;
  j["max_folds"] = c.max_folds;
  j["split_seed"] = c.split_seed;
  j["dev_fraction"] = c.dev_fraction;
  j["seeds"] = c.seeds;
  j["windows"] = c.windows;
  return j;
}

RunConfig run_config_from_json(const json& j, const RunConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("run config: expected a JSON object");
  RunConfig c = base;
  json model_json = model::to_json(c.model);
  json flag_json = model::to_json(c.flags);
  auto& t = c.train;
  for (const auto& [key, v] : j.items()) {
    try {
      if (model_keys().count(key)) model_json[key] = v;
      else if (flag_keys().count(key)) flag_json[key] = v;
      else if (key == "epochs") t.epochs = v.get<std::size_t>();
      else if (key == "patience") t.patience = v.get<std::size_t>();
      else if (key == "gamma") t.gamma = v.get<double>();
      else if (key == "learning_rates") t.learning_rates = v.get<std::vector<double>>();
      else if (key == "batch_size") t.batch_size = v.get<std::size_t>();
      else if (key == "accumulation") t.accumulation = v.get<std::size_t>();
      else if (key == "weight_decay") t.weight_decay = v.get<double>();
      else if (key == "beta1") t.beta1 = v.get<double>();
      else if (key == "beta2") t.beta2 = v.get<double>();
      else if (key == "adam_eps") t.adam_eps = v.get<double>();
      else if (key == "data") c.data = v.get<std::string>();
      else if (key == "output_dir") c.output_dir = v.get<std::string>();
      else if (key == "folds") c.folds = v.get<std::size_t>();
      else if (key == "fold") c.fold = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "max_folds") c.max_folds = v.get<std::size_t>();
      else if (key == "split_seed") c.split_seed = v.get<std::uint64_t>();
      else if (key == "dev_fraction") c.dev_fraction = v.get<double>();
      else if (key == "seeds") c.seeds = v.get<std::vector<std::uint64_t>>();
      else if (key == "windows") c.windows = v.get<std::vector<std::size_t>>();
      else throw std::invalid_argument("run config: unknown key \"" + key + "\"");
    } catch (const json::exception& e) {
      throw std::invalid_argument("run config: bad value for \"" + key + "\": " + e.what());
    }
  }
  c.model = model::model_config_from_json(model_json);
  c.flags = model::ablation_flags_from_json(flag_json);
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  try {
    return run_config_from_json(read_json(path));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void save_run_config(const std::filesystem::path& path, const RunConfig& c) {
  write_text(path, to_json(c).dump(2) + "\n");
}

json to_json(const RunRecord& r) {
  json classes = json::array();
  for (const auto& c : r.test.classes) classes.push_back(to_json(c));
  return {{"seed", r.seed},
          {"fold", r.fold},
          {"window", r.window},
          {"learning_rate", r.learning_rate},
          {"dev_macro_f1", r.dev_macro_f1},
          {"test", {{"macro_f1", r.test.macro_f1}, {"classes", std::move(classes)}}},
          {"test_timelines", r.test_timelines},
          {"test_streams", r.test_stream_ids},
          {"test_preds", r.test_preds},
          {"test_golds", r.test_golds},
          {"training", training::to_json(r.history)}};
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.fold = j.at("fold").get<std::size_t>();
  r.window = j.at("window").get<std::size_t>();
  r.learning_rate = j.at("learning_rate").get<double>();
  r.dev_macro_f1 = j.at("dev_macro_f1").get<double>();
  r.test.macro_f1 = j.at("test").at("macro_f1").get<double>();
  for (const auto& c : j.at("test").at("classes")) r.test.classes.push_back(class_score_from_json(c));
  r.test_timelines = j.at("test_timelines").get<std::vector<std::string>>();
  r.test_stream_ids = j.at("test_streams").get<std::vector<std::string>>();
  r.test_preds = j.at("test_preds").get<std::vector<int>>();
  r.test_golds = j.at("test_golds").get<std::vector<int>>();
  r.history = train_result_from_json(j.at("training"));
  return r;
}

Split make_split(std::span<const data::Timeline> timelines, const RunConfig& config, std::size_t fold) {
  const auto folds = data::split_folds(timelines, config.folds, config.split_seed, config.dev_fraction);
  if (fold >= folds.size()) throw std::invalid_argument("fold " + std::to_string(fold) + " is out of range");
  const auto& f = folds[fold];
  return {data::select_timelines(timelines, f.train), data::select_timelines(timelines, f.dev),
          data::select_timelines(timelines, f.test)};
}

RunRecord run_single(const RunConfig& config, std::span<const data::Timeline> timelines,
                     std::size_t fold, std::uint64_t seed, const std::filesystem::path& run_dir,
                     const Log& log) {
  config.validate();
  const Split split = make_split(timelines, config, fold);
  const auto vocab = data::Vocabulary::build(split.train);
  const auto labels = data::LabelSet::collect(timelines);
  model::ModelConfig mc = config.model;
  mc.vocab = vocab.size();
  mc.class_count = labels.size();
  const std::size_t w = mc.window;
  const auto train_streams = streams_of(split.train, w);
  const auto dev_streams = streams_of(split.dev, w);
  const auto test_streams = streams_of(split.test, w);

  training::TrainConfig tc = config.train;
  tc.seed = seed;
  const auto flags = config.flags;
  auto factory = [&] { return model::make_classifier<float>(mc, flags, seed); };
  training::EpochCallback on_epoch;
  if (log) {
    on_epoch = [&](const training::EpochRecord& e) {
      char line[160];
      std::snprintf(line, sizeof line, "seed %llu fold %zu lr %g epoch %zu loss %.5f dev macro-F1 %.4f",
                    static_cast<unsigned long long>(seed), fold, e.learning_rate, e.epoch, e.train_loss,
                    e.dev_macro_f1);
      log(line);
    };
  }
  auto grid = training::train_grid<float>(factory, train_streams, dev_streams, vocab, labels, tc, on_epoch);

  RunRecord r;
  r.seed = seed;
  r.fold = fold;
  r.window = w;
  r.learning_rate = grid.result.learning_rate;
  r.dev_macro_f1 = grid.result.best_dev_f1;
  r.history = grid.result;
  const auto pred = training::predict<float>(*grid.model, test_streams, vocab, labels);
  r.test = metrics::f1_scores(pred.preds, pred.golds, labels.names());
  r.test_preds = pred.preds;
  r.test_golds = pred.golds;
  for (const auto* t : split.test) r.test_timelines.push_back(t->id);
  for (const auto& s : test_streams) r.test_stream_ids.push_back(s.timeline_id + "#" + std::to_string(s.index));

  if (!run_dir.empty()) {
    RunConfig used = config;
    used.fold = fold;
    used.seed = seed;
    const json extra = {{"run_config", to_json(used)}, {"fold", fold}, {"seed", seed},
                        {"dev_macro_f1", r.dev_macro_f1}};
    checkpoint::save<float>(run_dir / "model.ckpt", *grid.model, vocab, labels, extra);
    write_text(run_dir / "run.json", to_json(r).dump(1) + "\n");
  }
  if (log) {
    char line[160];
    std::snprintf(line, sizeof line, "seed %llu fold %zu lr %g dev macro-F1 %.4f test macro-F1 %.4f",
                  static_cast<unsigned long long>(seed), fold, r.learning_rate, r.dev_macro_f1,
                  r.test.macro_f1);
    log(line);
  }
  return r;
}

Report aggregate(std::span<const RunRecord> runs) {
  if (runs.empty()) throw std::invalid_argument("aggregate: no runs");
  std::map<std::uint64_t, std::vector<const RunRecord*>> by_seed;
  for (const auto& r : runs) by_seed[r.seed].push_back(&r);
  Report rep;
  std::vector<double> means;
  for (auto& [seed, list] : by_seed) {
    std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->fold < b->fold; });
    SeedScore s;
    s.seed = seed;
    double total = 0.0;
    for (const auto* r : list) {
      s.fold_macro_f1.push_back(r->test.macro_f1);
      total += r->test.macro_f1;
    }
    s.mean_macro_f1 = total / static_cast<double>(list.size());
    means.push_back(s.mean_macro_f1);
    rep.seeds.push_back(std::move(s));
  }
  rep.macro_f1 = metrics::summarize(means);

  rep.classes = runs.front().test.classes;
  for (auto& c : rep.classes) c = {c.label, 0.0, 0.0, 0.0, 0};
  for (const auto& r : runs) {
    if (r.test.classes.size() != rep.classes.size()) throw std::invalid_argument("aggregate: runs disagree on classes");
    for (std::size_t k = 0; k < rep.classes.size(); ++k) {
      rep.classes[k].precision += r.test.classes[k].precision;
      rep.classes[k].recall += r.test.classes[k].recall;
      rep.classes[k].f1 += r.test.classes[k].f1;
      rep.classes[k].support += r.test.classes[k].support;
    }
  }
  const double n = static_cast<double>(runs.size());
  for (auto& c : rep.classes) {
    c.precision /= n;
    c.recall /= n;
    c.f1 /= n;
  }
  return rep;
}

json to_json(const Report& r) {
  json seeds = json::array();
  for (const auto& s : r.seeds) {
    seeds.push_back({{"seed", s.seed}, {"fold_macro_f1", s.fold_macro_f1}, {"mean_macro_f1", s.mean_macro_f1}});
  }
  json classes = json::array();
  for (const auto& c : r.classes) classes.push_back(to_json(c));
  return {{"macro_f1_mean", r.macro_f1.mean},
          {"macro_f1_std", r.macro_f1.stddev},
          {"seeds", std::move(seeds)},
          {"classes", std::move(classes)}};
}

std::vector<RunRecord> load_runs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& seed_dir : std::filesystem::directory_iterator(dir)) {
    if (!seed_dir.is_directory() || seed_dir.path().filename().string().rfind("seed-", 0) != 0) continue;
    for (const auto& fold_dir : std::filesystem::directory_iterator(seed_dir.path())) {
      const auto file = fold_dir.path() / "run.json";
      if (fold_dir.is_directory() && fold_dir.path().filename().string().rfind("fold-", 0) == 0 &&
          std::filesystem::exists(file)) {
        files.push_back(file);
      }
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> runs;
  for (const auto& f : files) runs.push_back(run_record_from_json(read_json(f)));
  return runs;
}

CrossValidation cross_validate(const RunConfig& config, std::span<const data::Timeline> timelines,
                               const std::filesystem::path& dir, const Log& log) {
  config.validate();
  if (!dir.empty()) save_run_config(dir / "config.json", config);
  CrossValidation cv;
  for (std::uint64_t seed : config.seeds) {
    for (std::size_t fold = 0; fold < fold_count(config); ++fold) {
      std::filesystem::path run_dir;
      if (!dir.empty()) run_dir = dir / ("seed-" + std::to_string(seed)) / ("fold-" + std::to_string(fold));
      cv.runs.push_back(run_single(config, timelines, fold, seed, run_dir, log));
    }
  }
  cv.report = aggregate(cv.runs);
  if (!dir.empty()) {
    write_text(dir / "report.json", to_json(cv.report).dump(2) + "\n");
    const SweepRow row{"model", 0, cv.report};
    write_text(dir / "report.txt", format_table(std::span<const SweepRow>(&row, 1), "run"));
  }
  return cv;
}

std::size_t parameter_count(const model::ModelConfig& config, const model::AblationFlags& flags) {
  return model::make_classifier<float>(config, flags, 0)->parameters().scalar_count();
}

namespace {

// Parameter count with fold 0's training vocabulary, the one the first run uses.
std::size_t fold0_parameters(const RunConfig& config, std::span<const data::Timeline> timelines) {
  const Split split = make_split(timelines, config, 0);
  model::ModelConfig mc = config.model;
  mc.vocab = data::Vocabulary::build(split.train).size();
  mc.class_count = data::LabelSet::collect(timelines).size();
  return parameter_count(mc, config.flags);
}

}  // namespace

std::vector<SweepRow> window_sweep(const RunConfig& config, std::span<const data::Timeline> timelines,
                                   const std::filesystem::path& dir, const Log& log) {
  config.validate();
  std::vector<SweepRow> rows;
  for (std::size_t w : config.windows) {
    RunConfig c = config;
    c.model.window = w;
    const auto sub = dir.empty() ? dir : dir / ("window-" + std::to_string(w));
    if (log) log("window " + std::to_string(w));
    auto cv = cross_validate(c, timelines, sub, log);
    rows.push_back({"w=" + std::to_string(w), fold0_parameters(c, timelines), std::move(cv.report)});
  }
  if (!dir.empty()) {
    json j = json::array();
    for (const auto& r : rows) j.push_back({{"name", r.name}, {"parameters", r.parameters}, {"report", to_json(r.report)}});
    write_text(dir / "sweep.json", j.dump(2) + "\n");
    write_text(dir / "sweep.txt", format_table(rows, "window"));
  }
  return rows;
}

std::vector<std::pair<std::string, model::AblationFlags>> ablation_configurations() {
  std::vector<std::pair<std::string, model::AblationFlags>> out;
  out.emplace_back("full", model::AblationFlags{});
  model::AblationFlags f;
  f.no_temporal_rope = true;
  out.emplace_back("no_temporal_rope", f);
  f = {};
  f.no_rope_mha = true;
  out.emplace_back("no_rope_mha", f);
  f = {};
  f.no_stream_embed_s11 = true;
  out.emplace_back("no_stream_embed_s11", f);
  f = {};
  f.no_stream_embed_s10_s11 = true;
  out.emplace_back("no_stream_embed_s10_s11", f);
  f = {};
  f.no_gate_norm = true;
  out.emplace_back("no_gate_norm", f);
  return out;
}

std::vector<SweepRow> ablation_study(const RunConfig& config, std::span<const data::Timeline> timelines,
                                     const std::filesystem::path& dir, const Log& log) {
  config.validate();
  std::vector<SweepRow> rows;
  for (const auto& [name, flags] : ablation_configurations()) {
    RunConfig c = config;
    c.flags = flags;
    const auto sub = dir.empty() ? dir : dir / name;
    if (log) log("configuration " + name);
    auto cv = cross_validate(c, timelines, sub, log);
    rows.push_back({name, fold0_parameters(c, timelines), std::move(cv.report)});
  }
  if (!dir.empty()) {
    json j = json::array();
    for (const auto& r : rows) j.push_back({{"name", r.name}, {"parameters", r.parameters}, {"report", to_json(r.report)}});
    write_text(dir / "ablation.json", j.dump(2) + "\n");
    write_text(dir / "ablation.txt", format_table(rows, "configuration"));
  }
  return rows;
}

std::string format_table(std::span<const SweepRow> rows, const std::string& first_column) {
  std::size_t name_w = first_column.size();
  for (const auto& r : rows) name_w = std::max(name_w, r.name.size());
  std::vector<std::uint64_t> seeds;
  for (const auto& r : rows) {
    for (const auto& s : r.report.seeds) {
      if (std::find(seeds.begin(), seeds.end(), s.seed) == seeds.end()) seeds.push_back(s.seed);
    }
  }
  std::ostringstream out;
  char cell[64];
  auto pad = [&](const std::string& s, std::size_t width) {
    out << s << std::string(width > s.size() ? width - s.size() : 0, ' ');
  };
  pad(first_column, name_w + 2);
  out << "    params  macro-F1     std";
  for (auto s : seeds) {
    std::snprintf(cell, sizeof cell, "  %8s", ("seed " + std::to_string(s)).c_str());
    out << cell;
  }
  out << "\n";
  for (const auto& r : rows) {
    pad(r.name, name_w + 2);
    std::snprintf(cell, sizeof cell, "%10zu  %8.4f  %6.4f", r.parameters, r.report.macro_f1.mean,
                  r.report.macro_f1.stddev);
    out << cell;
    for (auto s : seeds) {
      const auto it = std::find_if(r.report.seeds.begin(), r.report.seeds.end(),
                                   [&](const SeedScore& x) { return x.seed == s; });
      if (it == r.report.seeds.end()) std::snprintf(cell, sizeof cell, "  %8s", "-");
      else std::snprintf(cell, sizeof cell, "  %8.4f", it->mean_macro_f1);
      out << cell;
    }
    out << "\n";
  }
  return out.str();
}

model::ModelConfig tiny_model_config() {
  model::ModelConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.max_len = 6;
  c.window = 3;
  c.local_layers = 1;
  c.head_hidden = 8;
  c.dropout = 0.0;
  return c;
}

ModelGradCheck model_grad_check(const model::ModelConfig& tiny, const model::AblationFlags& flags,
                                std::uint64_t seed) {
  data::GeneratorConfig gen;
  gen.timelines = 2;
  gen.min_posts = 4;
  gen.max_posts = 5;
  const auto timelines = data::generate_synthetic(gen, seed);
  std::vector<const data::Timeline*> ptrs;
  for (const auto& t : timelines) ptrs.push_back(&t);
  const auto vocab = data::Vocabulary::build(ptrs);
  const data::LabelSet labels({std::string(data::kNoneLabel), std::string(data::kSwitchLabel)});
  model::ModelConfig mc = tiny;
  mc.vocab = vocab.size();
  mc.class_count = labels.size();
  mc.dropout = 0.0;
  auto m = model::make_classifier<double>(mc, flags, seed);
  // The first streams are shorter than the window, so padding is exercised too.
  const auto streams = data::build_streams(timelines.front(), mc.window);
  const std::size_t n = std::min<std::size_t>(streams.size(), 4);
  auto batch = data::make_batch(std::span<const data::Stream>(streams.data(), n), vocab, labels, mc.window,
                                mc.max_len);
  // Force both classes so each alpha and both logit rows contribute.
  for (std::size_t i = 0; i < batch.labels.size(); ++i) batch.labels[i] = static_cast<int>(i % 2);
  const std::vector<double> alpha = {1.3, 1.7};
  std::vector<Tensor<double>> inputs;
  for (const auto& p : m->parameters().items()) inputs.push_back(p.value);
  auto loss = [&] { return training::focal_loss<double>(m->forward(batch, {}), batch.labels, alpha, 2.0); };
  ModelGradCheck out;
  out.worst = grad_check(loss, inputs);
  out.worst_parameter = m->parameters().items()[out.worst.worst_input].name;
  out.parameters = m->parameters().scalar_count();
  return out;
}

}  // namespace tempo::experiment
