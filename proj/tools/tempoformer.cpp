// tempoformer: generate synthetic timelines, train, evaluate, sweep windows,
// run ablations and the full-model gradient check.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags,
// unreadable config or data path).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tempo/checkpoint.hpp"
#include "tempo/data.hpp"
#include "tempo/experiment.hpp"
#include "tempo/metrics.hpp"
#include "tempo/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tempo;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  for (auto& ch : f) {
    if (ch == '_') ch = '-';
  }
  return f;
}

// Registers one flag per run-config key. Values land in `overrides` under
// the config key and are applied on top of --config.
void add_run_options(CLI::App* app, json& overrides, std::string& config_path) {
  app->add_option("--config", config_path, "Run configuration file (flat JSON)");
  auto as_uint = [&](const std::string& key, const std::string& help) {
    app->add_option_function<std::uint64_t>(flag_name(key), [&overrides, key](const std::uint64_t& v) { overrides[key] = v; }, help);
  };
  auto as_double = [&](const std::string& key, const std::string& help) {
    app->add_option_function<double>(flag_name(key), [&overrides, key](const double& v) { overrides[key] = v; }, help);
  };
  auto as_string = [&](const std::string& key, const std::string& help) {
    app->add_option_function<std::string>(flag_name(key), [&overrides, key](const std::string& v) { overrides[key] = v; }, help);
  };
  auto as_flag = [&](const std::string& key, const std::string& help) {
    app->add_flag_function(flag_name(key), [&overrides, key](std::int64_t n) { overrides[key] = n > 0; }, help);
  };
  as_uint("d_model", "Hidden width");
  as_uint("heads", "Attention heads");
  as_uint("d_ff", "Feed-forward width");
  as_uint("max_len", "Tokens per post including [CLS] and [SEP]");
  as_uint("window", "Posts per stream");
  as_uint("local_layers", "Post-level encoder layers");
  as_uint("head_hidden", "Classifier hidden width");
  as_double("dropout", "Dropout rate");
  as_string("time_mode", "temporal | positional | none");
  as_string("time_transform", "log1p | identity");
  as_string("time_anchor", "first | current");
  as_string("kind", "tempoformer | ro_tempoformer");
  as_flag("no_temporal_rope", "Positional instead of temporal rotary phases");
  as_flag("no_rope_mha", "Plain attention at the stream level");
  as_flag("no_stream_embed_s11", "Drop the context-level stream embeddings");
  as_flag("no_stream_embed_s10_s11", "Drop both stream embedding tables");
  as_flag("no_gate_norm", "Use the stream-mixed CLS directly instead of Gate&Norm");
  as_uint("epochs", "Maximum epochs");
  as_uint("patience", "Early stopping patience in epochs");
  as_double("gamma", "Focal loss gamma");
  app->add_option_function<std::vector<double>>(
      "--learning-rates", [&overrides](const std::vector<double>& v) { overrides["learning_rates"] = v; },
      "Learning rate grid")->delimiter(',');
  as_uint("batch_size", "Streams per micro-batch");
  as_uint("accumulation", "Micro-batches per optimizer step");
  as_double("weight_decay", "AdamW weight decay");
  as_double("beta1", "AdamW beta1");
  as_double("beta2", "AdamW beta2");
  as_double("adam_eps", "AdamW epsilon");
  as_string("data", "Timelines file (one JSON object per line)");
  as_string("output_dir", "Output directory, relative to $TEMPO_OUTPUT_ROOT when set");
  as_uint("folds", "Cross-validation folds");
  as_uint("fold", "Fold for single runs");
  as_uint("seed", "Training seed for single runs");
  as_uint("max_folds", "Run only the first N folds (0 = all)");
  as_uint("split_seed", "Fold assignment seed");
  as_double("dev_fraction", "Share of non-test timelines held out for early stopping");
  app->add_option_function<std::vector<std::uint64_t>>(
      "--seeds", [&overrides](const std::vector<std::uint64_t>& v) { overrides["seeds"] = v; },
      "Training seeds for cross-validation")->delimiter(',');
  app->add_option_function<std::vector<std::size_t>>(
      "--windows", [&overrides](const std::vector<std::size_t>& v) { overrides["windows"] = v; },
      "Windows for the sweep")->delimiter(',');
}

experiment::RunConfig resolve_config(const std::string& config_path, const json& overrides) {
  experiment::RunConfig base;
  try {
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) throw UsageError("config file not found: " + config_path);
      base = experiment::load_run_config(config_path);
    }
    auto c = experiment::run_config_from_json(overrides, base);
    c.validate();
    return c;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
}

fs::path output_path(const std::string& dir) {
  fs::path p(dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv("TEMPO_OUTPUT_ROOT"); root && *root) p = fs::path(root) / p;
  }
  return p;
}

std::vector<data::Timeline> load_data(const std::string& path) {
  if (path.empty()) throw UsageError("no data file given (--data)");
  if (!fs::is_regular_file(path)) throw UsageError("data file not found: " + path);
  return data::parse_timelines(fs::path(path));
}

void log_line(const std::string& s) {
  std::cerr << s << "\n";
  std::cerr.flush();
}

json f1_json(const metrics::F1Report& r) {
  json classes = json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"label", c.label}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                       {"support", c.support}});
  }
  return {{"macro_f1", r.macro_f1}, {"classes", classes}};
}

void print_f1(const std::string& title, const metrics::F1Report& r) {
  std::printf("%s macro-F1 %.4f\n", title.c_str(), r.macro_f1);
  for (const auto& c : r.classes) {
    std::printf("  %-12s P %.4f  R %.4f  F1 %.4f  n %zu\n", c.label.c_str(), c.precision, c.recall, c.f1,
                c.support);
  }
}

int cmd_generate(const std::string& out, const std::string& generator_config, const json& gen_overrides,
                 std::uint64_t seed) {
  data::GeneratorConfig gc;
  json merged = json::object();
  if (!generator_config.empty()) {
    if (!fs::exists(generator_config)) throw UsageError("generator config not found: " + generator_config);
    std::ifstream in(generator_config);
    try {
      merged = json::parse(in);
    } catch (const json::parse_error& e) {
      throw UsageError(generator_config + ": " + e.what());
    }
  }
  for (auto it = gen_overrides.begin(); it != gen_overrides.end(); ++it) merged[it.key()] = it.value();
  try {
    gc = data::generator_config_from_json(merged.dump());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto timelines = data::generate_synthetic(gc, seed);
  const fs::path path = output_path(out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::write_timelines(path, timelines);
  std::size_t posts = 0, switches = 0;
  for (const auto& t : timelines) {
    for (const auto& p : t.posts) {
      ++posts;
      switches += p.label == data::kSwitchLabel;
    }
  }
  std::printf("wrote %zu timelines, %zu posts (%zu switch) to %s\n", timelines.size(), posts, switches,
              path.string().c_str());
  return 0;
}

int cmd_train(const experiment::RunConfig& config) {
  const auto timelines = load_data(config.data);
  const fs::path dir = output_path(config.output_dir);
  experiment::save_run_config(dir / "config.json", config);
  const auto r = experiment::run_single(config, timelines, config.fold, config.seed, dir, log_line);
  std::printf("learning rate %g, best epoch %zu, dev macro-F1 %.6f\n", r.learning_rate, r.history.best_epoch,
              r.dev_macro_f1);
  print_f1("test", r.test);
  std::printf("run directory %s\n", dir.string().c_str());
  return 0;
}

int cmd_evaluate(const std::string& checkpoint_path, const std::string& data_override, const std::string& out) {
  if (!fs::is_regular_file(checkpoint_path)) throw UsageError("checkpoint not found: " + checkpoint_path);
  auto loaded = checkpoint::load<float>(checkpoint_path);
  const auto& extra = loaded.meta.extra;
  if (!extra.contains("run_config")) throw std::runtime_error("checkpoint has no run configuration");
  auto config = experiment::run_config_from_json(extra.at("run_config"));
  if (!data_override.empty()) config.data = data_override;
  const auto timelines = load_data(config.data);
  const auto split = experiment::make_split(timelines, config, config.fold);
  const auto vocab = data::Vocabulary::from_tokens(loaded.meta.vocab);
  const data::LabelSet labels(loaded.meta.labels);
  const std::size_t w = loaded.meta.config.window;
  auto streams_of = [&](const std::vector<const data::Timeline*>& ts) {
    std::vector<data::Stream> out_streams;
    for (const auto* t : ts) {
      for (auto& s : data::build_streams(*t, w)) out_streams.push_back(std::move(s));
    }
    return out_streams;
  };
  json report = json::object();
  for (const auto& [name, part] : {std::pair{"dev", &split.dev}, std::pair{"test", &split.test}}) {
    const auto streams = streams_of(*part);
    if (streams.empty()) continue;
    const auto pred = training::predict<float>(*loaded.model, streams, vocab, labels);
    const auto f1 = metrics::f1_scores(pred.preds, pred.golds, labels.names());
    print_f1(name, f1);
    report[name] = f1_json(f1);
  }
  if (extra.contains("dev_macro_f1")) {
    std::printf("recorded dev macro-F1 %.6f\n", extra.at("dev_macro_f1").get<double>());
    report["recorded_dev_macro_f1"] = extra.at("dev_macro_f1");
  }
  if (!out.empty()) {
    const fs::path p = output_path(out);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p);
    f << report.dump(2) << "\n";
  }
  return 0;
}

int cmd_sweep(const experiment::RunConfig& config) {
  const auto timelines = load_data(config.data);
  const auto rows = experiment::window_sweep(config, timelines, output_path(config.output_dir), log_line);
  std::fputs(experiment::format_table(rows, "window").c_str(), stdout);
  return 0;
}

int cmd_ablate(const experiment::RunConfig& config) {
  const auto timelines = load_data(config.data);
  const auto rows = experiment::ablation_study(config, timelines, output_path(config.output_dir), log_line);
  std::fputs(experiment::format_table(rows, "configuration").c_str(), stdout);
  return 0;
}

int cmd_gradcheck(const experiment::RunConfig& config, double tolerance) {
  model::ModelConfig tiny = experiment::tiny_model_config();
  tiny.kind = config.model.kind;
  tiny.time_anchor = config.model.time_anchor;
  const auto r = experiment::model_grad_check(tiny, config.flags, config.seed);
  std::printf("parameters %zu, probes %zu\n", r.parameters, r.worst.probes);
  std::printf("max relative error %.3e at %s[%zu] (analytic %.6e, numeric %.6e)\n", r.worst.max_relative_error,
              r.worst_parameter.c_str(), r.worst.worst_index, r.worst.analytic, r.worst.numeric);
  if (!(r.worst.max_relative_error < tolerance)) {
    std::fprintf(stderr, "gradient check failed: %.3e >= %.1e\n", r.worst.max_relative_error, tolerance);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"TempoFormer change detection over timestamped text streams"};
  app.require_subcommand(1);
  app.fallthrough(false);

  std::string out, generator_config;
  std::uint64_t gen_seed = 0;
  json gen_overrides = json::object();
  auto* generate = app.add_subcommand("generate", "Write a synthetic timelines corpus");
  generate->add_option("--out", out, "Output timelines file")->required();
  generate->add_option("--seed", gen_seed, "Generator seed");
  generate->add_option("--generator-config", generator_config, "Generator configuration file (flat JSON)");
  for (const std::string key : {"timelines", "min_posts", "max_posts", "min_fillers", "max_fillers", "filler_vocab"}) {
    generate->add_option_function<std::uint64_t>(flag_name(key), [&gen_overrides, key](const std::uint64_t& v) { gen_overrides[key] = v; });
  }
  for (const std::string key : {"min_gap", "max_gap", "horizon", "positive_rate"}) {
    generate->add_option_function<double>(flag_name(key), [&gen_overrides, key](const double& v) { gen_overrides[key] = v; });
  }
  generate->add_option_function<std::int64_t>("--start-time", [&gen_overrides](const std::int64_t& v) { gen_overrides["start_time"] = v; });

  struct RunCommand {
    CLI::App* app;
    json overrides = json::object();
    std::string config_path;
  };
  std::vector<std::unique_ptr<RunCommand>> run_commands;
  auto add_run_command = [&](const std::string& name, const std::string& help) {
    auto rc = std::make_unique<RunCommand>();
    rc->app = app.add_subcommand(name, help);
    add_run_options(rc->app, rc->overrides, rc->config_path);
    run_commands.push_back(std::move(rc));
    return run_commands.back().get();
  };
  auto* train = add_run_command("train", "Train one (fold, seed) run and save its checkpoint and history");
  auto* sweep = add_run_command("sweep", "Cross-validate once per window");
  auto* ablate = add_run_command("ablate", "Cross-validate the full model and each component removal");
  auto* gradcheck = add_run_command("gradcheck", "Finite-difference check of the full model loss");
  double tolerance = 1e-4;
  gradcheck->app->add_option("--tolerance", tolerance, "Maximum accepted relative error");

  std::string checkpoint_path, eval_data, eval_out;
  auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint on its dev and test timelines");
  evaluate->add_option("--checkpoint", checkpoint_path, "Checkpoint written by train")->required();
  evaluate->add_option("--data", eval_data, "Timelines file (default: the one recorded in the checkpoint)");
  evaluate->add_option("--out", eval_out, "Write the metrics as JSON here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    if (app.get_subcommands().empty()) std::cerr << app.help();
    return 2;
  }

  try {
    if (generate->parsed()) return cmd_generate(out, generator_config, gen_overrides, gen_seed);
    if (evaluate->parsed()) return cmd_evaluate(checkpoint_path, eval_data, eval_out);
    for (auto* rc : {train, sweep, ablate, gradcheck}) {
      if (!rc->app->parsed()) continue;
      const auto config = resolve_config(rc->config_path, rc->overrides);
      if (rc == train) return cmd_train(config);
      if (rc == sweep) return cmd_sweep(config);
      if (rc == ablate) return cmd_ablate(config);
      return cmd_gradcheck(config, tolerance);
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
