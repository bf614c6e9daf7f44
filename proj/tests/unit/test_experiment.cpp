#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "cases.hpp"
#include "doctest.h"
#include "tempo/data.hpp"
#include "tempo/experiment.hpp"

using namespace tempo;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tempo_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

experiment::RunConfig quick_config() {
  experiment::RunConfig c;
  c.model.d_model = 8;
  c.model.heads = 2;
  c.model.d_ff = 16;
  c.model.max_len = 6;
  c.model.window = 3;
  c.model.local_layers = 1;
  c.model.head_hidden = 8;
  c.model.dropout = 0.0;
  c.train.epochs = 1;
  c.train.learning_rates = {1e-3};
  c.train.batch_size = 16;
  c.folds = 3;
  c.seeds = {0, 1};
  return c;
}

std::vector<data::Timeline> corpus() {
  data::GeneratorConfig g;
  g.timelines = 12;
  g.min_posts = 4;
  g.max_posts = 8;
  return data::generate_synthetic(g, 11);
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(TEMPO_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_CASE("run config round trip") {
  auto c = quick_config();
  c.flags.no_rope_mha = true;
  c.model.time_anchor = model::TimeAnchor::current;
  c.windows = {4, 8};
  c.data = "x.jsonl";
  const auto j = experiment::to_json(c);
  CHECK(j.contains("d_model"));
  CHECK(j.contains("no_rope_mha"));
  CHECK_FALSE(j.contains("vocab"));
  CHECK(experiment::to_json(experiment::run_config_from_json(j)) == j);

  auto bad = j;
  bad["not_a_key"] = 1;
  CHECK_THROWS(experiment::run_config_from_json(bad));

  // Partial objects only override what they name.
  const auto partial = experiment::run_config_from_json({{"window", 7}}, c);
  CHECK(partial.model.window == 7);
  CHECK(partial.model.d_model == 8);

  const auto dir = scratch_dir("config");
  experiment::save_run_config(dir / "c.json", c);
  CHECK(experiment::to_json(experiment::load_run_config(dir / "c.json")) == j);
  fs::remove_all(dir);
}

TEST_CASE("aggregation") {
  std::vector<experiment::RunRecord> runs;
  for (std::uint64_t seed : {1u, 0u}) {
    for (std::size_t fold = 0; fold < 2; ++fold) {
      experiment::RunRecord r;
      r.seed = seed;
      r.fold = fold;
      r.test.macro_f1 = 0.5 + 0.1 * double(fold) + (seed == 1 ? 0.2 : 0.0);
      r.test.classes = {{"a", 1, 1, r.test.macro_f1, 3}};
      runs.push_back(r);
    }
  }
  const auto rep = experiment::aggregate(runs);
  REQUIRE(rep.seeds.size() == 2);
  CHECK(rep.seeds[0].seed == 0);
  CHECK(rep.seeds[0].mean_macro_f1 == doctest::Approx(0.55));
  CHECK(rep.seeds[1].mean_macro_f1 == doctest::Approx(0.75));
  CHECK(rep.macro_f1.mean == doctest::Approx(0.65));
  CHECK(rep.macro_f1.stddev == doctest::Approx(std::sqrt(0.02)));

  // Identical runs for every seed: no spread.
  for (auto& r : runs) r.test.macro_f1 = 0.4;
  CHECK(experiment::aggregate(runs).macro_f1.stddev == 0.0);
}

TEST_CASE("cross validation persists re-derivable runs") {
  const auto tl = corpus();
  const auto dir = scratch_dir("cv");
  const auto cfg = quick_config();
  const auto cv = experiment::cross_validate(cfg, tl, dir);
  CHECK(cv.runs.size() == cfg.folds * cfg.seeds.size());
  CHECK(fs::exists(dir / "config.json"));
  CHECK(fs::exists(dir / "report.txt"));
  CHECK(fs::exists(dir / "seed-1" / "fold-2" / "model.ckpt"));

  const auto reloaded = experiment::load_runs(dir);
  CHECK(experiment::to_json(experiment::aggregate(reloaded)) == experiment::to_json(cv.report));
  CHECK(read_json(dir / "report.json") == experiment::to_json(cv.report));

  // Every timeline (and every one of its streams) is tested exactly once per seed.
  std::size_t posts = 0;
  for (const auto& t : tl) posts += t.posts.size();
  for (std::uint64_t seed : cfg.seeds) {
    std::multiset<std::string> timelines, streams;
    for (const auto& r : cv.runs) {
      if (r.seed != seed) continue;
      timelines.insert(r.test_timelines.begin(), r.test_timelines.end());
      streams.insert(r.test_stream_ids.begin(), r.test_stream_ids.end());
    }
    CHECK(timelines.size() == tl.size());
    CHECK(std::set<std::string>(timelines.begin(), timelines.end()).size() == tl.size());
    CHECK(streams.size() == posts);
    CHECK(std::set<std::string>(streams.begin(), streams.end()).size() == posts);
  }

  const auto again = experiment::cross_validate(cfg, tl, {});
  CHECK(experiment::to_json(again.report) == experiment::to_json(cv.report));
  fs::remove_all(dir);
}

TEST_CASE("window sweep and ablation drivers") {
  const auto tl = corpus();
  auto cfg = quick_config();
  cfg.seeds = {0};
  cfg.max_folds = 1;
  cfg.windows = {2, 3};
  const auto dir = scratch_dir("sweep");
  const auto rows = experiment::window_sweep(cfg, tl, dir);
  CHECK(rows.size() == 2);
  CHECK(fs::exists(dir / "window-2" / "report.json"));
  CHECK(fs::exists(dir / "sweep.txt"));
  const auto table = experiment::format_table(rows, "window");
  CHECK(table.find("window") != std::string::npos);

  // A single-window sweep is that window's cross-validation.
  cfg.windows = {3};
  auto single = cfg;
  single.model.window = 3;
  const auto one = experiment::window_sweep(cfg, tl, {});
  CHECK(experiment::to_json(one[0].report) ==
        experiment::to_json(experiment::cross_validate(single, tl, {}).report));

  const auto configs = experiment::ablation_configurations();
  CHECK(configs.size() == 6);
  CHECK(configs[0].first == "full");
  fs::remove_all(dir);
}

TEST_CASE("command line") {
  const auto dir = scratch_dir("cli");
  const auto log = dir / "log.txt";
  const auto data = dir / "data.jsonl";

  CHECK(run_cli("frobnicate", log) == 2);
  CHECK(run_cli("", log) == 2);
  CHECK(run_cli("train --data " + (dir / "missing.jsonl").string(), log) == 2);
  CHECK(run_cli("gradcheck --bogus", log) == 2);

  REQUIRE(run_cli("generate --out " + data.string() + " --timelines 12 --min-posts 4 --max-posts 8 --seed 3", log) == 0);
  const auto before = fs::last_write_time(data);
  std::ifstream in(data);
  const auto original = std::string(std::istreambuf_iterator<char>(in), {});

  const std::string common = " --data " + data.string() +
                             " --d-model 8 --heads 2 --d-ff 16 --max-len 6 --window 3 --local-layers 1"
                             " --head-hidden 8 --dropout 0 --epochs 1 --learning-rates 1e-3 --folds 3";
  REQUIRE(run_cli("train" + common + " --seed 1 --output-dir " + (dir / "a").string(), log) == 0);
  REQUIRE(run_cli("train" + common + " --seed 1 --output-dir " + (dir / "b").string(), log) == 0);
  const auto ra = read_json(dir / "a" / "run.json"), rb = read_json(dir / "b" / "run.json");
  CHECK(ra == rb);
  CHECK(read_json(dir / "a" / "config.json").at("seed") == 1);

  // Re-running from the saved config reproduces the run.
  REQUIRE(run_cli("train --config " + (dir / "a" / "config.json").string() + " --output-dir " + (dir / "c").string(),
                  log) == 0);
  CHECK(read_json(dir / "c" / "run.json") == ra);

  REQUIRE(run_cli("evaluate --checkpoint " + (dir / "a" / "model.ckpt").string() + " --out " +
                      (dir / "eval.json").string(),
                  log) == 0);
  const auto ev = read_json(dir / "eval.json");
  CHECK(ev.at("dev").at("macro_f1") == ev.at("recorded_dev_macro_f1"));
  CHECK(ev.at("test").at("macro_f1") == ra.at("test").at("macro_f1"));

  CHECK(run_cli("gradcheck", log) == 0);

  std::ifstream again(data);
  CHECK(std::string(std::istreambuf_iterator<char>(again), {}) == original);
  CHECK(fs::last_write_time(data) == before);
  fs::remove_all(dir);
}
