// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cases.hpp"
#include "tempo/data.hpp"
#include "tempo/experiment.hpp"
#include "tempo/model.hpp"
#include "tempo/rotary.hpp"
#include "tempo/training.hpp"

using namespace tempo;
namespace fs = std::filesystem;
using D = Tensor<double>;
using testsupport::random_tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double max_diff(const D& a, const D& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

// 1. Finite differences on every op and on the full model loss.
Outcome gradients() {
  const auto t0 = Clock::now();
  Outcome o;
  double worst_op = 0;
  std::string worst_name;
  for (const auto& c : testsupport::op_cases()) {
    std::mt19937_64 rng(1000);
    for (int trial = 0; trial < 100; ++trial) {
      const double e = c.run(rng);
      if (e > worst_op) {
        worst_op = e;
        worst_name = c.name;
      }
    }
  }
  const auto tf = experiment::model_grad_check(experiment::tiny_model_config(), {}, 0);
  auto ro_cfg = experiment::tiny_model_config();
  ro_cfg.kind = model::ModelKind::ro_tempoformer;
  const auto ro = experiment::model_grad_check(ro_cfg, {}, 1);
  const double secs = seconds_since(t0);
  o.pass = worst_op < 1e-4 && tf.worst.max_relative_error < 1e-4 && ro.worst.max_relative_error < 1e-4 && secs < 120;
  o.detail = "ops " + fmt("%.2e", worst_op) + " (" + worst_name + "), TempoFormer " +
             fmt("%.2e", tf.worst.max_relative_error) + ", RoTempoFormer " + fmt("%.2e", ro.worst.max_relative_error) +
             ", " + fmt("%.1fs", secs);
  return o;
}

// 2. Norms, relative shifts, and positional vs identity-time temporal phases.
Outcome rotary_invariants() {
  std::mt19937_64 rng(2);
  double norm_err = 0, shift_err = 0, mode_err = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const D v = random_tensor(rng, {5, 12}, 1.0, false);
    const auto ph = testsupport::uniform_phases(rng, 5, 1000.0);
    const D rv = rotary::rotary_apply(v, ph, 6);
    for (std::size_t row = 0; row < 5; ++row) {
      for (std::size_t h = 0; h < 2; ++h) {
        double n0 = 0, n1 = 0;
        for (std::size_t c = 0; c < 6; ++c) {
          n0 += std::pow(v.at(row * 12 + h * 6 + c), 2);
          n1 += std::pow(rv.at(row * 12 + h * 6 + c), 2);
        }
        norm_err = std::max(norm_err, std::fabs(std::sqrt(n0) - std::sqrt(n1)));
      }
    }

    const D q = random_tensor(rng, {4, 8}, 1.0, false), k = random_tensor(rng, {4, 8}, 1.0, false);
    auto p = testsupport::uniform_phases(rng, 4, 20.0);
    const D s0 = rotary::rope_scores(q, k, p);
    const double c = std::uniform_real_distribution<double>(-50.0, 50.0)(rng);
    for (auto& x : p) x += c;
    shift_err = std::max(shift_err, max_diff(s0, rotary::rope_scores(q, k, p)));

    const auto f = testsupport::make_fixture(testsupport::indexed_time_timelines(rng, 3, 6), 3, 6);
    auto cfg = testsupport::small_config(f, 3, 6);
    cfg.time_transform = model::TimeTransform::identity;
    auto pcfg = cfg;
    pcfg.time_mode = model::TimeMode::positional;
    const std::uint64_t seed = rng();
    model::TempoFormer<double> temporal(cfg, {}, seed), positional(pcfg, {}, seed);
    mode_err = std::max(mode_err, max_diff(temporal.forward(f.batch, {}), positional.forward(f.batch, {})));
  }
  Outcome o;
  o.pass = norm_err <= 1e-9 && shift_err <= 1e-9 && mode_err <= 1e-12;
  o.detail = "norm " + fmt("%.1e", norm_err) + ", shift " + fmt("%.1e", shift_err) + ", modes " +
             fmt("%.1e", mode_err) + " over 100 trials";
  return o;
}

// 3. Constant timestamps reduce temporal attention to the plain layer.
Outcome degeneracy() {
  std::mt19937_64 rng(3);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    nn::ParameterSet<double> ps;
    nn::Initializer init(rng());
    const std::size_t groups = 1 + rng() % 3, w = 1 + rng() % 6;
    auto p = nn::AttentionParams<double>::create(ps, "a", 8, 2, init);
    const D x = random_tensor(rng, {groups * w, 8}, 1.0, false);
    std::vector<std::uint8_t> mask(groups * w);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % w == w - 1) || (rng() % 4 != 0);
    const double t = std::uniform_real_distribution<double>(0.0, 20.0)(rng);
    const std::vector<double> ph(groups * w, t);
    const D a = rotary::temporal_rotary_mha(x, std::optional<std::span<const double>>(ph), mask, p, groups);
    worst = std::max(worst, max_diff(a, nn::multi_head_attention(x, mask, p, groups)));
  }
  return {worst <= 1e-6, "max diff " + fmt("%.1e", worst) + " over 100 trials"};
}

bool rows_equal(const D& a, const D& b, std::size_t row, std::size_t d) {
  for (std::size_t c = 0; c < d; ++c) {
    if (a.at(row * d + c) != b.at(row * d + c)) return false;
  }
  return true;
}

// 4. Writing CLS vectors back leaves every other token row bitwise intact.
Outcome cls_locality() {
  std::mt19937_64 rng(4);
  std::size_t changed = 0, rows = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<data::Timeline> tl;
    for (int i = 0; i < 3; ++i) tl.push_back(testsupport::random_timeline(rng, "t" + std::to_string(i), 6, true));
    const auto f = testsupport::make_fixture(std::move(tl), 3, 6);
    const auto cfg = testsupport::small_config(f, 3, 6);
    model::TempoFormer<double> m(cfg, {}, rng());
    const auto tr = m.trace(f.batch, {});
    const auto cls = model::cls_rows(f.batch.size, 3, 6);
    std::vector<bool> is_cls(f.batch.size * 3 * 6, false);
    for (auto r : cls) is_cls[r] = true;
    for (std::size_t r = 0; r < is_cls.size(); ++r) {
      if (is_cls[r]) continue;
      ++rows;
      changed += !rows_equal(tr.stream.encoded, tr.stream.replaced, r, cfg.d_model);
      changed += !rows_equal(tr.context.h12, tr.context.h12_replaced, r, cfg.d_model);
    }
  }
  return {changed == 0, std::to_string(changed) + " of " + std::to_string(2 * rows) + " non-CLS rows changed"};
}

// 5. gamma 0 and unit weights give cross-entropy; p = 0.5, gamma 2 gives ln2/4.
Outcome focal_reduction() {
  std::mt19937_64 rng(5);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const D z = random_tensor(rng, {6, 3}, 3.0, false);
    std::vector<int> y(6);
    for (auto& v : y) v = static_cast<int>(rng() % 3);
    double ce = 0;
    for (std::size_t r = 0; r < 6; ++r) {
      double mx = -1e300, s = 0;
      for (std::size_t c = 0; c < 3; ++c) mx = std::max(mx, z.at(r * 3 + c));
      for (std::size_t c = 0; c < 3; ++c) s += std::exp(z.at(r * 3 + c) - mx);
      ce += -(z.at(r * 3 + y[r]) - mx - std::log(s)) / 6;
    }
    worst = std::max(worst, std::fabs(training::focal_loss<double>(z, y, std::vector<double>{1, 1, 1}, 0.0).item() - ce));
  }
  const double half =
      training::focal_loss<double>(D::from({1, 2}, {0.4, 0.4}), std::vector<int>{1}, std::vector<double>{1, 1}, 2.0)
          .item();
  const double point = std::fabs(half - 0.25 * std::log(2.0));
  return {worst <= 1e-12 && point <= 1e-12,
          "cross-entropy " + fmt("%.1e", worst) + ", p=0.5 point " + fmt("%.1e", point)};
}

// 6. Streams against a direct enumeration.
Outcome stream_oracle() {
  std::mt19937_64 rng(6);
  std::size_t mismatches = 0, streams = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto t = testsupport::random_timeline(rng, "t" + std::to_string(trial), 30, trial % 2 == 0);
    const std::size_t w = 1 + rng() % 12;
    const auto got = data::build_streams(t, w);
    const std::size_t n = t.posts.size();
    if (got.size() != n) {
      ++mismatches;
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      ++streams;
      const auto& s = got[i];
      bool ok = s.timeline_id == t.id && s.index == i && s.label == t.posts[i].label;
      const std::size_t first = i + 1 >= w ? i + 1 - w : 0;
      ok = ok && s.posts.size() == i + 1 - first;
      for (std::size_t j = first; ok && j <= i; ++j) {
        const auto& a = s.posts[j - first];
        const auto& b = t.posts[j];
        ok = a.text == b.text && a.timestamp == b.timestamp && a.label == b.label;
      }
      mismatches += !ok;
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in " + std::to_string(streams) +
                               " streams from 1000 timelines"};
}

// 7. Five folds: disjoint tests covering everything, nothing held out in training.
Outcome fold_partition() {
  data::GeneratorConfig g;
  g.timelines = 83;
  g.min_posts = 3;
  g.max_posts = 9;
  const auto tl = data::generate_synthetic(g, 17);
  std::size_t problems = 0;
  for (std::uint64_t split_seed : {0u, 1u, 12u, 123u}) {
    experiment::RunConfig cfg;
    cfg.split_seed = split_seed;
    std::set<std::string> tested;
    std::size_t test_total = 0;
    for (std::size_t fold = 0; fold < 5; ++fold) {
      const auto split = experiment::make_split(tl, cfg, fold);
      std::set<std::string> held;
      for (const auto* t : split.dev) held.insert(t->id);
      for (const auto* t : split.test) {
        held.insert(t->id);
        tested.insert(t->id);
        ++test_total;
      }
      for (const auto* t : split.train) {
        for (const auto& s : data::build_streams(*t, 10)) problems += held.count(s.timeline_id);
      }
      problems += split.train.size() + split.dev.size() + split.test.size() != tl.size();
    }
    problems += test_total != tl.size() || tested.size() != tl.size();
  }
  return {problems == 0, std::to_string(problems) + " violations over 4 split seeds"};
}

// 8. Temporal phases against the positional ablation on the synthetic task.
Outcome synthetic_benchmark() {
  const auto t0 = Clock::now();
  data::GeneratorConfig g;
  g.timelines = 200;
  g.min_fillers = 0;
  g.max_fillers = 1;
  const auto tl = data::generate_synthetic(g, 7);

  experiment::RunConfig cfg;
  cfg.model.d_model = 32;
  cfg.model.heads = 2;
  cfg.model.d_ff = 64;
  cfg.model.max_len = 8;
  cfg.model.window = 10;
  cfg.model.local_layers = 1;
  cfg.model.dropout = 0.0;
  cfg.model.time_anchor = model::TimeAnchor::current;
  cfg.train.epochs = 10;
  cfg.train.patience = 10;
  cfg.train.learning_rates = {5e-4};
  cfg.train.batch_size = 16;
  cfg.train.gamma = 2.0;

  const std::vector<std::uint64_t> seeds = {0, 1, 12, 123};
  auto run = [&](bool positional, std::string& per_seed) {
    double mean = 0;
    for (auto seed : seeds) {
      auto c = cfg;
      c.flags.no_temporal_rope = positional;
      c.split_seed = seed;
      const auto r = experiment::run_single(c, tl, 0, seed, {});
      per_seed += fmt(" %.3f", r.test.macro_f1);
      mean += r.test.macro_f1 / double(seeds.size());
    }
    return mean;
  };
  std::string ts, ps;
  const double temporal = run(false, ts);
  const double positional = run(true, ps);
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = temporal >= 0.85 && temporal - positional >= 0.05 && secs < 1800;
  o.detail = "temporal " + fmt("%.4f", temporal) + " [" + ts.substr(1) + "], positional " + fmt("%.4f", positional) +
             " [" + ps.substr(1) + "], margin " + fmt("%.4f", temporal - positional) + ", " + fmt("%.0fs", secs);
  return o;
}

// 9. Parameter counts by direct enumeration.
Outcome ablation_structure() {
  model::ModelConfig c;
  c.vocab = 5000;
  model::AblationFlags gate, stripped;
  gate.no_gate_norm = true;
  stripped.no_gate_norm = true;
  stripped.no_stream_embed_s10_s11 = true;
  stripped.no_rope_mha = true;
  auto ro = c;
  ro.kind = model::ModelKind::ro_tempoformer;
  const auto full = experiment::parameter_count(c, {});
  const auto no_gate = experiment::parameter_count(c, gate);
  const auto bare = experiment::parameter_count(c, stripped);
  const auto rec = experiment::parameter_count(ro, {});
  return {full > no_gate && no_gate > bare && rec > full,
          "full " + std::to_string(full) + " > no gate " + std::to_string(no_gate) + " > stripped " +
              std::to_string(bare) + "; RoTempoFormer " + std::to_string(rec)};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(TEMPO_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// 10. Two train invocations with the same config and seed.
Outcome reproducibility() {
  const fs::path dir = fs::temp_directory_path() / "tempo_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto log = dir / "log.txt";
  const auto data = dir / "data.jsonl";
  if (run_cli("generate --out " + data.string() + " --timelines 30 --min-posts 5 --max-posts 12 --seed 5", log) != 0) {
    return {false, "generate failed"};
  }
  const std::string common = "train --data " + data.string() +
                             " --d-model 16 --heads 2 --d-ff 32 --max-len 8 --window 5 --local-layers 1"
                             " --epochs 2 --learning-rates 1e-3 --seed 3 --output-dir ";
  if (run_cli(common + (dir / "a").string(), log) != 0 || run_cli(common + (dir / "b").string(), log) != 0) {
    return {false, "train failed"};
  }
  auto read = [](const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
  };
  const auto a = read(dir / "a" / "run.json"), b = read(dir / "b" / "run.json");
  const bool same_history = a.at("training") == b.at("training");
  const bool same_test = a.at("test") == b.at("test");
  fs::remove_all(dir);
  return {same_history && same_test && a == b,
          std::string("history ") + (same_history ? "identical" : "differs") + ", test metrics " +
              (same_test ? "identical" : "differ")};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradients},
      {"rotary invariants", rotary_invariants},
      {"temporal attention degeneracy", degeneracy},
      {"CLS replacement locality", cls_locality},
      {"focal loss reduction", focal_reduction},
      {"stream construction oracle", stream_oracle},
      {"fold partition", fold_partition},
      {"synthetic temporal benchmark", synthetic_benchmark},
      {"ablation parameter ordering", ablation_structure},
      {"train reproducibility", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
