#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "cases.hpp"
#include "doctest.h"
#include "tempo/checkpoint.hpp"
#include "tempo/experiment.hpp"
#include "tempo/model.hpp"
#include "tempo/training.hpp"

using namespace tempo;
using testsupport::BatchFixture;
using testsupport::make_fixture;
using testsupport::small_config;
using D = Tensor<double>;

namespace {

constexpr std::size_t kW = 3, kK = 6;

BatchFixture fixture(std::uint64_t seed, bool timed = true) {
  std::mt19937_64 rng(seed);
  std::vector<data::Timeline> tl;
  for (int i = 0; i < 3; ++i) tl.push_back(testsupport::random_timeline(rng, "t" + std::to_string(i), 5, timed));
  return make_fixture(std::move(tl), kW, kK);
}

void fill(D t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

bool rows_equal(const D& a, const D& b, std::size_t row, std::size_t d) {
  for (std::size_t c = 0; c < d; ++c) {
    if (a.at(row * d + c) != b.at(row * d + c)) return false;
  }
  return true;
}

double max_diff(const D& a, const D& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST_CASE("phase mode resolution") {
  model::ModelConfig c;
  model::AblationFlags f;
  CHECK(model::resolve_phase_mode(c, f, true) == model::PhaseMode::temporal);
  CHECK(model::resolve_phase_mode(c, f, false) == model::PhaseMode::positional);
  f.no_temporal_rope = true;
  CHECK(model::resolve_phase_mode(c, f, true) == model::PhaseMode::positional);
  f.no_rope_mha = true;
  CHECK(model::resolve_phase_mode(c, f, true) == model::PhaseMode::vanilla);
  c.time_mode = model::TimeMode::none;
  CHECK(model::resolve_phase_mode(c, {}, true) == model::PhaseMode::vanilla);
  c.time_mode = model::TimeMode::positional;
  CHECK(model::resolve_phase_mode(c, {}, true) == model::PhaseMode::positional);
}

TEST_CASE("stream phases") {
  data::Timeline t{"a", {}};
  for (std::int64_t ts : {100, 160, 3760}) t.posts.push_back({"x", ts, "none"});
  const auto f = make_fixture({t}, kW, kK);
  // Stream 0 is left-padded by two slots, stream 2 fills the window.
  const auto pos = model::stream_phases(f.batch, model::PhaseMode::positional, model::TimeTransform::log1p);
  CHECK(pos == std::vector<double>{0, 0, 0, 0, 0, 1, 0, 1, 2});
  const auto tmp = model::stream_phases(f.batch, model::PhaseMode::temporal, model::TimeTransform::log1p);
  CHECK(tmp[8] == doctest::Approx(std::log(3661.0)));
  CHECK(tmp[7] == doctest::Approx(std::log(61.0)));
  CHECK(tmp[6] == 0.0);
  const auto cur = model::stream_phases(f.batch, model::PhaseMode::temporal, model::TimeTransform::log1p,
                                        model::TimeAnchor::current);
  CHECK(cur[8] == 0.0);
  CHECK(cur[6] == doctest::Approx(-std::log(3661.0)));
  const auto ident = model::stream_phases(f.batch, model::PhaseMode::temporal, model::TimeTransform::identity,
                                          model::TimeAnchor::current);
  CHECK(ident[7] == -3600.0);
  const auto vanilla = model::stream_phases(f.batch, model::PhaseMode::vanilla, model::TimeTransform::log1p);
  for (double v : vanilla) CHECK(v == 0.0);
}

TEST_CASE("config json round trip and validation") {
  model::ModelConfig c;
  c.vocab = 50;
  c.window = 7;
  c.time_anchor = model::TimeAnchor::current;
  c.kind = model::ModelKind::ro_tempoformer;
  const auto back = model::model_config_from_json(model::to_json(c));
  CHECK(model::to_json(back) == model::to_json(c));
  model::AblationFlags f;
  f.no_gate_norm = true;
  CHECK(model::ablation_flags_from_json(model::to_json(f)).no_gate_norm);
  CHECK_THROWS(model::parse_time_mode("sideways"));
  model::ModelConfig bad = c;
  bad.heads = 3;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("CLS replacement leaves other rows untouched") {
  const auto f = fixture(1);
  const auto cfg = small_config(f, kW, kK);
  const std::size_t d = cfg.d_model;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    model::TempoFormer<double> m(cfg, {}, seed);
    const auto tr = m.trace(f.batch, {});
    const auto cls = model::cls_rows(f.batch.size, kW, kK);
    std::vector<bool> is_cls(f.batch.size * kW * kK, false);
    for (auto r : cls) is_cls[r] = true;
    bool cls_changed = false;
    for (std::size_t r = 0; r < is_cls.size(); ++r) {
      if (is_cls[r]) {
        cls_changed |= !rows_equal(tr.stream.encoded, tr.stream.replaced, r, d);
        continue;
      }
      CHECK(rows_equal(tr.stream.encoded, tr.stream.replaced, r, d));
      CHECK(rows_equal(tr.context.h12, tr.context.h12_replaced, r, d));
    }
    CHECK(cls_changed);
  }
}

TEST_CASE("padded posts never affect logits") {
  auto f = fixture(2);
  const auto cfg = small_config(f, kW, kK);
  model::TempoFormer<double> m(cfg, {}, 3);
  const D base = m.forward(f.batch, {});
  auto b2 = f.batch;
  std::size_t touched = 0;
  for (std::size_t slot = 0; slot < b2.size * kW; ++slot) {
    if (b2.post_mask[slot]) continue;
    ++touched;
    for (std::size_t k = 0; k < kK; ++k) b2.token_ids[slot * kK + k] = static_cast<std::int32_t>(4 + k % 2);
  }
  REQUIRE(touched > 0);
  const D after = m.forward(b2, {});
  for (std::size_t i = 0; i < base.numel(); ++i) CHECK(base.at(i) == after.at(i));
}

TEST_CASE("local encoding keeps posts independent") {
  data::Timeline t{"p", {}};
  const char* texts[] = {"alpha beta", "gamma", "delta epsilon zeta"};
  for (int i = 0; i < 3; ++i) t.posts.push_back({texts[i], 10 * i, "none"});
  const auto f = make_fixture({t}, kW, kK);
  const auto cfg = small_config(f, kW, kK);
  model::TempoFormer<double> m(cfg, {}, 4);
  auto swapped = f.batch;
  // Swap the two history slots of the last sample.
  const std::size_t s = f.batch.size - 1;
  for (std::size_t k = 0; k < kK; ++k) {
    std::swap(swapped.token_ids[(s * kW + 0) * kK + k], swapped.token_ids[(s * kW + 1) * kK + k]);
    std::swap(swapped.token_mask[(s * kW + 0) * kK + k], swapped.token_mask[(s * kW + 1) * kK + k]);
  }
  const D a = m.encode_local(f.batch, {}).h10, b = m.encode_local(swapped, {}).h10;
  for (std::size_t k = 0; k < kK; ++k) {
    for (std::size_t c = 0; c < cfg.d_model; ++c) {
      CHECK(a.at(((s * kW + 0) * kK + k) * cfg.d_model + c) == b.at(((s * kW + 1) * kK + k) * cfg.d_model + c));
    }
  }
}

TEST_CASE("positional and identity-time temporal modes agree") {
  std::mt19937_64 rng(5);
  const auto f = make_fixture(testsupport::indexed_time_timelines(rng, 3, 6), kW, kK);
  auto cfg = small_config(f, kW, kK);
  cfg.time_transform = model::TimeTransform::identity;
  auto pcfg = cfg;
  pcfg.time_mode = model::TimeMode::positional;
  model::TempoFormer<double> temporal(cfg, {}, 6), positional(pcfg, {}, 6);
  CHECK(max_diff(temporal.forward(f.batch, {}), positional.forward(f.batch, {})) <= 1e-12);

  // Measuring from the current post only shifts every phase of a stream.
  auto ccfg = cfg;
  ccfg.time_anchor = model::TimeAnchor::current;
  model::TempoFormer<double> current(ccfg, {}, 6);
  CHECK(max_diff(temporal.forward(f.batch, {}), current.forward(f.batch, {})) <= 1e-9);
}

TEST_CASE("ablation flags") {
  const auto f = fixture(7);
  const auto cfg = small_config(f, kW, kK);

  SUBCASE("no temporal rope equals positional mode") {
    model::AblationFlags fl;
    fl.no_temporal_rope = true;
    auto pcfg = cfg;
    pcfg.time_mode = model::TimeMode::positional;
    model::TempoFormer<double> a(cfg, fl, 8), b(pcfg, {}, 8);
    CHECK(max_diff(a.forward(f.batch, {}), b.forward(f.batch, {})) == 0.0);
  }

  SUBCASE("zero s11 table makes its ablation a no-op") {
    model::TempoFormer<double> full(cfg, {}, 9);
    REQUIRE(full.modules().s11.has_value());
    fill(*full.modules().s11, 0.0);
    const D a = full.forward(f.batch, {});
    model::AblationFlags fl;
    fl.no_stream_embed_s11 = true;
    // Same seed; the ablated model simply has no s11 table.
    model::TempoFormer<double> ablated(cfg, fl, 9);
    for (std::size_t i = 0; i < full.parameters().items().size(); ++i) {
      const auto& p = full.parameters().items()[i];
      if (const auto* q = ablated.parameters().find(p.name)) {
        auto dst = q->value;
        std::copy(p.value.data().begin(), p.value.data().end(), dst.mutable_data().begin());
      }
    }
    CHECK(max_diff(a, ablated.forward(f.batch, {})) == 0.0);
  }

  SUBCASE("s10 ablation implies s11 ablation") {
    model::AblationFlags fl;
    fl.no_stream_embed_s10_s11 = true;
    model::TempoFormer<double> m(cfg, fl, 1);
    CHECK_FALSE(m.modules().s10.has_value());
    CHECK_FALSE(m.modules().s11.has_value());
  }

  SUBCASE("parameter counts order like the component list") {
    auto pcfg = cfg;
    pcfg.vocab = 100;
    model::AblationFlags gate;
    gate.no_gate_norm = true;
    model::AblationFlags stripped;
    stripped.no_gate_norm = true;
    stripped.no_stream_embed_s10_s11 = true;
    stripped.no_rope_mha = true;
    const auto full = experiment::parameter_count(pcfg, {});
    const auto no_gate = experiment::parameter_count(pcfg, gate);
    const auto bare = experiment::parameter_count(pcfg, stripped);
    CHECK(full > no_gate);
    CHECK(no_gate > bare);
    const std::size_t d = pcfg.d_model;
    CHECK(full - no_gate == 2 * d * d + d + 2 * d);
    auto ro = pcfg;
    ro.kind = model::ModelKind::ro_tempoformer;
    CHECK(experiment::parameter_count(ro, {}) - full == 2 * (8 * d * d + 4 * d));
  }
}

TEST_CASE("gate fusion limits") {
  const auto f = fixture(10);
  const auto cfg = small_config(f, kW, kK);
  model::TempoFormer<double> m(cfg, {}, 11);
  const auto tr = m.trace(f.batch, {});
  const auto& norm = *m.modules().gate_norm;
  const auto& gate = *m.modules().gate;
  fill(gate.weight, 0.0);
  fill(gate.bias, -20.0);
  CHECK(max_diff(m.gate_fuse(tr.context.h12_cls, tr.context.h12_prime_cls), norm(tr.context.h12_cls)) < 1e-6);
  fill(gate.bias, 20.0);
  CHECK(max_diff(m.gate_fuse(tr.context.h12_cls, tr.context.h12_prime_cls), norm(tr.context.h12_prime_cls)) < 1e-6);
  fill(gate.bias, 0.3);
  CHECK(max_diff(m.gate_fuse(tr.context.h12_cls, tr.context.h12_cls), norm(tr.context.h12_cls)) < 1e-12);
  CHECK(m.gate_fuse(tr.context.h12_cls, tr.context.h12_prime_cls).all_finite());

  model::AblationFlags fl;
  fl.no_gate_norm = true;
  model::TempoFormer<double> open(cfg, fl, 11);
  const auto t2 = open.trace(f.batch, {});
  CHECK(max_diff(t2.c_global, t2.context.h12_prime_cls) == 0.0);
}

TEST_CASE("zero head gives zero logits and class 0") {
  const auto f = fixture(12);
  const auto cfg = small_config(f, kW, kK);
  model::TempoFormer<double> m(cfg, {}, 13);
  for (const auto* lin : {&m.modules().fc1, &m.modules().fc2, &m.modules().out}) {
    fill(lin->weight, 0.0);
    if (lin->bias.defined()) fill(lin->bias, 0.0);
  }
  const D z = m.forward(f.batch, {});
  for (double v : z.data()) CHECK(v == 0.0);
  const auto pred = training::predict<double>(m, f.streams, f.vocab, f.labels);
  for (int p : pred.preds) CHECK(p == 0);
}

TEST_CASE("window of one and the recurrent variant") {
  const auto f1 = make_fixture(fixture(14).timelines, 1, kK);
  auto cfg = small_config(f1, 1, kK);
  model::TempoFormer<double> plain(cfg, {}, 15);
  CHECK(plain.forward(f1.batch, {}).all_finite());
  cfg.kind = model::ModelKind::ro_tempoformer;
  const auto ro = model::make_classifier<double>(cfg, {}, 15);
  const D z = ro->forward(f1.batch, {});
  CHECK(z.shape() == Shape{f1.batch.size, cfg.class_count});
  CHECK(z.all_finite());

  // Zero recurrent weights: both directions only see their gate biases, so
  // every sample gets the same logits.
  auto* rt = dynamic_cast<model::RoTempoFormer<double>*>(ro.get());
  REQUIRE(rt != nullptr);
  for (const auto* l : {&rt->forward_lstm(), &rt->backward_lstm()}) {
    fill(l->input.weight, 0.0);
    fill(l->recurrent, 0.0);
    fill(l->input.bias, 0.25);
  }
  const D same = ro->forward(f1.batch, {});
  for (std::size_t b = 1; b < f1.batch.size; ++b) {
    for (std::size_t c = 0; c < cfg.class_count; ++c) {
      CHECK(same.at(b * cfg.class_count + c) == doctest::Approx(same.at(c)).epsilon(1e-12));
    }
  }
}

TEST_CASE("full model gradient check") {
  const auto r = experiment::model_grad_check(experiment::tiny_model_config(), {}, 0);
  INFO("worst " << r.worst_parameter);
  CHECK(r.worst.max_relative_error < 1e-4);
  auto ro = experiment::tiny_model_config();
  ro.kind = model::ModelKind::ro_tempoformer;
  CHECK(experiment::model_grad_check(ro, {}, 1).worst.max_relative_error < 1e-4);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto f = fixture(16);
  auto cfg = small_config(f, kW, kK);
  model::TempoFormer<float> m(cfg, {}, 17);
  const auto dir = std::filesystem::temp_directory_path() / "tempo_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.ckpt";
  checkpoint::save<float>(path, m, f.vocab, f.labels, {{"note", "x"}});
  const auto loaded = checkpoint::load<float>(path);
  CHECK(loaded.meta.extra["note"] == "x");
  CHECK(loaded.meta.vocab == f.vocab.tokens());
  const auto& a = m.parameters().items();
  const auto& b = loaded.model->parameters().items();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(std::equal(a[i].value.data().begin(), a[i].value.data().end(), b[i].value.data().begin()));
  }
  const auto za = m.forward(f.batch, {}), zb = loaded.model->forward(f.batch, {});
  CHECK(std::equal(za.data().begin(), za.data().end(), zb.data().begin()));

  // Truncated files are rejected.
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size - 3);
  CHECK_THROWS(checkpoint::load<float>(path));
  std::filesystem::remove_all(dir);
}
