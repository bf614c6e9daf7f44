#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "cases.hpp"
#include "doctest.h"
#include "tempo/data.hpp"

using namespace tempo;
using namespace tempo::data;

namespace {

std::vector<Timeline> parse(const std::string& text) {
  std::istringstream in(text);
  return parse_timelines(in, "mem");
}

// Brute-force switch rule: count earlier posts within the horizon by polarity.
std::vector<std::string> oracle_labels(const std::vector<bool>& positive, const std::vector<std::int64_t>& times,
                                       double horizon) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    std::size_t pos = 0, neg = 0;
    for (std::size_t j = 0; j < i; ++j) {
      if (double(times[i] - times[j]) <= horizon) (positive[j] ? pos : neg)++;
    }
    const bool majority_opposite = positive[i] ? neg > pos : pos > neg;
    out.emplace_back(majority_opposite ? kSwitchLabel : kNoneLabel);
  }
  return out;
}

bool is_positive(const std::string& text) {
  const auto words = split_words(text);
  const auto pos = positive_words(), neg = negative_words();
  int p = 0, n = 0;
  for (const auto& w : words) {
    p += std::count(pos.begin(), pos.end(), w) > 0;
    n += std::count(neg.begin(), neg.end(), w) > 0;
  }
  REQUIRE(p + n == 1);
  return p == 1;
}

}  // namespace

TEST_CASE("parse timelines") {
  CHECK(parse("").empty());
  CHECK(parse("\n\n").empty());
  const auto one = parse(R"({"timeline_id": "a", "posts": [{"text": "x", "timestamp": 1, "label": "none"},)"
                         R"({"text": "y", "timestamp": 5, "label": "switch"}, {"text": "z", "timestamp": 5, "label": "none"}]})");
  REQUIRE(one.size() == 1);
  CHECK(one[0].posts.size() == 3);
  CHECK(one[0].posts[1].timestamp == 5);
  CHECK(has_timestamps(one));

  const auto untimed = parse(R"({"timeline_id": "b", "posts": [{"text": "x", "label": "none"}]})");
  CHECK_FALSE(untimed[0].posts[0].timestamp.has_value());
  CHECK_FALSE(has_timestamps(untimed));

  auto line_of = [](const std::string& text) {
    try {
      parse(text);
    } catch (const ParseError& e) {
      return e.line();
    }
    return std::size_t{0};
  };
  CHECK(line_of("{\"timeline_id\": \"a\", \"posts\": [{\"text\": \"x\", \"label\": \"n\"}]}\n{oops") == 2);
  // Mixed presence across timelines of one file.
  CHECK(line_of("{\"timeline_id\": \"a\", \"posts\": [{\"text\": \"x\", \"timestamp\": 1, \"label\": \"n\"}]}\n"
                "{\"timeline_id\": \"b\", \"posts\": [{\"text\": \"x\", \"label\": \"n\"}]}") == 2);
  CHECK(line_of(R"({"timeline_id": "a", "posts": [{"text": "x", "timestamp": 9, "label": "n"}, {"text": "y", "timestamp": 3, "label": "n"}]})") == 1);
  CHECK(line_of(R"({"timeline_id": "a", "posts": []})") == 1);
  CHECK(line_of(R"({"timeline_id": "a", "posts": [{"text": "x", "label": "n"}], "extra": 1})") == 1);
  CHECK(line_of("{\"timeline_id\": \"a\", \"posts\": [{\"text\": \"x\", \"label\": \"n\"}]}\n"
                "{\"timeline_id\": \"a\", \"posts\": [{\"text\": \"x\", \"label\": \"n\"}]}") == 2);
}

TEST_CASE("write and parse round trip") {
  std::mt19937_64 rng(1);
  std::vector<Timeline> tl;
  for (int i = 0; i < 5; ++i) tl.push_back(testsupport::random_timeline(rng, "id" + std::to_string(i), 6, true));
  tl[0].posts[0].text = "quote \" and \\ slash\nnewline";
  std::ostringstream out;
  write_timelines(out, tl);
  const auto back = parse(out.str());
  REQUIRE(back.size() == tl.size());
  for (std::size_t i = 0; i < tl.size(); ++i) {
    CHECK(back[i].id == tl[i].id);
    REQUIRE(back[i].posts.size() == tl[i].posts.size());
    for (std::size_t k = 0; k < tl[i].posts.size(); ++k) {
      CHECK(back[i].posts[k].text == tl[i].posts[k].text);
      CHECK(back[i].posts[k].timestamp == tl[i].posts[k].timestamp);
      CHECK(back[i].posts[k].label == tl[i].posts[k].label);
    }
  }
}

TEST_CASE("stream construction") {
  Timeline t{"x", {}};
  for (int i = 0; i < 20; ++i) t.posts.push_back({"p" + std::to_string(i), i, i % 3 ? "none" : "switch"});
  const auto s = build_streams(t, 5);
  REQUIRE(s.size() == 20);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(s[i].posts.size() == std::min<std::size_t>(i + 1, 5));
    CHECK(s[i].label == t.posts[i].label);
    CHECK(s[i].posts.back().text == t.posts[i].text);
  }
  Timeline short_t{"y", {t.posts.begin(), t.posts.begin() + 3}};
  const auto s3 = build_streams(short_t, 5);
  CHECK(s3.size() == 3);
  CHECK(s3[2].posts.size() == 3);
  for (const auto& st : build_streams(t, 1)) CHECK(st.posts.size() == 1);
  CHECK_THROWS(build_streams(t, 0));
}

TEST_CASE("tokenizer") {
  Timeline t{"v", {{"Hello world", std::nullopt, "a"}}};
  const Timeline* ptr = &t;
  const auto vocab = Vocabulary::build(std::span<const Timeline* const>(&ptr, 1));
  CHECK(vocab.size() == Vocabulary::kSpecialCount + 2);
  CHECK(vocab.id("hello") == 4);
  CHECK(vocab.id("nope") == Vocabulary::kUnk);

  const auto empty = tokenize("", vocab, 6);
  CHECK(empty.ids == std::vector<std::int32_t>{0, 1, 2, 2, 2, 2});
  CHECK(empty.mask == std::vector<std::uint8_t>{1, 1, 0, 0, 0, 0});

  const auto hh = tokenize("Hello hello,", vocab, 6);
  CHECK(hh.ids[1] == hh.ids[2]);
  CHECK(hh.ids[1] == 4);

  std::string long_text;
  for (int i = 0; i < 100; ++i) long_text += "w" + std::to_string(i) + " ";
  const auto cut = tokenize(long_text, vocab, 16);
  CHECK(cut.ids.size() == 16);
  CHECK(std::count(cut.ids.begin(), cut.ids.end(), Vocabulary::kUnk) == 14);
  CHECK(cut.ids.back() == Vocabulary::kSep);

  CHECK(split_words("Don't STOP-me now!") == std::vector<std::string>{"don", "t", "stop", "me", "now"});
}

TEST_CASE("batches left-pad to the window") {
  Timeline t{"b", {{"a", 10, "none"}, {"b", 20, "switch"}}};
  const auto f = testsupport::make_fixture({t}, 3, 4);
  const auto& b = f.batch;
  CHECK(b.size == 2);
  CHECK(b.post_mask == std::vector<std::uint8_t>{0, 0, 1, 0, 1, 1});
  CHECK(b.first_real_slot(0) == 2);
  CHECK(b.first_real_slot(1) == 1);
  CHECK(std::isnan(b.times[0]));
  CHECK(b.times[5] == 20.0);
  CHECK(b.labels[1] == f.labels.index("switch"));
}

TEST_CASE("fold partition") {
  std::mt19937_64 rng(2);
  std::vector<Timeline> tl;
  for (int i = 0; i < 74; ++i) tl.push_back(testsupport::random_timeline(rng, "t" + std::to_string(i), 3, false));
  const auto folds = split_folds(tl, 5, 12);
  REQUIRE(folds.size() == 5);
  std::set<std::string> all;
  for (const auto& f : folds) {
    CHECK((f.test.size() == 14 || f.test.size() == 15));
    for (const auto& id : f.test) CHECK(all.insert(id).second);
    std::set<std::string> tr(f.train.begin(), f.train.end());
    for (const auto& id : f.dev) CHECK_FALSE(tr.count(id));
    for (const auto& id : f.test) CHECK_FALSE(tr.count(id));
    CHECK(f.train.size() + f.dev.size() + f.test.size() == 74);
    CHECK(double(f.dev.size()) / double(f.dev.size() + f.train.size()) == doctest::Approx(0.25).epsilon(0.05));
  }
  CHECK(all.size() == 74);

  std::vector<Timeline> five(tl.begin(), tl.begin() + 5);
  for (const auto& f : split_folds(five, 5, 0)) CHECK(f.test.size() == 1);
  CHECK_THROWS(split_folds(std::span<const Timeline>(tl.data(), 4), 5, 0));
  CHECK(split_folds(tl, 5, 3)[2].test == split_folds(tl, 5, 3)[2].test);
}

TEST_CASE("vocabulary ignores held-out text") {
  std::mt19937_64 rng(3);
  std::vector<Timeline> tl;
  for (int i = 0; i < 10; ++i) tl.push_back(testsupport::random_timeline(rng, "t" + std::to_string(i), 4, false));
  const auto fold = split_folds(tl, 5, 1)[0];
  const auto build = [&](const std::vector<Timeline>& corpus) {
    const auto train = select_timelines(corpus, fold.train);
    return Vocabulary::build(train).tokens();
  };
  const auto before = build(tl);
  auto perturbed = tl;
  for (auto& t : perturbed) {
    if (std::find(fold.train.begin(), fold.train.end(), t.id) != fold.train.end()) continue;
    for (auto& p : t.posts) p.text = "unseen words here " + p.text;
  }
  CHECK(build(perturbed) == before);
}

TEST_CASE("synthetic generator") {
  SUBCASE("labels follow the horizon majority rule") {
    CHECK(oracle_labels({true, true, false}, {0, 60, 120}, 21600) ==
          std::vector<std::string>{"none", "none", "switch"});
    CHECK(oracle_labels({true, false, true}, {0, 60, 120}, 21600) ==
          std::vector<std::string>{"none", "switch", "none"});

    GeneratorConfig c;
    c.timelines = 300;
    const auto tl = generate_synthetic(c, 7);
    std::size_t switches = 0, posts = 0;
    for (const auto& t : tl) {
      std::vector<bool> pos;
      std::vector<std::int64_t> times;
      std::vector<std::string> got;
      for (const auto& p : t.posts) {
        pos.push_back(is_positive(p.text));
        times.push_back(*p.timestamp);
        got.push_back(p.label);
      }
      CHECK(got == oracle_labels(pos, times, c.horizon));
      switches += std::count(got.begin(), got.end(), "switch");
      posts += got.size();
      CHECK(t.posts.size() >= c.min_posts);
      CHECK(t.posts.size() <= c.max_posts);
    }
    CHECK(switches > posts / 10);
  }

  SUBCASE("no horizon means no switches") {
    GeneratorConfig c;
    c.timelines = 20;
    c.min_gap = c.max_gap = 86400;
    for (const auto& t : generate_synthetic(c, 1)) {
      for (const auto& p : t.posts) CHECK(p.label == "none");
    }
  }

  SUBCASE("deterministic per seed") {
    GeneratorConfig c;
    c.timelines = 10;
    std::ostringstream a, b, other;
    write_timelines(a, generate_synthetic(c, 5));
    write_timelines(b, generate_synthetic(c, 5));
    write_timelines(other, generate_synthetic(c, 6));
    CHECK(a.str() == b.str());
    CHECK(a.str() != other.str());
  }

  SUBCASE("config validation") {
    GeneratorConfig c;
    c.min_posts = 5;
    c.max_posts = 4;
    CHECK_THROWS(c.validate());
    CHECK_THROWS(generator_config_from_json(R"({"timelines": 3, "bogus": 1})"));
    CHECK(generator_config_from_json(R"({"timelines": 3, "horizon": 60})").horizon == 60.0);
  }
}
