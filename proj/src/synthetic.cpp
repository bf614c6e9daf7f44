#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "tempo/data.hpp"
#include "tempo/rng.hpp"

namespace tempo::data {

namespace {

constexpr std::array<std::string_view, 5> kPositive = {"good", "great", "happy", "glad", "love"};
constexpr std::array<std::string_view, 5> kNegative = {"bad", "awful", "sad", "angry", "hate"};

std::size_t uniform_index(std::mt19937_64& engine, std::size_t n) {
  return static_cast<std::size_t>(uniform01(engine) * static_cast<double>(n));
}

std::size_t uniform_between(std::mt19937_64& engine, std::size_t lo, std::size_t hi) {
  return lo + uniform_index(engine, hi - lo + 1);
}

std::string filler_word(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "word%02zu", i);
  return buf;
}

}  // namespace

std::span<const std::string_view> positive_words() { return kPositive; }
std::span<const std::string_view> negative_words() { return kNegative; }

void GeneratorConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("generator config: " + what); };
  if (timelines == 0) fail("timelines must be positive");
  if (min_posts == 0 || min_posts > max_posts) fail("need 1 <= min_posts <= max_posts");
  if (!(min_gap > 0.0) || !(min_gap <= max_gap) || !std::isfinite(max_gap)) {
    fail("need 0 < min_gap <= max_gap");
  }
  if (!(horizon > 0.0) || !std::isfinite(horizon)) fail("horizon must be positive");
  if (!(positive_rate >= 0.0 && positive_rate <= 1.0)) fail("positive_rate must be in [0, 1]");
  if (min_fillers > max_fillers) fail("min_fillers exceeds max_fillers");
  if (max_fillers > 0 && filler_vocab == 0) fail("filler_vocab must be positive when fillers are used");
}

GeneratorConfig generator_config_from_json(std::string_view json_text) {
  const auto j = nlohmann::json::parse(json_text);
  if (!j.is_object()) throw std::invalid_argument("generator config: expected a JSON object");
  GeneratorConfig c;
  for (const auto& [key, value] : j.items()) {
    auto as_size = [&] {
      if (!value.is_number_unsigned()) {
        throw std::invalid_argument("generator config: \"" + key + "\" must be a non-negative integer");
      }
      return value.get<std::size_t>();
    };
    auto as_real = [&] {
      if (!value.is_number()) throw std::invalid_argument("generator config: \"" + key + "\" must be a number");
      return value.get<double>();
    };
    if (key == "timelines") c.timelines = as_size();
    else if (key == "min_posts") c.min_posts = as_size();
    else if (key == "max_posts") c.max_posts = as_size();
    else if (key == "min_gap") c.min_gap = as_real();
    else if (key == "max_gap") c.max_gap = as_real();
    else if (key == "horizon") c.horizon = as_real();
    else if (key == "positive_rate") c.positive_rate = as_real();
    else if (key == "min_fillers") c.min_fillers = as_size();
    else if (key == "max_fillers") c.max_fillers = as_size();
    else if (key == "filler_vocab") c.filler_vocab = as_size();
    else if (key == "start_time") {
      if (!value.is_number_integer()) throw std::invalid_argument("generator config: \"start_time\" must be an integer");
      c.start_time = value.get<std::int64_t>();
    } else {
      throw std::invalid_argument("generator config: unknown key \"" + key + "\"");
    }
  }
  c.validate();
  return c;
}

GeneratorConfig load_generator_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open generator config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return generator_config_from_json(ss.str());
}

std::vector<Timeline> generate_synthetic(const GeneratorConfig& config, std::uint64_t seed) {
  config.validate();
  auto engine = keyed_engine({seed, 0x5747});
  const double log_lo = std::log(config.min_gap), log_hi = std::log(config.max_gap);
  std::vector<Timeline> out;
  out.reserve(config.timelines);
  for (std::size_t ti = 0; ti < config.timelines; ++ti) {
    Timeline t;
    char id[32];
    std::snprintf(id, sizeof id, "t%04zu", ti);
    t.id = id;
    const std::size_t n = uniform_between(engine, config.min_posts, config.max_posts);
    std::vector<bool> positive(n);
    std::vector<std::int64_t> times(n);
    std::int64_t now = config.start_time;
    for (std::size_t i = 0; i < n; ++i) {
      if (i > 0) now += std::llround(std::exp(log_lo + (log_hi - log_lo) * uniform01(engine)));
      times[i] = now;
      positive[i] = uniform01(engine) < config.positive_rate;

      const auto family = positive[i] ? positive_words() : negative_words();
      const std::size_t fillers = uniform_between(engine, config.min_fillers, config.max_fillers);
      const std::size_t slot = uniform_index(engine, fillers + 1);
      std::string text;
      for (std::size_t f = 0; f <= fillers; ++f) {
        if (!text.empty()) text += ' ';
        text += f == slot ? std::string(family[uniform_index(engine, family.size())])
                          : filler_word(uniform_index(engine, config.filler_vocab));
      }

      int votes = 0;  // positive minus negative among earlier posts in the horizon
      for (std::size_t k = i; k-- > 0;) {
        if (static_cast<double>(times[i] - times[k]) > config.horizon) break;
        votes += positive[k] ? 1 : -1;
      }
      const bool switched = votes != 0 && (votes > 0) != positive[i];
      t.posts.push_back(Post{std::move(text), times[i],
                             std::string(switched ? kSwitchLabel : kNoneLabel)});
    }
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace tempo::data
