#include "tempo/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <unordered_set>

#include "json.hpp"
#include "tempo/rng.hpp"

namespace tempo::data {

using nlohmann::json;

ParseError::ParseError(const std::string& source, std::size_t line, const std::string& message)
    : std::runtime_error(source + ":" + std::to_string(line) + ": " + message), line_(line) {}

namespace {

Post parse_post(const json& j, const std::string& source, std::size_t line, std::size_t index) {
  auto fail = [&](const std::string& what) {
    throw ParseError(source, line, "post " + std::to_string(index) + ": " + what);
  };
  if (!j.is_object()) fail("expected an object");
  Post post;
  if (!j.contains("text") || !j["text"].is_string()) fail("missing string field \"text\"");
  post.text = j["text"].get<std::string>();
  if (split_words(post.text).empty()) fail("text is empty after normalization");
  if (!j.contains("label") || !j["label"].is_string()) fail("missing string field \"label\"");
  post.label = j["label"].get<std::string>();
  if (post.label.empty()) fail("empty label");
  if (j.contains("timestamp") && !j["timestamp"].is_null()) {
    if (!j["timestamp"].is_number_integer()) fail("\"timestamp\" must be integer seconds");
    post.timestamp = j["timestamp"].get<std::int64_t>();
  }
  for (const auto& [key, _] : j.items()) {
    if (key != "text" && key != "label" && key != "timestamp") fail("unknown field \"" + key + "\"");
  }
  return post;
}

}  // namespace

std::vector<Timeline> parse_timelines(std::istream& in, const std::string& source) {
  std::vector<Timeline> out;
  std::unordered_set<std::string> seen;
  std::optional<bool> timed;  // dataset-wide timestamp presence
  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    json j;
    try {
      j = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ParseError(source, line_no, std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(source, line_no, "expected a JSON object");
    if (!j.contains("timeline_id") || !j["timeline_id"].is_string()) {
      throw ParseError(source, line_no, "missing string field \"timeline_id\"");
    }
    if (!j.contains("posts") || !j["posts"].is_array() || j["posts"].empty()) {
      throw ParseError(source, line_no, "\"posts\" must be a non-empty array");
    }
    for (const auto& [key, _] : j.items()) {
      if (key != "timeline_id" && key != "posts") {
        throw ParseError(source, line_no, "unknown field \"" + key + "\"");
      }
    }
    Timeline t;
    t.id = j["timeline_id"].get<std::string>();
    if (!seen.insert(t.id).second) throw ParseError(source, line_no, "duplicate timeline id " + t.id);
    for (std::size_t i = 0; i < j["posts"].size(); ++i) {
      Post p = parse_post(j["posts"][i], source, line_no, i);
      const bool has = p.timestamp.has_value();
      if (!timed) timed = has;
      if (*timed != has) {
        throw ParseError(source, line_no,
                         "post " + std::to_string(i) +
                             ": timestamps must be present for all posts or for none");
      }
      if (has && !t.posts.empty() && *p.timestamp < *t.posts.back().timestamp) {
        throw ParseError(source, line_no, "post " + std::to_string(i) + ": timestamps decrease");
      }
      t.posts.push_back(std::move(p));
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Timeline> parse_timelines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset " + path.string());
  return parse_timelines(in, path.string());
}

void write_timelines(std::ostream& out, std::span<const Timeline> timelines) {
  for (const auto& t : timelines) {
    json posts = json::array();
    for (const auto& p : t.posts) {
      json jp = {{"text", p.text}, {"label", p.label}};
      jp["timestamp"] = p.timestamp ? json(*p.timestamp) : json(nullptr);
      posts.push_back(std::move(jp));
    }
    out << json{{"timeline_id", t.id}, {"posts", std::move(posts)}}.dump() << '\n';
  }
}

void write_timelines(const std::filesystem::path& path, std::span<const Timeline> timelines) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    write_timelines(out, timelines);
  }
  std::filesystem::rename(tmp, path);
}

bool has_timestamps(std::span<const Timeline> timelines) {
  for (const auto& t : timelines) {
    for (const auto& p : t.posts) {
      if (!p.timestamp) return false;
    }
  }
  return !timelines.empty();
}

std::vector<Stream> build_streams(const Timeline& timeline, std::size_t window) {
  if (window == 0) throw std::invalid_argument("build_streams: window must be at least 1");
  std::vector<Stream> streams;
  streams.reserve(timeline.posts.size());
  for (std::size_t i = 0; i < timeline.posts.size(); ++i) {
    const std::size_t begin = i + 1 >= window ? i + 1 - window : 0;
    Stream s;
    s.timeline_id = timeline.id;
    s.index = i;
    s.posts.assign(timeline.posts.begin() + static_cast<std::ptrdiff_t>(begin),
                   timeline.posts.begin() + static_cast<std::ptrdiff_t>(i) + 1);
    s.label = timeline.posts[i].label;
    streams.push_back(std::move(s));
  }
  return streams;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c) || c >= 0x80) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Vocabulary::Vocabulary() {
  for (const char* s : {"[CLS]", "[SEP]", "[PAD]", "[UNK]"}) insert(s);
}

void Vocabulary::insert(const std::string& token) {
  if (index_.emplace(token, static_cast<std::int32_t>(tokens_.size())).second) tokens_.push_back(token);
}

Vocabulary Vocabulary::build(std::span<const Timeline* const> timelines) {
  Vocabulary v;
  for (const Timeline* t : timelines) {
    for (const auto& p : t->posts) {
      for (const auto& w : split_words(p.text)) v.insert(w);
    }
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(std::span<const std::string> tokens) {
  Vocabulary v;
  if (tokens.size() < kSpecialCount) throw std::invalid_argument("vocabulary is missing special tokens");
  for (std::size_t i = 0; i < kSpecialCount; ++i) {
    if (tokens[i] != v.tokens_[i]) throw std::invalid_argument("vocabulary special tokens out of order");
  }
  for (std::size_t i = kSpecialCount; i < tokens.size(); ++i) {
    if (v.index_.count(tokens[i])) throw std::invalid_argument("duplicate vocabulary token " + tokens[i]);
    v.insert(tokens[i]);
  }
  return v;
}

std::int32_t Vocabulary::id(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

TokenizedPost tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("tokenize: max_len must leave room for [CLS] and [SEP]");
  TokenizedPost out;
  out.ids.assign(max_len, Vocabulary::kPad);
  out.mask.assign(max_len, 0);
  out.ids[0] = Vocabulary::kCls;
  out.mask[0] = 1;
  std::size_t pos = 1;
  for (const auto& w : split_words(text)) {
    if (pos >= max_len - 1) break;
    out.ids[pos] = vocab.id(w);
    out.mask[pos] = 1;
    ++pos;
  }
  out.ids[pos] = Vocabulary::kSep;
  out.mask[pos] = 1;
  return out;
}

LabelSet::LabelSet(std::vector<std::string> names) : names_(std::move(names)) {
  std::set<std::string> unique(names_.begin(), names_.end());
  if (unique.size() != names_.size()) throw std::invalid_argument("label set has duplicates");
}

LabelSet LabelSet::collect(std::span<const Timeline> timelines) {
  std::set<std::string> names;
  for (const auto& t : timelines) {
    for (const auto& p : t.posts) names.insert(p.label);
  }
  return LabelSet(std::vector<std::string>(names.begin(), names.end()));
}

int LabelSet::index(std::string_view name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw std::invalid_argument("unknown label \"" + std::string(name) + "\"");
  return static_cast<int>(it - names_.begin());
}

std::size_t StreamBatch::first_real_slot(std::size_t sample) const {
  for (std::size_t p = 0; p < window; ++p) {
    if (post_mask[sample * window + p]) return p;
  }
  return window;
}

StreamBatch make_batch(std::span<const Stream> streams, const Vocabulary& vocab,
                       const LabelSet& labels, std::size_t window, std::size_t max_len) {
  if (streams.empty()) throw std::invalid_argument("make_batch: no streams");
  if (window == 0) throw std::invalid_argument("make_batch: window must be at least 1");
  StreamBatch b;
  b.size = streams.size();
  b.window = window;
  b.max_len = max_len;
  b.token_ids.resize(b.size * window * max_len);
  b.token_mask.resize(b.size * window * max_len);
  b.post_mask.assign(b.size * window, 0);
  b.times.assign(b.size * window, std::numeric_limits<double>::quiet_NaN());
  b.labels.resize(b.size);
  const TokenizedPost pad = tokenize("", vocab, max_len);
  bool all_timed = true;
  for (std::size_t s = 0; s < b.size; ++s) {
    const Stream& st = streams[s];
    if (st.posts.empty()) throw std::invalid_argument("make_batch: empty stream");
    if (st.posts.size() > window) {
      throw std::invalid_argument("make_batch: stream of " + std::to_string(st.posts.size()) +
                                  " posts exceeds window " + std::to_string(window));
    }
    const std::size_t offset = window - st.posts.size();
    for (std::size_t p = 0; p < window; ++p) {
      const bool real = p >= offset;
      const TokenizedPost tp = real ? tokenize(st.posts[p - offset].text, vocab, max_len) : pad;
      const std::size_t base = (s * window + p) * max_len;
      std::copy(tp.ids.begin(), tp.ids.end(), b.token_ids.begin() + static_cast<std::ptrdiff_t>(base));
      std::copy(tp.mask.begin(), tp.mask.end(), b.token_mask.begin() + static_cast<std::ptrdiff_t>(base));
      if (real) {
        b.post_mask[s * window + p] = 1;
        const auto& ts = st.posts[p - offset].timestamp;
        if (ts) {
          b.times[s * window + p] = static_cast<double>(*ts);
        } else {
          all_timed = false;
        }
      }
    }
    b.labels[s] = st.label.empty() ? -1 : labels.index(st.label);
  }
  b.has_times = all_timed;
  return b;
}

namespace {

void shuffle(std::vector<std::string>& v, std::mt19937_64& engine) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(engine() % i);
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace

std::vector<Fold> split_folds(std::span<const Timeline> timelines, std::size_t k, std::uint64_t seed,
                              double dev_fraction) {
  if (k == 0) throw std::invalid_argument("split_folds: k must be positive");
  if (timelines.size() < k) {
    throw std::invalid_argument("split_folds: " + std::to_string(timelines.size()) +
                                " timelines cannot fill " + std::to_string(k) + " folds");
  }
  if (dev_fraction < 0.0 || dev_fraction >= 1.0) {
    throw std::invalid_argument("split_folds: dev_fraction must be in [0, 1)");
  }
  std::vector<std::string> ids;
  for (const auto& t : timelines) ids.push_back(t.id);
  auto engine = keyed_engine({seed, 0xF01D});
  shuffle(ids, engine);

  const std::size_t n = ids.size(), base = n / k, extra = n % k;
  std::vector<std::vector<std::string>> chunks(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t len = base + (f < extra ? 1 : 0);
    chunks[f].assign(ids.begin() + static_cast<std::ptrdiff_t>(pos),
                     ids.begin() + static_cast<std::ptrdiff_t>(pos + len));
    pos += len;
  }
  std::vector<Fold> folds(k);
  for (std::size_t f = 0; f < k; ++f) {
    folds[f].test = chunks[f];
    std::vector<std::string> rest;
    for (std::size_t g = 0; g < k; ++g) {
      if (g != f) rest.insert(rest.end(), chunks[g].begin(), chunks[g].end());
    }
    auto fold_engine = keyed_engine({seed, 0xDE7, f});
    shuffle(rest, fold_engine);
    auto n_dev = static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(rest.size())));
    if (n_dev >= rest.size()) n_dev = rest.size() - 1;
    folds[f].dev.assign(rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(n_dev));
    folds[f].train.assign(rest.begin() + static_cast<std::ptrdiff_t>(n_dev), rest.end());
  }
  return folds;
}

std::vector<const Timeline*> select_timelines(std::span<const Timeline> timelines,
                                              std::span<const std::string> ids) {
  std::unordered_map<std::string, const Timeline*> by_id;
  for (const auto& t : timelines) by_id.emplace(t.id, &t);
  std::vector<const Timeline*> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw std::invalid_argument("unknown timeline id " + id);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace tempo::data
