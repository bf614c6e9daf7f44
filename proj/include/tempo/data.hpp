#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tempo::data {

struct Post {
  std::string text;
  std::optional<std::int64_t> timestamp;  // seconds since epoch
  std::string label;
};

struct Timeline {
  std::string id;
  std::vector<Post> posts;  // chronological
};

// One training sample: the window of most recent posts ending at the
// labeled current post (last element).
struct Stream {
  std::string timeline_id;
  std::size_t index = 0;  // position of the current post in its timeline
  std::vector<Post> posts;
  std::string label;
};

// Malformed input. what() carries the source and 1-based line number.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& message);
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// One JSON object per line:
//   {"timeline_id": "...", "posts": [{"text": "...", "timestamp": 1600000000, "label": "..."}]}
// "timestamp" may be null or absent, but then it must be absent for every post in the file.
std::vector<Timeline> parse_timelines(std::istream& in, const std::string& source = "<stream>");
std::vector<Timeline> parse_timelines(const std::filesystem::path& path);
void write_timelines(std::ostream& out, std::span<const Timeline> timelines);
void write_timelines(const std::filesystem::path& path, std::span<const Timeline> timelines);

bool has_timestamps(std::span<const Timeline> timelines);

// Stream i holds posts max(0, i-w+1)..i and the label of post i.
std::vector<Stream> build_streams(const Timeline& timeline, std::size_t window);

// Lowercased alphanumeric runs; everything else separates tokens.
std::vector<std::string> split_words(std::string_view text);

class Vocabulary {
 public:
  static constexpr std::int32_t kCls = 0;
  static constexpr std::int32_t kSep = 1;
  static constexpr std::int32_t kPad = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::size_t kSpecialCount = 4;

  Vocabulary();
  // Tokens in order of first appearance over the given timelines.
  static Vocabulary build(std::span<const Timeline* const> timelines);
  static Vocabulary from_tokens(std::span<const std::string> tokens);

  std::int32_t id(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }
  // Index-ordered, including the four specials.
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void insert(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct TokenizedPost {
  std::vector<std::int32_t> ids;  // [CLS] content... [SEP] [PAD]...
  std::vector<std::uint8_t> mask;
};

// Keeps at most max_len - 2 content tokens.
TokenizedPost tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

class LabelSet {
 public:
  LabelSet() = default;
  explicit LabelSet(std::vector<std::string> names);
  // Sorted unique labels of every post.
  static LabelSet collect(std::span<const Timeline> timelines);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  int index(std::string_view name) const;  // throws for unknown labels

 private:
  std::vector<std::string> names_;
};

// Fixed-shape encoding of a batch of streams. Streams shorter than the
// window are left-padded with empty pseudo-posts whose post_mask is 0, so
// the current post always sits at slot window-1.
struct StreamBatch {
  std::size_t size = 0;
  std::size_t window = 0;
  std::size_t max_len = 0;
  std::vector<std::int32_t> token_ids;  // size * window * max_len
  std::vector<std::uint8_t> token_mask;
  std::vector<std::uint8_t> post_mask;  // size * window
  std::vector<double> times;            // size * window, NaN for padding / untimed data
  bool has_times = false;
  std::vector<int> labels;  // size

  std::size_t first_real_slot(std::size_t sample) const;
};

StreamBatch make_batch(std::span<const Stream> streams, const Vocabulary& vocab,
                       const LabelSet& labels, std::size_t window, std::size_t max_len);

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> dev;
  std::vector<std::string> test;
};

// Timeline-level k-fold partition: every timeline is in exactly one test set;
// dev_fraction of the remaining timelines form each fold's dev set.
std::vector<Fold> split_folds(std::span<const Timeline> timelines, std::size_t k, std::uint64_t seed,
                              double dev_fraction = 0.25);

std::vector<const Timeline*> select_timelines(std::span<const Timeline> timelines,
                                              std::span<const std::string> ids);

// Synthetic change detection corpus. Each post carries one polarity word
// (positive or negative family) among neutral filler words; a post is
// labeled "switch" when its polarity differs from the strict majority
// polarity of the earlier posts of its timeline within `horizon` seconds,
// and "none" otherwise (including an empty horizon or a tie).
struct GeneratorConfig {
  std::size_t timelines = 200;
  std::size_t min_posts = 10;
  std::size_t max_posts = 40;
  double min_gap = 60.0;      // seconds, log-uniform gap distribution
  double max_gap = 86400.0;
  double horizon = 21600.0;   // 6 h
  double positive_rate = 0.5;
  std::size_t min_fillers = 1;
  std::size_t max_fillers = 4;
  std::size_t filler_vocab = 40;
  std::int64_t start_time = 1600000000;

  void validate() const;
};

// Flat JSON object with the field names above; unknown keys are rejected.
GeneratorConfig load_generator_config(const std::filesystem::path& path);
GeneratorConfig generator_config_from_json(std::string_view json_text);

std::vector<Timeline> generate_synthetic(const GeneratorConfig& config, std::uint64_t seed);

inline constexpr std::string_view kSwitchLabel = "switch";
inline constexpr std::string_view kNoneLabel = "none";

std::span<const std::string_view> positive_words();
std::span<const std::string_view> negative_words();

}  // namespace tempo::data
