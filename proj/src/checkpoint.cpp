#include "tempo/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tempo::checkpoint {

namespace {

constexpr char kMagic[8] = {'T', 'E', 'M', 'P', 'O', 'C', 'K', '1'};

template <class V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class V>
V get(std::istream& in, const std::string& what) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) {
    throw std::runtime_error("checkpoint: truncated while reading " + what);
  }
  return v;
}

std::string get_string(std::istream& in, std::uint64_t n, const std::string& what) {
  std::string s(n, '\0');
  if (n > 0 && !in.read(s.data(), static_cast<std::streamsize>(n))) {
    throw std::runtime_error("checkpoint: truncated while reading " + what);
  }
  return s;
}

}  // namespace

template <class T>
void save(const std::filesystem::path& path, const model::Classifier<T>& model,
          const data::Vocabulary& vocab, const data::LabelSet& labels, const nlohmann::json& extra) {
  const nlohmann::json meta = {{"config", model::to_json(model.config())},
                               {"flags", model::to_json(model.flags())},
                               {"vocab", vocab.tokens()},
                               {"labels", labels.names()},
                               {"extra", extra}};
  const std::string meta_text = meta.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kVersion);
    put<std::uint64_t>(out, meta_text.size());
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    const auto& items = model.parameters().items();
    put<std::uint64_t>(out, items.size());
    for (const auto& p : items) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put<std::uint8_t>(out, static_cast<std::uint8_t>(sizeof(T)));
      put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.dim()));
      for (std::size_t e : p.value.shape()) put<std::uint64_t>(out, e);
      const auto values = p.value.data();
      out.write(reinterpret_cast<const char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(T)));
    }
    out.flush();
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
Loaded<T> load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw std::runtime_error("checkpoint: " + path.string() + " is not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto meta_len = get<std::uint64_t>(in, "metadata length");
  const auto meta = nlohmann::json::parse(get_string(in, meta_len, "metadata"));

  Loaded<T> out;
  out.meta.config = model::model_config_from_json(meta.at("config"));
  out.meta.flags = model::ablation_flags_from_json(meta.at("flags"));
  out.meta.vocab = meta.at("vocab").get<std::vector<std::string>>();
  out.meta.labels = meta.at("labels").get<std::vector<std::string>>();
  out.meta.extra = meta.value("extra", nlohmann::json::object());
  out.model = model::make_classifier<T>(out.meta.config, out.meta.flags, 0);

  auto& items = out.model->parameters().items();
  const auto count = get<std::uint64_t>(in, "parameter count");
  if (count != items.size()) {
    throw std::runtime_error("checkpoint: stores " + std::to_string(count) + " parameters, model has " +
                             std::to_string(items.size()));
  }
  for (auto& p : items) {
    const auto name_len = get<std::uint32_t>(in, "parameter name length");
    const std::string name = get_string(in, name_len, "parameter name");
    if (name != p.name) throw std::runtime_error("checkpoint: expected parameter " + p.name + ", found " + name);
    const auto width = get<std::uint8_t>(in, name + " element type");
    if (width != sizeof(T)) {
      throw std::runtime_error("checkpoint: " + name + " stores " + std::to_string(8 * width) +
                               "-bit values, loader expects " + std::to_string(8 * sizeof(T)));
    }
    const auto rank = get<std::uint32_t>(in, name + " rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(get<std::uint64_t>(in, name + " shape"));
    if (shape != p.value.shape()) {
      throw std::runtime_error("checkpoint: " + name + " has shape " + shape_str(shape) + ", model expects " +
                               shape_str(p.value.shape()));
    }
    auto values = p.value.mutable_data();
    if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(T)))) {
      throw std::runtime_error("checkpoint: truncated while reading " + name);
    }
  }
  return out;
}

template void save(const std::filesystem::path&, const model::Classifier<float>&, const data::Vocabulary&,
                   const data::LabelSet&, const nlohmann::json&);
template void save(const std::filesystem::path&, const model::Classifier<double>&, const data::Vocabulary&,
                   const data::LabelSet&, const nlohmann::json&);
template Loaded<float> load(const std::filesystem::path&);
template Loaded<double> load(const std::filesystem::path&);

}  // namespace tempo::checkpoint
