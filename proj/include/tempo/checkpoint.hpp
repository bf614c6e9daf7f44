#pragma once

// Binary checkpoint: "TEMPOCK1", uint32 version, a JSON metadata block
// (model config, ablation flags, vocabulary, labels, caller extras) and every
// named parameter tensor with its shape and raw little-endian values.
// Files are written to a temporary sibling and renamed into place.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "tempo/data.hpp"
#include "tempo/model.hpp"

namespace tempo::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

struct Metadata {
  model::ModelConfig config;
  model::AblationFlags flags;
  std::vector<std::string> vocab;
  std::vector<std::string> labels;
  nlohmann::json extra = nlohmann::json::object();
};

template <class T>
void save(const std::filesystem::path& path, const model::Classifier<T>& model,
          const data::Vocabulary& vocab, const data::LabelSet& labels,
          const nlohmann::json& extra = nlohmann::json::object());

template <class T>
struct Loaded {
  Metadata meta;
  std::unique_ptr<model::Classifier<T>> model;
};

// Rebuilds the model from the stored config and overwrites every parameter.
// Throws on a bad magic/version, a truncated file, or a parameter whose name,
// shape or element type does not match the rebuilt model.
template <class T>
Loaded<T> load(const std::filesystem::path& path);

}  // namespace tempo::checkpoint
