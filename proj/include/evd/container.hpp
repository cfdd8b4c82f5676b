#pragma once

// Dimension-tagged binary tensor files and on-disk corpus layout.
//
// Tensor file: "EVDT", u32 LE header length, UTF-8 JSON header
// {"dtype": "f32"|"i32", "shape": [...], "meta": {...}}, then the raw
// little-endian payload in row-major order.
//
// Corpus directory:
//   manifest.json
//   source/images.evdt, source/labels.evdt
//   target/scene_NNNNN.evs, target/samples.json, target/aps.evdt
//   eval/...    (same layout as target)
//   sealed/target_labels.evdt, sealed/eval_labels.evdt

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evd/synth.hpp"

namespace evd::io {

struct TensorFile {
  std::string dtype;  // "f32" or "i32"
  std::vector<std::int64_t> shape;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<float> f32;
  std::vector<std::int32_t> i32;

  [[nodiscard]] std::int64_t numel() const;
};

void write_tensor_file(const std::filesystem::path& path, std::span<const float> data,
                       const std::vector<std::int64_t>& shape,
                       const nlohmann::json& meta = nlohmann::json::object());
void write_tensor_file(const std::filesystem::path& path, std::span<const std::int32_t> data,
                       const std::vector<std::int64_t>& shape,
                       const nlohmann::json& meta = nlohmann::json::object());
TensorFile read_tensor_file(const std::filesystem::path& path);

nlohmann::json to_json(const synth::CorpusOptions& opt);

void save_corpora(const synth::Corpora& corpora, const synth::CorpusOptions& opt,
                  const std::filesystem::path& dir);

synth::SourceCorpus load_source(const std::filesystem::path& dir);
/// split is "target" or "eval". Never touches the sealed/ namespace.
synth::TargetCorpus load_target(const std::filesystem::path& dir, const std::string& split);
/// The only reader of sealed/; used by evaluation code paths.
synth::SealedLabels load_sealed_labels(const std::filesystem::path& dir, const std::string& split);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// Git blob hash ("blob <size>\0" + content), hex SHA-1.
std::string git_blob_hash(std::span<const unsigned char> content);
std::string git_blob_hash_file(const std::filesystem::path& path);

}  // namespace evd::io
