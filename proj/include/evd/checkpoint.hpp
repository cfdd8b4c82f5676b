#pragma once

// "EVDC" checkpoint container: magic, u32 header length, JSON header, blobs.
// The header lists every blob by name with its byte offset (relative to the
// end of the header) and size. Parameter blobs hold little-endian float32.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

#include "evd/models.hpp"

namespace evd::ckpt {

inline constexpr int kSchemaVersion = 1;

struct Archive {
  nlohmann::json header = nlohmann::json::object();
  std::map<std::string, std::string> blobs;  // name -> raw bytes
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
/// Throws FormatError on bad magic, truncation, or an unknown schema version.
Archive read_archive(const std::filesystem::path& path);

nlohmann::json to_json(const models::ArchConfig& arch);
models::ArchConfig arch_from_json(const nlohmann::json& j);

/// Stores parameters and buffers of `m` under "<prefix>/<name>".
void put_module(Archive& archive, const std::string& prefix, const torch::nn::Module& m);
/// Copies stored tensors into `m`; every parameter must be present with a matching shape.
void get_module(const Archive& archive, const std::string& prefix, torch::nn::Module& m);

void put_network(Archive& archive, const std::string& name, const models::Network& net);
models::Network get_network(const Archive& archive, const std::string& name);

std::string serialize_optimizer(const torch::optim::Optimizer& opt);
void deserialize_optimizer(const std::string& bytes, torch::optim::Optimizer& opt);

/// Deep copy through the archive encoding.
models::Network clone(const models::Network& net);

/// Single-network file, e.g. an exported student.
void save_network(const std::filesystem::path& path, const models::Network& net);
models::Network load_network(const std::filesystem::path& path);

}  // namespace evd::ckpt
