#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tsmamba/model.hpp"
#include "tsmamba/tensor.hpp"

namespace tsmamba {

/// File layout: 8-byte magic "TSMBCKPT", u64 little-endian manifest length,
/// manifest JSON, then the payload of little-endian float64 tensor bytes.
inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'M', 'B', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointFormatVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

nlohmann::json model_config_to_json(const ModelConfig& cfg);
/// Strict: unknown keys are InvalidConfig; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

struct Checkpoint {
    ModelConfig config;
    std::string stage;
    TSMambaModel model;
};

/// Writes to `path + ".tmp"` and renames over `path`.
void save_checkpoint(const std::string& path, const TSMambaModel& model, const std::string& stage);
/// Fully validated before any model is constructed.
Checkpoint load_checkpoint(const std::string& path);
/// Manifest only, for inspection.
nlohmann::json read_checkpoint_manifest(const std::string& path);

/// Bare named-tensor file in the checkpoint container (stage "tensors", no model_config).
void save_tensors(const std::string& path, const NamedTensors& tensors);
std::map<std::string, Tensor> load_tensors(const std::string& path);

/// In-memory container encoding, shared by the file helpers.
std::string encode_container(nlohmann::json manifest, const NamedTensors& tensors);
struct DecodedContainer {
    nlohmann::json manifest;
    NamedTensors tensors;  // in payload order
};
DecodedContainer decode_container(const std::string& bytes);

}  // namespace tsmamba
