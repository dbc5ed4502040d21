// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "dta/vit.hpp"

namespace dta {

struct Checkpoint {
    Model model;
    // mode, parent hash, training config, metrics, seed.
    nlohmann::json provenance = nlohmann::json::object();
};

inline constexpr uint32_t kCheckpointVersion = 1;

/// SHA-256 (hex) of the tensor blob: every parameter then every adapter
/// tensor, little-endian float32, in named_tensors order.
std::string content_hash(const Model& model);

nlohmann::json config_to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace dta
