#pragma once

#include <filesystem>
#include <iosfwd>

#include <json.hpp>

#include "stepmask/model.hpp"

namespace stepmask {

// Binary checkpoint: "VTFM", u32 version, model config, then every parameter
// array as (u32 rank, u32 dims..., f64 data) in declaration order.
void write_checkpoint(std::ostream& out, const ModelConfig& cfg, const TransformerParams& params);

struct Checkpoint {
  ModelConfig config;
  TransformerParams params;
  nlohmann::json sidecar;  // empty when read from a bare stream
};

Checkpoint read_checkpoint(std::istream& in);

// Writes `path` and `path.json` (config, digest and caller provenance).
// Returns the parameter digest.
std::string save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                            const TransformerParams& params,
                            const nlohmann::json& provenance = nlohmann::json::object());

Checkpoint load_checkpoint(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& checkpoint);

}  // namespace stepmask
