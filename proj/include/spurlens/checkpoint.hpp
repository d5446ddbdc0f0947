#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "spurlens/models.hpp"

namespace spurlens {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything a checkpoint file holds. `extras` are additional named tensors
/// (e.g. "mask/conv0.weight") that are not model parameters.
struct Checkpoint {
  Model model;
  nlohmann::json provenance = nlohmann::json::object();
  std::vector<Parameter> extras;
};

std::vector<std::uint8_t> encode_checkpoint(const Model& model, const nlohmann::json& provenance = nlohmann::json::object(),
                                            std::span<const Parameter> extras = {});
Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes, const std::string& origin = "checkpoint");

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const nlohmann::json& provenance = nlohmann::json::object(),
                     std::span<const Parameter> extras = {});
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Loads the model; when `expected` is given the stored architecture must
/// match it exactly, otherwise ArchitectureError.
Model load_model(const std::filesystem::path& path, const std::optional<ModelConfig>& expected = std::nullopt);

}  // namespace spurlens
