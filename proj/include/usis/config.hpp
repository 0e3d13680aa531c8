// config.hpp
//
// Run configuration loaded from YAML: model, training and data sections.
// The same fields round-trip through JSON for checkpoint manifests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "usis/datakit.hpp"
#include "usis/model.hpp"
#include "usis/train.hpp"

namespace usis {

struct DataConfig {
    /// Used when no annotation file is given.
    int synthetic_count = 200;
    SynthConfig synth;
    std::string annotations;
    std::string images;
};

struct RunConfig {
    std::uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train;
    DataConfig data;

    /// Pushes the run seed into the model and training sections.
    void apply_seed(std::uint64_t s);
};

nlohmann::json model_config_to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json run_config_to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Generic YAML -> JSON conversion (scalars become numbers or booleans when
/// they parse as such).
nlohmann::json yaml_to_json(const std::string& text);

/// Throws ParseError on malformed YAML or invalid values.
RunConfig load_run_config(const std::filesystem::path& path);

/// FNV-1a of the encoder settings that determine the frozen backbone.
std::uint64_t backbone_config_hash(const EncoderConfig& c);

} // namespace usis
