#pragma once
// JSON experiment configuration: parsing with defaults, strict key checking,
// and emission of the fully resolved document.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "confmoe/synthdata.hpp"
#include "confmoe/training.hpp"

namespace confmoe {

struct ExperimentConfig {
    SynthSpec synth;
    Protocol protocol = RandomDropout{0.5};
    ModelConfig model;
    std::filesystem::path output_dir = "runs/default";
    // When set, data is read from a directory written by `generate` instead of
    // being synthesized.
    std::optional<std::filesystem::path> dataset_dir;
};

// Missing keys take defaults; unknown keys raise ConfigError.
ExperimentConfig parse_experiment_config(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
nlohmann::json to_json(const SynthSpec& spec);
nlohmann::json to_json(const Protocol& protocol);
nlohmann::json to_json(const ModelConfig& model);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Sweep file: a base config plus the axes to cross.
struct SweepConfig {
    ExperimentConfig base;
    std::vector<GateKind> gates;
    std::vector<Variant> variants;
    std::vector<ImputeMode> impute;
    std::vector<std::uint64_t> seeds;
};

SweepConfig parse_sweep_config(const nlohmann::json& j);
SweepConfig load_sweep_config(const std::filesystem::path& path);

}  // namespace confmoe
