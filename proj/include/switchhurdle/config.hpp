#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "switchhurdle/data.hpp"
#include "switchhurdle/model.hpp"
#include "switchhurdle/training.hpp"

namespace switchhurdle {

struct DataConfig {
  std::string path;
  std::optional<std::size_t> limit;
};

/// Everything a run needs. Loaded from JSON with sections "model", "train"
/// and "data" plus a top-level "seed"; every field has a default.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::uint64_t seed = 1;

  /// Seed for parameter initialisation, derived from the root seed.
  std::uint64_t init_seed() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RunConfig& c);
/// Fields present in `j` override `base`; unknown keys raise std::invalid_argument.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});
RunConfig run_config_from_json(const nlohmann::json& j, RunConfig base = {});
RunConfig load_run_config(const std::filesystem::path& path);

nlohmann::json to_json(const SyntheticSpec& s);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j, SyntheticSpec base = {});

nlohmann::json to_json(const CategoryEncoder& e);
CategoryEncoder category_encoder_from_json(const nlohmann::json& j);

inline constexpr const char* kCheckpointMagic = "switch-hurdle-v1";

/// Binary container: magic line, length-prefixed JSON header (model config,
/// category dictionary, free-form metadata), then named float64 tensors.
void save_checkpoint(const std::filesystem::path& path, const Model& model, const CategoryEncoder& encoder,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  Model model;
  CategoryEncoder encoder;
  nlohmann::json metadata;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace switchhurdle
