#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "lipsync/sync_expert.hpp"
#include "lipsync/training.hpp"

// Configuration files are flat JSON objects with dotted keys, for example
//   {"loss.lambda_sync": 0.03, "model.base_channels": 16, "syncnet.max_steps": 2000}
// Nested objects are accepted and flattened. Keys under "syncnet." configure
// the sync expert; every other key belongs to generator training.
namespace lipsync::config {

/// Reads and flattens a config file.
nlohmann::json load_file(const std::filesystem::path& path);

/// Flattens nested objects into dotted keys; arrays are kept as values.
nlohmann::json flatten(const nlohmann::json& j);

/// Parses "key=value"; the value is read as JSON and falls back to a string.
std::pair<std::string, nlohmann::json> parse_assignment(const std::string& text);

/// Applies an ablation rung ("reconstruction", "sync", "perceptual", "gan").
/// Terms above the rung get weight 0; terms at or below it keep their values.
void apply_ablation(nlohmann::json& flat, const std::string& rung);

/// Overrides "seed" and "syncnet.seed" from D2L_SEED when it is set.
void apply_env_seed(nlohmann::json& flat);

/// The subsets of a flat config that belong to each consumer.
nlohmann::json training_part(const nlohmann::json& flat);
nlohmann::json expert_part(const nlohmann::json& flat);

struct ExpertSettings {
  sync::SyncNetConfig net;
  sync::ExpertHyper hyper;
};

nlohmann::json to_json(const ExpertSettings& s);
ExpertSettings expert_settings_from_json(const nlohmann::json& flat);

}  // namespace lipsync::config
