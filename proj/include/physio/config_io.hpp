#pragma once

// JSON forms of the configuration structs. Every field is optional on input
// and falls back to the struct default; unknown keys are rejected so typos
// in config files surface as usage errors.

#include "physio/dataset_io.hpp"
#include "physio/synth_data.hpp"
#include "physio/training.hpp"

#include <json.hpp>

#include <string>

namespace physio {

using json = nlohmann::json;

json to_json(const ModelConfig& c);
json to_json(const TrainConfig& c);
json to_json(const SynthConfig& c);
json to_json(const PrepSettings& c);

ModelConfig model_config_from_json(const json& j, ModelConfig base);
TrainConfig train_config_from_json(const json& j, TrainConfig base = {});
SynthConfig synth_config_from_json(const json& j, SynthConfig base = {});
PrepSettings prep_settings_from_json(const json& j, PrepSettings base = {});

/// Applies `key.path=value` to a JSON document. The value is parsed as JSON
/// when possible (numbers, booleans, arrays) and kept as a string otherwise.
void apply_override(json& doc, const std::string& assignment);

}  // namespace physio
