#pragma once

// Run configuration: JSON file with sections visual, text, loss and train.
// Dotted "section.key=value" overrides are applied on top.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "ovseg/model.hpp"

namespace ovseg {

struct TrainConfig {
  int epochs = 60;
  int batch_size = 32;
  double lr = 3.2e-4;
  double weight_decay = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  // Epoch interval for numbered checkpoints; 0 writes only the final one.
  int checkpoint_every = 0;

  void validate() const;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

nlohmann::json to_json(const RunConfig& cfg);
// Unknown keys and wrongly typed values are rejected.
RunConfig run_config_from_json(const nlohmann::json& j);

// "loss.lambda=0" style; the value is parsed as JSON, falling back to a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

// Defaults, then the file (if given), then overrides. A zero vocab size is
// filled in from the tokenizer table.
RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          int vocab_size);

}  // namespace ovseg
