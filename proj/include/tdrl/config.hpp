#pragma once

// Experiment configuration: JSON with sections network, td, optim, data, run.
// Unknown keys are rejected; missing keys keep their defaults.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "tdrl/backbone.hpp"
#include "tdrl/synthdata.hpp"

namespace tdrl {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  std::size_t n_train = 2000;
  std::size_t n_val = 500;
  std::uint64_t seed = 1;
  std::size_t square = 5;
  std::size_t speed = 2;
  double background_max = 0.6;

  GenSpec gen_spec(const NetworkConfig& net) const;
};

struct OptimConfig {
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  double grad_clip = 0.0;  // max global L2 norm of the gradient; 0 turns clipping off
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir;  // empty: no files written
};

struct ExperimentConfig {
  NetworkConfig network = NetworkConfig::desk_default();
  DataConfig data;
  OptimConfig optim;
  RunConfig run;

  nlohmann::json to_json() const;
  // Throws ConfigError on unknown keys, wrong types or invalid values.
  static ExperimentConfig from_json(const nlohmann::json& j);
  // FNV-1a 64 of the canonical JSON text, as 16 hex digits.
  std::string hash() const;
};

// Applies "a.b.c=value" to a JSON document. value is parsed as JSON when
// possible, otherwise taken as a string. A path segment "*" addresses every
// element of an array, and integer segments index arrays.
void apply_override(nlohmann::json& doc, const std::string& assignment);

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
ExperimentConfig config_with_overrides(const ExperimentConfig& base, const std::vector<std::string>& overrides);

}  // namespace tdrl
