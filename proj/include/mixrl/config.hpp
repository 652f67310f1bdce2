#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixrl/env.hpp"
#include "mixrl/mix.hpp"
#include "mixrl/ppo.hpp"
#include "mixrl/rainbow.hpp"

namespace mixrl {

// Fully resolved description of one run. Every field has a default;
// unknown keys in a config document are rejected.
struct ExperimentConfig {
  std::string name = "run";
  std::string game = "collector";
  std::string algorithm = "ppo";  // ppo | rainbow
  uint64_t seed = 1;
  std::vector<uint64_t> seeds{1, 2, 3};  // sweep seed list
  int64_t total_timesteps = 2'000'000;

  int64_t eval_interval = 50'000;
  int eval_episodes = 32;

  uint32_t n_train_levels = 500;
  uint32_t level_universe = 1'000'000;

  int obs_size = 32;
  int horizon = 256;
  int num_envs = 16;

  int model_size = 1;  // conv channel multiplier: 1, 2 or 4
  bool batch_norm = false;
  double l2_weight = 0.0;

  AugmentSpec augment;
  PpoHyper ppo;
  RainbowHyper rainbow;  // v_max <= v_min means "use the game ceiling"

  int blas_threads = 1;

  Game game_id() const { return game_from_string(game); }
  EnvConfig env_config() const { return {obs_size, horizon}; }
  ImpalaMiniConfig net_config() const;
  RainbowHyper resolved_rainbow() const;  // per-game distributional bounds filled in
};

ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& cfg);

// dotted.path=value, value parsed as JSON when possible.
void apply_override(nlohmann::json& doc, const std::string& assignment);

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

}  // namespace mixrl
