#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mixrl/rng.hpp"
#include "mixrl/tensor.hpp"

namespace mixrl {

enum class Game { collector, corridor };

Game game_from_string(const std::string& name);
std::string to_string(Game game);

inline constexpr int kGrid = 8;
inline constexpr int kActions = 5;  // noop, up, right, down, left
inline constexpr int kCollectorFruits = 5;
inline constexpr double kExitReward = 10.0;

// Maximum achievable episode return, the score-normalization ceiling.
double game_r_max(Game game);

struct EnvConfig {
  int obs_size = 32;  // square, divisible by the grid extent
  int horizon = 256;
};

// A level is a pure function of (game, index): same pair, same layout
// and palette.
struct LevelSeed {
  Game game;
  uint32_t index = 0;
  uint64_t rng_seed() const;
};

enum class Cell : uint8_t { empty, wall, fruit, hazard, exit_door };

struct Palette {
  std::array<double, 3> bg, wall, item, hazard, agent;
};

struct EnvState {
  Game game = Game::collector;
  uint32_t level = 0;
  std::array<Cell, kGrid * kGrid> cells{};
  int agent_r = 0, agent_c = 0;
  int steps = 0;
  int horizon = 256;
  bool done = false;
  int fruits_left = 0;
  Palette palette{};
};

struct StepResult {
  double reward = 0.0;
  bool done = false;
};

EnvState make_level(const LevelSeed& seed, const EnvConfig& cfg);
StepResult env_step(EnvState& env, int action);

void observe(const EnvState& env, const EnvConfig& cfg, Tensor& out);
Tensor observe(const EnvState& env, const EnvConfig& cfg);

// Scripted reference policy: shortest path to the nearest reward-bearing
// cell, treating walls (and hazards) as obstacles.
int greedy_action(const EnvState& env);

void render_png(const Tensor& obs, const std::filesystem::path& path);

// Training-set prefix plus uniform sampling over the rest of the universe.
struct LevelSplit {
  std::vector<uint32_t> train;
  uint32_t universe = 0;
  uint32_t sample_test(Rng& rng) const;
};
LevelSplit split_levels(uint32_t n_train, uint32_t universe);

// E independent instances; an instance that finishes its episode resets
// to a fresh level drawn uniformly from the configured level set.
class VecEnv {
 public:
  VecEnv(Game game, const EnvConfig& cfg, std::vector<uint32_t> level_set, int n_envs,
         uint64_t seed, uint64_t stream);

  int size() const { return static_cast<int>(envs_.size()); }
  int n_actions() const { return kActions; }
  const EnvConfig& config() const { return cfg_; }
  const Tensor& obs(int e) const { return obs_[static_cast<size_t>(e)]; }
  const EnvState& state(int e) const { return envs_[static_cast<size_t>(e)]; }

  struct Out {
    double reward = 0.0;
    bool done = false;
    double episode_return = 0.0;  // valid when done
    int episode_len = 0;          // valid when done
  };
  Out step(int e, int action);

 private:
  void reset_env(int e);

  Game game_;
  EnvConfig cfg_;
  std::vector<uint32_t> level_set_;
  Rng level_rng_;
  std::vector<EnvState> envs_;
  std::vector<Tensor> obs_;
  std::vector<double> ep_return_;
  std::vector<int> ep_len_;
};

}  // namespace mixrl
