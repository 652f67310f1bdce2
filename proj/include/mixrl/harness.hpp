#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mixrl/analysis.hpp"
#include "mixrl/config.hpp"
#include "mixrl/env.hpp"

namespace mixrl {

struct MetricsRecord {
  int64_t timestep = 0;
  double train_return = 0.0;  // running mean over recent completed episodes
  double test_return = 0.0;   // zero-shot mean over freshly sampled unseen levels
  int train_episodes = 0;
  bool eval_levels_disjoint = false;
  std::map<std::string, double> diag;
};

struct RunResult {
  std::filesystem::path dir;
  std::vector<MetricsRecord> metrics;
  double final_train_return = 0.0;  // mean over the last 3 eval points
  double final_test_return = 0.0;
  int64_t gradient_steps = 0;
};

// Trains per the config, evaluating every eval interval on unseen test
// levels; writes config.json, metrics.jsonl, timing.jsonl, summary.csv
// and checkpoint.bin under <out_root>/<name>-seed<seed>/.
RunResult run(const ExperimentConfig& cfg, const std::filesystem::path& out_root);

struct SweepOutcome {
  std::string value;
  uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunResult result;
};

// One run per (axis value, seed); individual failures are recorded and
// the sweep continues. axis: levels | model-size | alpha.
std::vector<SweepOutcome> sweep(const ExperimentConfig& base, const std::string& axis,
                                const std::vector<std::string>& values,
                                const std::filesystem::path& out_root);

void plot_runs(const std::vector<std::filesystem::path>& run_dirs, const std::string& kind,
               const std::filesystem::path& out_svg);

// Post-hoc instruments over a finished run's checkpoint; outputs land in
// <run_dir>/analysis/.
void analyze_run(const std::filesystem::path& run_dir, bool lipschitz, bool surface, bool scores,
                 int lipschitz_pairs = 100'000);

// Batched zero-shot evaluation; every sampled level is checked against
// the training prefix.
struct EvalOutcome {
  double mean_return = 0.0;
  bool disjoint = true;
};
using ActFn = std::function<std::vector<int>(const Tensor& obs_batch)>;
EvalOutcome evaluate_zero_shot(const ActFn& act, Game game, const EnvConfig& env_cfg,
                               const LevelSplit& split, int episodes, Rng& eval_rng);
double evaluate_on_levels(const ActFn& act, Game game, const EnvConfig& env_cfg,
                          const std::vector<uint32_t>& levels, int episodes, Rng& rng);

// Mean return of the scripted shortest-path policy over the given levels.
double greedy_reference_return(Game game, const EnvConfig& env_cfg,
                               const std::vector<uint32_t>& levels);

void set_blas_threads(int n);

}  // namespace mixrl
