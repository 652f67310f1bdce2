#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "mixrl/config.hpp"
#include "mixrl/env.hpp"
#include "mixrl/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

mixrl::ExperimentConfig load_with_overrides(const std::string& config_path,
                                            const std::vector<std::string>& overrides) {
  std::ifstream f(config_path);
  if (!f) throw std::runtime_error("cannot open config: " + config_path);
  json doc = json::parse(f);
  for (const std::string& o : overrides) mixrl::apply_override(doc, o);
  return mixrl::config_from_json(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mixture-regularized RL benchmark"};
  app.require_subcommand(1);

  std::string config_path, out_root = "runs";
  std::vector<std::string> overrides;
  int64_t seed_override = -1;

  auto* train = app.add_subcommand("train", "train one agent from a config");
  train->add_option("config", config_path, "experiment config (json)")->required();
  train->add_option("--seed", seed_override, "seed override");
  train->add_option("--override", overrides, "key.path=value config overrides");
  train->add_option("-o,--out", out_root, "output root directory");

  std::string axis;
  std::vector<std::string> axis_values;
  auto* sweep = app.add_subcommand("sweep", "run a config across an axis of values");
  sweep->add_option("config", config_path, "experiment config (json)")->required();
  sweep->add_option("--axis", axis, "levels | model-size | alpha")->required();
  sweep->add_option("--values", axis_values, "axis values")->required();
  sweep->add_option("--override", overrides, "key.path=value config overrides");
  sweep->add_option("-o,--out", out_root, "output root directory");

  std::string run_dir;
  bool do_lipschitz = false, do_surface = false, do_scores = false;
  int lipschitz_pairs = 100'000;
  auto* analyze = app.add_subcommand("analyze", "diagnostics over a finished run");
  analyze->add_option("run_dir", run_dir, "run directory")->required();
  analyze->add_flag("--lipschitz", do_lipschitz, "latent smoothness ratios");
  analyze->add_flag("--surface", do_surface, "value surface over an observation triple");
  analyze->add_flag("--scores", do_scores, "normalized train/test scores");
  analyze->add_option("--pairs", lipschitz_pairs, "pair count for the smoothness estimate");

  std::vector<std::string> plot_dirs;
  std::string plot_kind = "curves", plot_out = "plot.svg";
  auto* plot = app.add_subcommand("plot", "render run comparisons to SVG");
  plot->add_option("run_dirs", plot_dirs, "run directories")->required();
  plot->add_option("--kind", plot_kind, "curves | bars | surface | lipschitz-box");
  plot->add_option("-o,--out", plot_out, "output SVG path")->required();

  std::string render_game = "collector", render_out = "level.png";
  int64_t render_level = 0;
  auto* render = app.add_subcommand("render", "write one level's observation as PNG");
  render->add_option("--game", render_game, "collector | corridor");
  render->add_option("--level", render_level, "level index");
  render->add_option("-o,--out", render_out, "output PNG path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      mixrl::ExperimentConfig cfg = load_with_overrides(config_path, overrides);
      if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);
      const mixrl::RunResult result = mixrl::run(cfg, out_root);
      std::cout << "run complete: " << result.dir.string()
                << " final_train=" << result.final_train_return
                << " final_test=" << result.final_test_return << "\n";
    } else if (*sweep) {
      mixrl::ExperimentConfig cfg = load_with_overrides(config_path, overrides);
      const auto outcomes = mixrl::sweep(cfg, axis, axis_values, out_root);
      int failures = 0;
      for (const auto& o : outcomes)
        if (!o.ok) failures += 1;
      std::cout << "sweep complete: " << outcomes.size() - failures << "/" << outcomes.size()
                << " runs succeeded\n";
      if (failures == static_cast<int>(outcomes.size()))
        throw std::runtime_error("every sweep run failed");
    } else if (*analyze) {
      if (!do_lipschitz && !do_surface && !do_scores)
        do_lipschitz = do_surface = do_scores = true;
      mixrl::analyze_run(run_dir, do_lipschitz, do_surface, do_scores, lipschitz_pairs);
      std::cout << "analysis written to " << (fs::path(run_dir) / "analysis").string() << "\n";
    } else if (*plot) {
      std::vector<fs::path> dirs(plot_dirs.begin(), plot_dirs.end());
      mixrl::plot_runs(dirs, plot_kind, plot_out);
      std::cout << "plot written to " << plot_out << "\n";
    } else if (*render) {
      const mixrl::EnvConfig env_cfg;
      const mixrl::EnvState state = mixrl::make_level(
          {mixrl::game_from_string(render_game), static_cast<uint32_t>(render_level)}, env_cfg);
      mixrl::render_png(mixrl::observe(state, env_cfg), render_out);
      std::cout << "wrote " << render_out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
