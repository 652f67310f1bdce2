#include "mixrl/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "mixrl/network.hpp"
#include "mixrl/ppo.hpp"
#include "mixrl/rainbow.hpp"
#include "mixrl/rollout.hpp"
#include "mixrl/svg.hpp"

extern "C" void openblas_set_num_threads(int);

namespace mixrl {

namespace fs = std::filesystem;
using nlohmann::json;

void set_blas_threads(int n) { openblas_set_num_threads(n); }

namespace {

json metrics_to_json(const MetricsRecord& m) {
  json diag(m.diag);
  return json{{"diag", diag},
              {"eval_levels_disjoint", m.eval_levels_disjoint},
              {"test_return", m.test_return},
              {"timestep", m.timestep},
              {"train_episodes", m.train_episodes},
              {"train_return", m.train_return}};
}

MetricsRecord metrics_from_json(const json& j) {
  MetricsRecord m;
  m.timestep = j.at("timestep").get<int64_t>();
  m.train_return = j.at("train_return").get<double>();
  m.test_return = j.at("test_return").get<double>();
  m.train_episodes = j.at("train_episodes").get<int>();
  m.eval_levels_disjoint = j.at("eval_levels_disjoint").get<bool>();
  for (const auto& [k, v] : j.at("diag").items()) m.diag[k] = v.get<double>();
  return m;
}

double window_mean(const std::deque<double>& xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

struct RunFiles {
  std::ofstream metrics, timing;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void record(const MetricsRecord& m) {
    metrics << metrics_to_json(m).dump() << "\n";
    metrics.flush();
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    timing << json{{"timestep", m.timestep}, {"wall_clock_s", secs}}.dump() << "\n";
    timing.flush();
  }
};

struct EpisodeTracker {
  std::deque<double> returns;
  int completed = 0;
  void add(const std::vector<double>& finished) {
    for (double r : finished) {
      returns.push_back(r);
      if (returns.size() > 100) returns.pop_front();
      completed += 1;
    }
  }
};

void write_summary(const fs::path& dir, const ExperimentConfig& cfg, const RunResult& result) {
  std::ofstream f(dir / "summary.csv");
  f << "name,seed,game,algorithm,augment,frames,gradient_steps,final_train,final_test,gap\n";
  f << cfg.name << "," << cfg.seed << "," << cfg.game << "," << cfg.algorithm << ","
    << to_string(cfg.augment.method) << "," << cfg.total_timesteps << ","
    << result.gradient_steps << "," << result.final_train_return << ","
    << result.final_test_return << ","
    << result.final_train_return - result.final_test_return << "\n";
}

void finalize_result(RunResult& result) {
  const int n = static_cast<int>(result.metrics.size());
  const int k = std::min(3, n);
  double train = 0.0, test = 0.0;
  for (int i = n - k; i < n; ++i) {
    train += result.metrics[static_cast<size_t>(i)].train_return;
    test += result.metrics[static_cast<size_t>(i)].test_return;
  }
  result.final_train_return = k > 0 ? train / k : 0.0;
  result.final_test_return = k > 0 ? test / k : 0.0;
}

}  // namespace

EvalOutcome evaluate_zero_shot(const ActFn& act, Game game, const EnvConfig& env_cfg,
                               const LevelSplit& split, int episodes, Rng& eval_rng) {
  std::vector<uint32_t> levels(static_cast<size_t>(episodes));
  EvalOutcome out;
  for (auto& l : levels) {
    l = split.sample_test(eval_rng);
    if (l < split.train.size()) out.disjoint = false;  // train set is the index prefix
  }
  if (!out.disjoint)
    throw std::logic_error("evaluation drew a training level; split is broken");
  out.mean_return = evaluate_on_levels(act, game, env_cfg, levels, episodes, eval_rng);
  return out;
}

double evaluate_on_levels(const ActFn& act, Game game, const EnvConfig& env_cfg,
                          const std::vector<uint32_t>& levels, int episodes, Rng& rng) {
  std::vector<EnvState> envs;
  envs.reserve(static_cast<size_t>(episodes));
  for (int e = 0; e < episodes; ++e) {
    const uint32_t idx = levels[static_cast<size_t>(e % levels.size())];
    envs.push_back(make_level({game, idx}, env_cfg));
  }
  std::vector<double> returns(static_cast<size_t>(episodes), 0.0);
  std::vector<int> active(static_cast<size_t>(episodes));
  std::iota(active.begin(), active.end(), 0);

  const size_t obs_len = static_cast<size_t>(3) * env_cfg.obs_size * env_cfg.obs_size;
  Tensor scratch({3, env_cfg.obs_size, env_cfg.obs_size});
  while (!active.empty()) {
    Tensor obs({static_cast<int>(active.size()), 3, env_cfg.obs_size, env_cfg.obs_size});
    for (size_t k = 0; k < active.size(); ++k) {
      observe(envs[static_cast<size_t>(active[k])], env_cfg, scratch);
      std::memcpy(&obs.data[k * obs_len], scratch.data.data(), obs_len * sizeof(double));
    }
    const std::vector<int> actions = act(obs);
    std::vector<int> still;
    still.reserve(active.size());
    for (size_t k = 0; k < active.size(); ++k) {
      EnvState& env = envs[static_cast<size_t>(active[k])];
      const StepResult r = env_step(env, actions[k]);
      returns[static_cast<size_t>(active[k])] += r.reward;
      if (!r.done) still.push_back(active[k]);
    }
    active = std::move(still);
  }
  (void)rng;
  return std::accumulate(returns.begin(), returns.end(), 0.0) / static_cast<double>(episodes);
}

double greedy_reference_return(Game game, const EnvConfig& env_cfg,
                               const std::vector<uint32_t>& levels) {
  double total = 0.0;
  for (uint32_t idx : levels) {
    EnvState env = make_level({game, idx}, env_cfg);
    double ret = 0.0;
    while (!env.done) {
      const StepResult r = env_step(env, greedy_action(env));
      ret += r.reward;
    }
    total += ret;
  }
  return total / static_cast<double>(levels.size());
}

namespace {

RunResult run_ppo(const ExperimentConfig& cfg, const fs::path& dir, RunFiles& files) {
  const Game game = cfg.game_id();
  const EnvConfig env_cfg = cfg.env_config();
  const LevelSplit split = split_levels(cfg.n_train_levels, cfg.level_universe);

  Rng init_rng = make_stream(cfg.seed, Stream::net_init);
  PolicyValueNet net = PolicyValueNet::make(cfg.net_config(), kActions, init_rng);
  VecEnv venv(game, env_cfg, split.train, cfg.num_envs, cfg.seed,
              static_cast<uint64_t>(Stream::env_gen));
  RewardNormalizer normalizer(cfg.num_envs, cfg.ppo.gamma);

  Rng rollout_rng = make_stream(cfg.seed, Stream::rollout);
  Rng mix_rng = make_stream(cfg.seed, Stream::mixing);
  Rng opt_rng = make_stream(cfg.seed, Stream::opt);
  Rng eval_rng = make_stream(cfg.seed, Stream::eval);

  const ActFn eval_act = [&](const Tensor& obs) {
    Graph g;
    const auto out = net.forward(g, g.leaf(obs), Mode::eval);
    const Tensor& probs = g.value(g.softmax_last(out.logits));
    const int B = probs.extent(0), A = probs.extent(1);
    std::vector<int> actions(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const double u = eval_rng.uniform();
      double acc = 0.0;
      int a = A - 1;
      for (int k = 0; k < A; ++k) {
        acc += probs.data[static_cast<size_t>(b) * A + k];
        if (u < acc) {
          a = k;
          break;
        }
      }
      actions[static_cast<size_t>(b)] = a;
    }
    return actions;
  };

  RunResult result;
  result.dir = dir;
  EpisodeTracker episodes;
  int64_t frames = 0, next_eval = cfg.eval_interval;

  const auto do_eval = [&](const PpoDiag& diag) {
    const EvalOutcome eval =
        evaluate_zero_shot(eval_act, game, env_cfg, split, cfg.eval_episodes, eval_rng);
    MetricsRecord m;
    m.timestep = frames;
    m.train_return = window_mean(episodes.returns);
    m.test_return = eval.mean_return;
    m.train_episodes = episodes.completed;
    m.eval_levels_disjoint = eval.disjoint;
    m.diag = {{"policy_loss", diag.policy_loss}, {"value_loss", diag.value_loss},
              {"entropy", diag.entropy},         {"approx_kl", diag.approx_kl},
              {"clip_fraction", diag.clip_fraction}, {"grad_norm", diag.grad_norm}};
    result.metrics.push_back(m);
    files.record(m);
    std::cout << cfg.name << " seed " << cfg.seed << " t=" << frames
              << " train=" << m.train_return << " test=" << m.test_return << "\n";
  };

  PpoDiag last_diag;
  while (frames < cfg.total_timesteps) {
    std::vector<double> finished;
    RolloutBatch batch = collect(net, venv, cfg.ppo.rollout_steps,
                                 cfg.ppo.reward_norm ? &normalizer : nullptr, rollout_rng,
                                 &finished);
    episodes.add(finished);
    gae(cfg.ppo.reward_norm ? batch.reward_norm : batch.reward_raw, batch.v_old, batch.done,
        batch.bootstrap_value, batch.T, batch.E, cfg.ppo.gamma, cfg.ppo.gae_lambda,
        batch.advantage, batch.value_target);
    last_diag = ppo_update(net, batch, cfg.ppo, cfg.augment, cfg.l2_weight, mix_rng, opt_rng);
    result.gradient_steps += last_diag.gradient_steps;
    frames += static_cast<int64_t>(batch.T) * batch.E;
    if (frames >= next_eval) {
      do_eval(last_diag);
      next_eval = (frames / cfg.eval_interval + 1) * cfg.eval_interval;
    }
  }
  if (result.metrics.empty() || result.metrics.back().timestep < frames) do_eval(last_diag);

  save_checkpoint(net.params, dir / "checkpoint.bin");
  return result;
}

RunResult run_rainbow(const ExperimentConfig& cfg, const fs::path& dir, RunFiles& files) {
  const Game game = cfg.game_id();
  const EnvConfig env_cfg = cfg.env_config();
  const LevelSplit split = split_levels(cfg.n_train_levels, cfg.level_universe);
  const RainbowHyper hyper = cfg.resolved_rainbow();

  Rng init_rng = make_stream(cfg.seed, Stream::net_init);
  RainbowAgent agent(cfg.net_config(), hyper, kActions, cfg.num_envs, init_rng);
  VecEnv venv(game, env_cfg, split.train, cfg.num_envs, cfg.seed,
              static_cast<uint64_t>(Stream::env_gen));

  Rng replay_rng = make_stream(cfg.seed, Stream::replay);
  Rng mix_rng = make_stream(cfg.seed, Stream::mixing);
  Rng noise_rng = make_stream(cfg.seed, Stream::net_noise);
  Rng eval_rng = make_stream(cfg.seed, Stream::eval);

  const ActFn eval_act = [&](const Tensor& obs) { return agent.act(obs, Mode::eval, nullptr); };

  RunResult result;
  result.dir = dir;
  EpisodeTracker episodes;
  int64_t frames = 0, next_eval = cfg.eval_interval, update_budget = 0;
  const int E = cfg.num_envs;
  const size_t obs_len = static_cast<size_t>(3) * cfg.obs_size * cfg.obs_size;

  RainbowDiag last_diag;
  const auto do_eval = [&]() {
    const EvalOutcome eval =
        evaluate_zero_shot(eval_act, game, env_cfg, split, cfg.eval_episodes, eval_rng);
    MetricsRecord m;
    m.timestep = frames;
    m.train_return = window_mean(episodes.returns);
    m.test_return = eval.mean_return;
    m.train_episodes = episodes.completed;
    m.eval_levels_disjoint = eval.disjoint;
    m.diag = {{"loss", last_diag.loss},
              {"mean_kl", last_diag.mean_kl},
              {"grad_norm", last_diag.grad_norm},
              {"mean_weight", last_diag.mean_weight},
              {"replay_size", static_cast<double>(agent.replay().size())},
              {"updates", static_cast<double>(agent.updates())}};
    result.metrics.push_back(m);
    files.record(m);
    std::cout << cfg.name << " seed " << cfg.seed << " t=" << frames
              << " train=" << m.train_return << " test=" << m.test_return << "\n";
  };

  Tensor obs_batch({E, 3, cfg.obs_size, cfg.obs_size});
  Tensor one_obs({3, cfg.obs_size, cfg.obs_size});
  while (frames < cfg.total_timesteps) {
    for (int e = 0; e < E; ++e)
      std::memcpy(&obs_batch.data[static_cast<size_t>(e) * obs_len], venv.obs(e).data.data(),
                  obs_len * sizeof(double));
    const std::vector<int> actions = agent.act(obs_batch, Mode::train, &noise_rng);
    std::vector<double> finished;
    for (int e = 0; e < E; ++e) {
      std::memcpy(one_obs.data.data(), &obs_batch.data[static_cast<size_t>(e) * obs_len],
                  obs_len * sizeof(double));
      const auto out = venv.step(e, actions[static_cast<size_t>(e)]);
      agent.record(e, one_obs, actions[static_cast<size_t>(e)], out.reward, out.done);
      if (out.done) finished.push_back(out.episode_return);
    }
    episodes.add(finished);
    frames += E;

    if (agent.ready()) {
      update_budget += E;
      while (update_budget >= hyper.update_every) {
        const RainbowDiag diag =
            agent.update(cfg.augment, cfg.l2_weight, replay_rng, mix_rng, &noise_rng);
        last_diag = diag;
        result.gradient_steps += diag.gradient_steps;
        update_budget -= hyper.update_every;
      }
    }

    if (frames >= next_eval) {
      do_eval();
      next_eval = (frames / cfg.eval_interval + 1) * cfg.eval_interval;
    }
  }
  if (result.metrics.empty() || result.metrics.back().timestep < frames) do_eval();

  save_checkpoint(agent.net().params, dir / "checkpoint.bin");
  return result;
}

}  // namespace

RunResult run(const ExperimentConfig& cfg, const fs::path& out_root) {
  set_blas_threads(cfg.blas_threads);
  const fs::path dir = out_root / (cfg.name + "-seed" + std::to_string(cfg.seed));
  fs::create_directories(dir);
  save_config(cfg, dir / "config.json");

  RunFiles files;
  files.metrics.open(dir / "metrics.jsonl");
  files.timing.open(dir / "timing.jsonl");
  if (!files.metrics || !files.timing)
    throw std::runtime_error("cannot open run outputs under " + dir.string());

  RunResult result =
      cfg.algorithm == "ppo" ? run_ppo(cfg, dir, files) : run_rainbow(cfg, dir, files);
  finalize_result(result);
  write_summary(dir, cfg, result);
  return result;
}

std::vector<SweepOutcome> sweep(const ExperimentConfig& base, const std::string& axis,
                                const std::vector<std::string>& values,
                                const fs::path& out_root) {
  if (axis != "levels" && axis != "model-size" && axis != "alpha")
    throw std::invalid_argument("sweep axis must be levels, model-size or alpha");
  std::vector<SweepOutcome> outcomes;
  for (const std::string& value : values) {
    for (uint64_t seed : base.seeds) {
      ExperimentConfig cfg = base;
      cfg.seed = seed;
      cfg.name = base.name + "-" + axis + value;
      try {
        if (axis == "levels")
          cfg.n_train_levels = static_cast<uint32_t>(std::stoul(value));
        else if (axis == "model-size")
          cfg.model_size = std::stoi(value);
        else
          cfg.augment.mix_alpha = std::stod(value);
        SweepOutcome out;
        out.value = value;
        out.seed = seed;
        out.result = run(cfg, out_root);
        out.ok = true;
        outcomes.push_back(std::move(out));
      } catch (const std::exception& e) {
        outcomes.push_back({value, seed, false, e.what(), {}});
        std::cerr << "sweep run failed (" << axis << "=" << value << ", seed " << seed
                  << "): " << e.what() << "\n";
      }
    }
  }
  std::ofstream f(out_root / (base.name + "-" + axis + "-sweep.csv"));
  f << "axis,value,seed,ok,final_train,final_test,gap\n";
  for (const auto& o : outcomes)
    f << axis << "," << o.value << "," << o.seed << "," << (o.ok ? 1 : 0) << ","
      << o.result.final_train_return << "," << o.result.final_test_return << ","
      << o.result.final_train_return - o.result.final_test_return << "\n";
  return outcomes;
}

namespace {

struct LoadedRun {
  fs::path dir;
  ExperimentConfig cfg;
  std::vector<MetricsRecord> metrics;
};

LoadedRun load_run(const fs::path& dir) {
  LoadedRun run;
  run.dir = dir;
  std::ifstream cf(dir / "config.json");
  if (!cf) throw std::runtime_error("missing config.json in " + dir.string());
  run.cfg = config_from_json(json::parse(cf));
  std::ifstream mf(dir / "metrics.jsonl");
  if (!mf) throw std::runtime_error("missing metrics.jsonl in " + dir.string());
  std::string line;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    run.metrics.push_back(metrics_from_json(json::parse(line)));
  }
  if (run.metrics.empty()) throw std::runtime_error("empty metrics log in " + dir.string());
  return run;
}

struct Series {
  std::vector<double> x, mean, sd;
};

Series across_seeds(const std::vector<const LoadedRun*>& runs,
                    double MetricsRecord::* field) {
  Series s;
  const size_t n = runs[0]->metrics.size();
  for (size_t i = 0; i < n; ++i) {
    bool aligned = true;
    std::vector<double> ys;
    for (const LoadedRun* r : runs) {
      if (i >= r->metrics.size() ||
          r->metrics[i].timestep != runs[0]->metrics[i].timestep) {
        aligned = false;
        break;
      }
      ys.push_back(r->metrics[i].*field);
    }
    if (!aligned) break;
    const double m = std::accumulate(ys.begin(), ys.end(), 0.0) / ys.size();
    double var = 0.0;
    for (double y : ys) var += (y - m) * (y - m);
    s.x.push_back(static_cast<double>(runs[0]->metrics[i].timestep));
    s.mean.push_back(m);
    s.sd.push_back(ys.size() > 1 ? std::sqrt(var / (ys.size() - 1)) : 0.0);
  }
  return s;
}

double final_mean(const LoadedRun& run, double MetricsRecord::* field) {
  const int n = static_cast<int>(run.metrics.size());
  const int k = std::min(3, n);
  double acc = 0.0;
  for (int i = n - k; i < n; ++i) acc += run.metrics[static_cast<size_t>(i)].*field;
  return acc / k;
}

void plot_curves(const std::map<std::string, std::vector<const LoadedRun*>>& groups,
                 const fs::path& out_svg) {
  const double W = 760, H = 420, ml = 60, mr = 170, mt = 20, mb = 40;
  double xmax = 1.0, ymin = 0.0, ymax = 1e-9;
  for (const auto& [name, runs] : groups)
    for (const LoadedRun* r : runs)
      for (const auto& m : r->metrics) {
        xmax = std::max(xmax, static_cast<double>(m.timestep));
        ymax = std::max({ymax, m.test_return, m.train_return});
        ymin = std::min({ymin, m.test_return, m.train_return});
      }
  svg::Doc doc(W, H);
  const auto X = [&](double t) { return ml + (W - ml - mr) * t / xmax; };
  const auto Y = [&](double v) {
    return H - mb - (H - mt - mb) * (v - ymin) / std::max(1e-9, ymax - ymin);
  };
  doc.line(ml, H - mb, W - mr, H - mb, "#333");
  doc.line(ml, mt, ml, H - mb, "#333");
  for (int i = 0; i <= 4; ++i) {
    const double v = ymin + (ymax - ymin) * i / 4;
    doc.text(ml - 6, Y(v) + 4, std::to_string(v).substr(0, 5), 10, "end");
    const double t = xmax * i / 4;
    doc.text(X(t), H - mb + 16, std::to_string(static_cast<int64_t>(t)), 10, "middle");
  }
  size_t gi = 0;
  double legend_y = mt + 10;
  for (const auto& [name, runs] : groups) {
    const std::string color = svg::series_color(gi++);
    const Series test = across_seeds(runs, &MetricsRecord::test_return);
    const Series train = across_seeds(runs, &MetricsRecord::train_return);
    if (test.x.empty()) continue;
    std::vector<std::array<double, 2>> band;
    for (size_t i = 0; i < test.x.size(); ++i)
      band.push_back({X(test.x[i]), Y(test.mean[i] + test.sd[i])});
    for (size_t i = test.x.size(); i-- > 0;)
      band.push_back({X(test.x[i]), Y(test.mean[i] - test.sd[i])});
    doc.polygon(band, color, 0.15);
    std::vector<std::array<double, 2>> line, tline;
    for (size_t i = 0; i < test.x.size(); ++i) line.push_back({X(test.x[i]), Y(test.mean[i])});
    for (size_t i = 0; i < train.x.size(); ++i)
      tline.push_back({X(train.x[i]), Y(train.mean[i])});
    doc.polyline(line, color, 2.0);
    doc.polyline(tline, color, 0.8);
    doc.text(W - mr + 8, legend_y, name + " (test/train)", 11);
    doc.line(W - mr - 24, legend_y - 4, W - mr + 4, legend_y - 4, color, 2.0);
    legend_y += 16;
  }
  doc.text(W / 2, H - 8, "timesteps", 11, "middle");
  doc.save(out_svg);
}

void plot_bars(const std::map<std::string, std::vector<const LoadedRun*>>& groups,
               const fs::path& out_svg) {
  const double W = 640, H = 400, ml = 60, mb = 90, mt = 20;
  double ymax = 1e-9;
  struct Bar {
    std::string name;
    double mean, sd;
  };
  std::vector<Bar> bars;
  for (const auto& [name, runs] : groups) {
    std::vector<double> finals;
    for (const LoadedRun* r : runs) finals.push_back(final_mean(*r, &MetricsRecord::test_return));
    const double m = std::accumulate(finals.begin(), finals.end(), 0.0) / finals.size();
    double var = 0.0;
    for (double v : finals) var += (v - m) * (v - m);
    bars.push_back({name, m, finals.size() > 1 ? std::sqrt(var / (finals.size() - 1)) : 0.0});
    ymax = std::max(ymax, m + bars.back().sd);
  }
  svg::Doc doc(W, H);
  const double bw = (W - ml - 20) / bars.size();
  const auto Y = [&](double v) { return H - mb - (H - mt - mb) * v / ymax; };
  doc.line(ml, H - mb, W - 10, H - mb, "#333");
  doc.line(ml, mt, ml, H - mb, "#333");
  for (int i = 0; i <= 4; ++i) {
    const double v = ymax * i / 4;
    doc.text(ml - 6, Y(v) + 4, std::to_string(v).substr(0, 5), 10, "end");
  }
  for (size_t i = 0; i < bars.size(); ++i) {
    const double x = ml + bw * i + bw * 0.15;
    doc.rect(x, Y(std::max(0.0, bars[i].mean)), bw * 0.7,
             std::fabs(Y(0) - Y(bars[i].mean)), svg::series_color(i));
    const double cx = x + bw * 0.35;
    doc.line(cx, Y(bars[i].mean - bars[i].sd), cx, Y(bars[i].mean + bars[i].sd), "#333", 1.5);
    doc.text(cx, H - mb + 14, bars[i].name, 10, "middle");
  }
  doc.save(out_svg);
}

void plot_lipschitz_box(const std::vector<LoadedRun>& runs, const fs::path& out_svg) {
  struct Box {
    std::string name;
    double min, q1, med, q3, max;
  };
  std::vector<Box> boxes;
  double ymax = 1e-9;
  for (const auto& run : runs) {
    const fs::path csv = run.dir / "analysis" / "lipschitz.csv";
    std::ifstream f(csv);
    if (!f) throw std::runtime_error("missing " + csv.string() + "; run analyze first");
    std::map<std::string, double> vals;
    std::string line;
    std::getline(f, line);  // header
    while (std::getline(f, line)) {
      const size_t comma = line.find(',');
      if (comma != std::string::npos)
        vals[line.substr(0, comma)] = std::stod(line.substr(comma + 1));
    }
    boxes.push_back({run.cfg.name + "-s" + std::to_string(run.cfg.seed), vals.at("min"),
                     vals.at("q1"), vals.at("median"), vals.at("q3"), vals.at("max")});
    ymax = std::max(ymax, vals.at("max"));
  }
  const double W = 640, H = 400, ml = 60, mb = 90, mt = 20;
  svg::Doc doc(W, H);
  const double bw = (W - ml - 20) / boxes.size();
  const auto Y = [&](double v) { return H - mb - (H - mt - mb) * v / ymax; };
  doc.line(ml, H - mb, W - 10, H - mb, "#333");
  doc.line(ml, mt, ml, H - mb, "#333");
  for (int i = 0; i <= 4; ++i) {
    const double v = ymax * i / 4;
    doc.text(ml - 6, Y(v) + 4, std::to_string(v).substr(0, 5), 10, "end");
  }
  for (size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    const double cx = ml + bw * i + bw * 0.5, half = bw * 0.25;
    doc.line(cx, Y(b.min), cx, Y(b.q1), "#333");
    doc.line(cx, Y(b.q3), cx, Y(b.max), "#333");
    doc.rect(cx - half, Y(b.q3), 2 * half, Y(b.q1) - Y(b.q3), svg::series_color(i), "#333", 0.6);
    doc.line(cx - half, Y(b.med), cx + half, Y(b.med), "#000", 1.5);
    doc.text(cx, H - mb + 14, b.name, 9, "middle");
  }
  doc.save(out_svg);
}

ValueSurface load_surface_csv(const fs::path& csv) {
  std::ifstream f(csv);
  if (!f) throw std::runtime_error("missing " + csv.string() + "; run analyze first");
  ValueSurface s;
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    std::array<double, 4> row{};
    size_t pos = 0;
    for (int k = 0; k < 4; ++k) {
      const size_t comma = line.find(',', pos);
      row[static_cast<size_t>(k)] = std::stod(line.substr(pos, comma - pos));
      pos = comma + 1;
    }
    s.weights.push_back({row[0], row[1], row[2]});
    s.values.push_back(row[3]);
  }
  // resolution from the triangular count (k+1)(k+2)/2
  s.resolution = static_cast<int>(std::lround(std::sqrt(2.0 * s.values.size()))) - 1;
  return s;
}

}  // namespace

void plot_runs(const std::vector<fs::path>& run_dirs, const std::string& kind,
               const fs::path& out_svg) {
  if (run_dirs.empty()) throw std::invalid_argument("plot: no run directories given");
  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  for (const auto& r : runs)
    if (r.cfg.game != runs[0].cfg.game)
      throw std::invalid_argument("plot: runs come from different games (" + r.cfg.game +
                                  " vs " + runs[0].cfg.game + ")");

  std::map<std::string, std::vector<const LoadedRun*>> groups;
  for (const auto& r : runs) groups[r.cfg.name].push_back(&r);

  if (kind == "curves") {
    plot_curves(groups, out_svg);
  } else if (kind == "bars") {
    plot_bars(groups, out_svg);
  } else if (kind == "lipschitz-box") {
    plot_lipschitz_box(runs, out_svg);
  } else if (kind == "surface") {
    if (runs.size() != 1)
      throw std::invalid_argument("plot surface expects exactly one run directory");
    write_surface_svg(load_surface_csv(runs[0].dir / "analysis" / "surface.csv"), out_svg);
  } else {
    throw std::invalid_argument("unknown plot kind: " + kind);
  }
}

void analyze_run(const fs::path& run_dir, bool lipschitz, bool surface, bool scores,
                 int lipschitz_pairs) {
  const LoadedRun loaded = load_run(run_dir);
  const ExperimentConfig& cfg = loaded.cfg;
  set_blas_threads(cfg.blas_threads);
  const Game game = cfg.game_id();
  const EnvConfig env_cfg = cfg.env_config();
  const LevelSplit split = split_levels(cfg.n_train_levels, cfg.level_universe);
  const fs::path out = run_dir / "analysis";
  fs::create_directories(out);

  Rng init_rng = make_stream(cfg.seed, Stream::net_init);
  Rng analysis_rng = make_stream(cfg.seed, Stream::analysis);

  // Rebuild the network and load the final checkpoint.
  PolicyValueNet pv_net;
  RainbowAgent* rainbow_agent = nullptr;
  std::unique_ptr<RainbowAgent> rainbow_holder;
  const bool is_ppo = cfg.algorithm == "ppo";
  if (is_ppo) {
    pv_net = PolicyValueNet::make(cfg.net_config(), kActions, init_rng);
    load_checkpoint(pv_net.params, run_dir / "checkpoint.bin");
  } else {
    rainbow_holder = std::make_unique<RainbowAgent>(cfg.net_config(), cfg.resolved_rainbow(),
                                                    kActions, cfg.num_envs, init_rng);
    load_checkpoint(rainbow_holder->net().params, run_dir / "checkpoint.bin");
    rainbow_agent = rainbow_holder.get();
  }

  const ActFn act = [&](const Tensor& obs) -> std::vector<int> {
    if (!is_ppo) return rainbow_agent->act(obs, Mode::eval, nullptr);
    Graph g;
    const auto o = pv_net.forward(g, g.leaf(obs), Mode::eval);
    const Tensor& probs = g.value(g.softmax_last(o.logits));
    const int B = probs.extent(0), A = probs.extent(1);
    std::vector<int> actions(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const double u = analysis_rng.uniform();
      double acc = 0.0;
      int a = A - 1;
      for (int k = 0; k < A; ++k) {
        acc += probs.data[static_cast<size_t>(b) * A + k];
        if (u < acc) {
          a = k;
          break;
        }
      }
      actions[static_cast<size_t>(b)] = a;
    }
    return actions;
  };

  // Observation corpus: trained-policy trajectories on unseen levels.
  const int corpus_target = 2000;
  std::vector<Tensor> corpus_rows;
  std::vector<Tensor> anchors;
  while (static_cast<int>(corpus_rows.size()) < corpus_target) {
    const uint32_t level = split.sample_test(analysis_rng);
    EnvState env = make_level({game, level}, env_cfg);
    if (anchors.size() < 3) anchors.push_back(observe(env, env_cfg));
    Tensor one({1, 3, env_cfg.obs_size, env_cfg.obs_size});
    while (!env.done && static_cast<int>(corpus_rows.size()) < corpus_target) {
      corpus_rows.push_back(observe(env, env_cfg));
      std::memcpy(one.data.data(), corpus_rows.back().data.data(),
                  corpus_rows.back().data.size() * sizeof(double));
      env_step(env, act(one)[0]);
    }
  }
  const int N = static_cast<int>(corpus_rows.size());
  Tensor corpus({N, 3, env_cfg.obs_size, env_cfg.obs_size});
  const size_t obs_len = static_cast<size_t>(3) * env_cfg.obs_size * env_cfg.obs_size;
  for (int i = 0; i < N; ++i)
    std::memcpy(&corpus.data[static_cast<size_t>(i) * obs_len],
                corpus_rows[static_cast<size_t>(i)].data.data(), obs_len * sizeof(double));

  const auto embed_chunked = [&](const Tensor& batch) {
    const int n = batch.extent(0);
    Tensor out;
    int written = 0;
    const int chunk = 256;
    for (int i0 = 0; i0 < n; i0 += chunk) {
      const int m = std::min(chunk, n - i0);
      Tensor piece({m, 3, env_cfg.obs_size, env_cfg.obs_size});
      std::memcpy(piece.data.data(), &batch.data[static_cast<size_t>(i0) * obs_len],
                  static_cast<size_t>(m) * obs_len * sizeof(double));
      Graph g;
      const int latent = is_ppo
                             ? pv_net.forward(g, g.leaf(piece), Mode::eval).latent
                             : rainbow_agent->net().forward(g, g.leaf(piece), Mode::eval).latent;
      const Tensor& lat = g.value(latent);
      if (out.numel() == 0) out = Tensor({n, lat.extent(1)});
      std::memcpy(&out.data[static_cast<size_t>(written) * lat.extent(1)], lat.data.data(),
                  lat.data.size() * sizeof(double));
      written += m;
    }
    return out;
  };

  if (lipschitz) {
    const LipschitzReport report =
        empirical_lipschitz(embed_chunked, corpus, lipschitz_pairs, analysis_rng);
    write_lipschitz_csv(report, out / "lipschitz.csv");
  }

  if (surface) {
    const ValueFn value_fn = [&](const Tensor& batch) {
      Graph g;
      std::vector<double> values;
      if (is_ppo) {
        const auto o = pv_net.forward(g, g.leaf(batch), Mode::eval);
        const Tensor& v = g.value(o.value);
        values.assign(v.data.begin(), v.data.end());
      } else {
        const auto o = rainbow_agent->net().forward(g, g.leaf(batch), Mode::eval);
        const std::vector<double> q =
            q_from_log_probs(g.value(o.log_probs), rainbow_agent->support());
        const int A = rainbow_agent->net().n_actions;
        for (int b = 0; b < batch.extent(0); ++b) {
          double best = q[static_cast<size_t>(b) * A];
          for (int a = 1; a < A; ++a)
            best = std::max(best, q[static_cast<size_t>(b) * A + a]);
          values.push_back(best);
        }
      }
      return values;
    };
    const ValueSurface vs = value_surface(value_fn, anchors.at(0), anchors.at(1), anchors.at(2), 24);
    write_surface_csv(vs, out / "surface.csv");
    write_surface_svg(vs, out / "surface.svg");
  }

  if (scores) {
    std::vector<uint32_t> test_levels(100);
    for (auto& l : test_levels) l = split.sample_test(analysis_rng);
    std::vector<uint32_t> train_sample(100);
    for (auto& l : train_sample)
      l = split.train[static_cast<size_t>(analysis_rng.uniform_int(
          static_cast<int>(split.train.size())))];

    GameScore score;
    score.game = cfg.game;
    score.r_max = game_r_max(game);
    score.train_return = evaluate_on_levels(act, game, env_cfg, train_sample, 100, analysis_rng);
    score.test_return = evaluate_on_levels(act, game, env_cfg, test_levels, 100, analysis_rng);
    const ActFn random_act = [&](const Tensor& obs) {
      std::vector<int> a(static_cast<size_t>(obs.extent(0)));
      for (auto& x : a) x = analysis_rng.uniform_int(kActions);
      return a;
    };
    score.r_rand = evaluate_on_levels(random_act, game, env_cfg, test_levels, 100, analysis_rng);
    write_scores_csv(normalized_scores({score}), out / "scores.csv");

    Tensor diversity_batch({64, 3, env_cfg.obs_size, env_cfg.obs_size});
    for (int i = 0; i < 64; ++i)
      std::memcpy(&diversity_batch.data[static_cast<size_t>(i) * obs_len],
                  &corpus.data[static_cast<size_t>(analysis_rng.uniform_int(N)) * obs_len],
                  obs_len * sizeof(double));
    write_diversity_csv(mixing_diversity_table(diversity_batch, cfg.augment.mix_alpha, analysis_rng),
                        out / "diversity.csv");
  }
}

}  // namespace mixrl
