#include "mixrl/config.hpp"

#include <fstream>
#include <stdexcept>

namespace mixrl {

using nlohmann::json;

namespace {

json default_doc() {
  return json{
      {"name", "run"},
      {"game", "collector"},
      {"algorithm", "ppo"},
      {"seed", 1},
      {"seeds", json::array({1, 2, 3})},
      {"total_timesteps", 2'000'000},
      {"eval", json{{"interval", 50'000}, {"episodes", 32}}},
      {"levels", json{{"n_train", 500}, {"universe", 1'000'000}}},
      {"env", json{{"obs_size", 32}, {"horizon", 256}, {"num_envs", 16}}},
      {"model", json{{"size_multiplier", 1}, {"batch_norm", false}}},
      {"augment", json{{"method", "none"},
                       {"mix_alpha", 0.2},
                       {"force_lambda", nullptr},
                       {"cutout_min", 2},
                       {"crop_scale", 75.0 / 64.0},
                       {"conv_kernel", 3}}},
      {"regularization", json{{"l2_weight", 0.0}}},
      {"ppo", json{{"gamma", 0.999},
                   {"gae_lambda", 0.95},
                   {"rollout_steps", 256},
                   {"epochs", 3},
                   {"minibatches", 8},
                   {"clip", 0.2},
                   {"value_coef", 0.5},
                   {"entropy_coef", 0.01},
                   {"lr", 5e-4},
                   {"adam_eps", 1e-5},
                   {"grad_clip", 0.5},
                   {"reward_norm", true}}},
      {"rainbow", json{{"gamma", 0.999},
                       {"lr", 2.5e-4},
                       {"adam_eps", 1.5e-4},
                       {"grad_clip", 0.0},
                       {"n_step", 3},
                       {"atoms", 51},
                       {"v_min", 0.0},
                       {"v_max", nullptr},
                       {"replay_capacity", 50'000},
                       {"min_history", 2'000},
                       {"batch_size", 256},
                       {"update_every", 64},
                       {"target_period", 1'000},
                       {"prio_omega", 0.5},
                       {"prio_beta", 0.4},
                       {"prio_eps", 1e-6},
                       {"noisy", true},
                       {"sigma0", 0.5}}},
      {"compute", json{{"blas_threads", 1}}},
  };
}

void merge_strict(json& base, const json& user, const std::string& path) {
  if (!user.is_object())
    throw std::invalid_argument("config: expected an object at " + (path.empty() ? "root" : path));
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw std::invalid_argument("config: unknown key " + where);
    json& slot = base[key];
    if (slot.is_object() && !value.is_null()) {
      merge_strict(slot, value, where);
    } else {
      slot = value;
    }
  }
}

double num(const json& j, const char* what) {
  if (!j.is_number()) throw std::invalid_argument(std::string("config: ") + what + " must be a number");
  return j.get<double>();
}

}  // namespace

ExperimentConfig config_from_json(const json& user) {
  json doc = default_doc();
  merge_strict(doc, user, "");

  ExperimentConfig cfg;
  cfg.name = doc.at("name").get<std::string>();
  cfg.game = doc.at("game").get<std::string>();
  game_from_string(cfg.game);  // validates
  cfg.algorithm = doc.at("algorithm").get<std::string>();
  if (cfg.algorithm != "ppo" && cfg.algorithm != "rainbow")
    throw std::invalid_argument("config: algorithm must be ppo or rainbow");
  cfg.seed = doc.at("seed").get<uint64_t>();
  cfg.seeds = doc.at("seeds").get<std::vector<uint64_t>>();
  if (cfg.seeds.empty()) throw std::invalid_argument("config: seeds must not be empty");
  cfg.total_timesteps = doc.at("total_timesteps").get<int64_t>();
  if (cfg.total_timesteps < 1) throw std::invalid_argument("config: total_timesteps must be positive");

  cfg.eval_interval = doc.at("eval").at("interval").get<int64_t>();
  cfg.eval_episodes = doc.at("eval").at("episodes").get<int>();
  if (cfg.eval_interval < 1 || cfg.eval_episodes < 1)
    throw std::invalid_argument("config: eval interval and episodes must be positive");

  cfg.n_train_levels = doc.at("levels").at("n_train").get<uint32_t>();
  cfg.level_universe = doc.at("levels").at("universe").get<uint32_t>();

  cfg.obs_size = doc.at("env").at("obs_size").get<int>();
  cfg.horizon = doc.at("env").at("horizon").get<int>();
  cfg.num_envs = doc.at("env").at("num_envs").get<int>();
  if (cfg.num_envs < 1) throw std::invalid_argument("config: num_envs must be positive");

  cfg.model_size = doc.at("model").at("size_multiplier").get<int>();
  cfg.batch_norm = doc.at("model").at("batch_norm").get<bool>();
  cfg.l2_weight = num(doc.at("regularization").at("l2_weight"), "l2_weight");
  if (cfg.l2_weight < 0.0) throw std::invalid_argument("config: l2_weight must be nonnegative");

  const json& aug = doc.at("augment");
  cfg.augment.method = augment_from_string(aug.at("method").get<std::string>());
  cfg.augment.mix_alpha = num(aug.at("mix_alpha"), "mix_alpha");
  if (!(cfg.augment.mix_alpha > 0.0))
    throw std::invalid_argument("config: mix_alpha must be positive");
  if (!aug.at("force_lambda").is_null())
    cfg.augment.force_lambda = num(aug.at("force_lambda"), "force_lambda");
  cfg.augment.cutout_min = aug.at("cutout_min").get<int>();
  cfg.augment.crop_scale = num(aug.at("crop_scale"), "crop_scale");
  cfg.augment.conv_kernel = aug.at("conv_kernel").get<int>();

  const json& p = doc.at("ppo");
  cfg.ppo.gamma = num(p.at("gamma"), "ppo.gamma");
  cfg.ppo.gae_lambda = num(p.at("gae_lambda"), "ppo.gae_lambda");
  cfg.ppo.rollout_steps = p.at("rollout_steps").get<int>();
  cfg.ppo.epochs = p.at("epochs").get<int>();
  cfg.ppo.minibatches = p.at("minibatches").get<int>();
  cfg.ppo.clip = num(p.at("clip"), "ppo.clip");
  cfg.ppo.value_coef = num(p.at("value_coef"), "ppo.value_coef");
  cfg.ppo.entropy_coef = num(p.at("entropy_coef"), "ppo.entropy_coef");
  cfg.ppo.lr = num(p.at("lr"), "ppo.lr");
  cfg.ppo.adam_eps = num(p.at("adam_eps"), "ppo.adam_eps");
  cfg.ppo.grad_clip = num(p.at("grad_clip"), "ppo.grad_clip");
  cfg.ppo.reward_norm = p.at("reward_norm").get<bool>();
  if (!(cfg.ppo.clip > 0.0)) throw std::invalid_argument("config: ppo.clip must be positive");
  if (cfg.ppo.value_coef < 0.0 || cfg.ppo.entropy_coef < 0.0)
    throw std::invalid_argument("config: ppo coefficients must be nonnegative");

  const json& r = doc.at("rainbow");
  cfg.rainbow.gamma = num(r.at("gamma"), "rainbow.gamma");
  cfg.rainbow.lr = num(r.at("lr"), "rainbow.lr");
  cfg.rainbow.adam_eps = num(r.at("adam_eps"), "rainbow.adam_eps");
  cfg.rainbow.grad_clip = num(r.at("grad_clip"), "rainbow.grad_clip");
  cfg.rainbow.n_step = r.at("n_step").get<int>();
  cfg.rainbow.atoms = r.at("atoms").get<int>();
  cfg.rainbow.v_min = num(r.at("v_min"), "rainbow.v_min");
  cfg.rainbow.v_max = r.at("v_max").is_null() ? cfg.rainbow.v_min  // resolved per game later
                                              : num(r.at("v_max"), "rainbow.v_max");
  cfg.rainbow.replay_capacity = r.at("replay_capacity").get<int>();
  cfg.rainbow.min_history = r.at("min_history").get<int>();
  cfg.rainbow.batch_size = r.at("batch_size").get<int>();
  cfg.rainbow.update_every = r.at("update_every").get<int>();
  cfg.rainbow.target_period = r.at("target_period").get<int>();
  cfg.rainbow.prio_omega = num(r.at("prio_omega"), "rainbow.prio_omega");
  cfg.rainbow.prio_beta = num(r.at("prio_beta"), "rainbow.prio_beta");
  cfg.rainbow.prio_eps = num(r.at("prio_eps"), "rainbow.prio_eps");
  cfg.rainbow.noisy = r.at("noisy").get<bool>();
  cfg.rainbow.sigma0 = num(r.at("sigma0"), "rainbow.sigma0");
  if (cfg.rainbow.sigma0 <= 0.0) throw std::invalid_argument("config: sigma0 must be positive");

  cfg.blas_threads = doc.at("compute").at("blas_threads").get<int>();
  if (cfg.blas_threads < 1) throw std::invalid_argument("config: blas_threads must be positive");
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path.string());
  json doc = json::parse(f);
  return config_from_json(doc);
}

ImpalaMiniConfig ExperimentConfig::net_config() const {
  ImpalaMiniConfig net;
  net.obs_channels = 3;
  net.obs_size = obs_size;
  net.width_mult = model_size;
  net.batch_norm = batch_norm;
  net.noisy = algorithm == "rainbow" && rainbow.noisy;
  net.sigma0 = rainbow.sigma0;
  return net;
}

RainbowHyper ExperimentConfig::resolved_rainbow() const {
  RainbowHyper h = rainbow;
  if (!(h.v_max > h.v_min)) h.v_max = game_r_max(game_id());
  return h;
}

nlohmann::json to_json(const ExperimentConfig& cfg) {
  json doc = default_doc();
  doc["name"] = cfg.name;
  doc["game"] = cfg.game;
  doc["algorithm"] = cfg.algorithm;
  doc["seed"] = cfg.seed;
  doc["seeds"] = cfg.seeds;
  doc["total_timesteps"] = cfg.total_timesteps;
  doc["eval"]["interval"] = cfg.eval_interval;
  doc["eval"]["episodes"] = cfg.eval_episodes;
  doc["levels"]["n_train"] = cfg.n_train_levels;
  doc["levels"]["universe"] = cfg.level_universe;
  doc["env"]["obs_size"] = cfg.obs_size;
  doc["env"]["horizon"] = cfg.horizon;
  doc["env"]["num_envs"] = cfg.num_envs;
  doc["model"]["size_multiplier"] = cfg.model_size;
  doc["model"]["batch_norm"] = cfg.batch_norm;
  doc["regularization"]["l2_weight"] = cfg.l2_weight;
  doc["augment"]["method"] = to_string(cfg.augment.method);
  doc["augment"]["mix_alpha"] = cfg.augment.mix_alpha;
  doc["augment"]["force_lambda"] =
      cfg.augment.force_lambda ? json(*cfg.augment.force_lambda) : json(nullptr);
  doc["augment"]["cutout_min"] = cfg.augment.cutout_min;
  doc["augment"]["crop_scale"] = cfg.augment.crop_scale;
  doc["augment"]["conv_kernel"] = cfg.augment.conv_kernel;
  doc["ppo"] = json{{"gamma", cfg.ppo.gamma},
                    {"gae_lambda", cfg.ppo.gae_lambda},
                    {"rollout_steps", cfg.ppo.rollout_steps},
                    {"epochs", cfg.ppo.epochs},
                    {"minibatches", cfg.ppo.minibatches},
                    {"clip", cfg.ppo.clip},
                    {"value_coef", cfg.ppo.value_coef},
                    {"entropy_coef", cfg.ppo.entropy_coef},
                    {"lr", cfg.ppo.lr},
                    {"adam_eps", cfg.ppo.adam_eps},
                    {"grad_clip", cfg.ppo.grad_clip},
                    {"reward_norm", cfg.ppo.reward_norm}};
  doc["rainbow"] = json{{"gamma", cfg.rainbow.gamma},
                        {"lr", cfg.rainbow.lr},
                        {"adam_eps", cfg.rainbow.adam_eps},
                        {"grad_clip", cfg.rainbow.grad_clip},
                        {"n_step", cfg.rainbow.n_step},
                        {"atoms", cfg.rainbow.atoms},
                        {"v_min", cfg.rainbow.v_min},
                        {"v_max", cfg.rainbow.v_max > cfg.rainbow.v_min ? json(cfg.rainbow.v_max)
                                                                        : json(nullptr)},
                        {"replay_capacity", cfg.rainbow.replay_capacity},
                        {"min_history", cfg.rainbow.min_history},
                        {"batch_size", cfg.rainbow.batch_size},
                        {"update_every", cfg.rainbow.update_every},
                        {"target_period", cfg.rainbow.target_period},
                        {"prio_omega", cfg.rainbow.prio_omega},
                        {"prio_beta", cfg.rainbow.prio_beta},
                        {"prio_eps", cfg.rainbow.prio_eps},
                        {"noisy", cfg.rainbow.noisy},
                        {"sigma0", cfg.rainbow.sigma0}};
  doc["compute"]["blas_threads"] = cfg.blas_threads;
  return doc;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw std::invalid_argument("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;  // plain string
  }
  json* slot = &doc;
  size_t pos = 0;
  while (true) {
    const size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot - pos);
    if (key.empty()) throw std::invalid_argument("override has an empty path segment: " + path);
    if (dot == std::string::npos) {
      (*slot)[key] = value;
      return;
    }
    slot = &(*slot)[key];
    pos = dot + 1;
  }
}

void save_config(const ExperimentConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << to_json(cfg).dump(2) << "\n";
}

}  // namespace mixrl
