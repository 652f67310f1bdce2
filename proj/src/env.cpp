#include "mixrl/env.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <stdexcept>

namespace mixrl {

namespace {

constexpr int kCollectorWalls = 6;
constexpr int kCollectorHazards = 2;
constexpr double kCorridorWallProb = 0.3;
constexpr int kLevelRetries = 256;

constexpr int kDr[kActions] = {0, -1, 0, 1, 0};
constexpr int kDc[kActions] = {0, 0, 1, 0, -1};

int cell_index(int r, int c) { return r * kGrid + c; }
bool in_grid(int r, int c) { return r >= 0 && r < kGrid && c >= 0 && c < kGrid; }

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

// Colors live on the 8-bit lattice so observations are exact in binary.
std::array<double, 3> quantize(std::array<double, 3> rgb) {
  for (double& x : rgb) x = std::round(x * 255.0) / 255.0;
  return rgb;
}

Palette sample_palette(Rng& rng) {
  Palette p;
  const double h0 = rng.uniform();
  double hues[4];
  for (int k = 0; k < 4; ++k) hues[k] = h0 + 0.25 * k + rng.uniform(-0.06, 0.06);
  p.bg = quantize(hsv_to_rgb(hues[0], rng.uniform(0.3, 0.7), rng.uniform(0.25, 0.5)));
  p.wall = quantize(hsv_to_rgb(hues[1], rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0)));
  p.item = quantize(hsv_to_rgb(hues[2], rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0)));
  p.hazard = quantize(hsv_to_rgb(hues[3], rng.uniform(0.6, 1.0), rng.uniform(0.65, 1.0)));
  p.agent = {242.0 / 255.0, 242.0 / 255.0, 242.0 / 255.0};
  return p;
}

int draw_free_cell(Rng& rng, const std::array<Cell, kGrid * kGrid>& cells,
                   const std::vector<int>& reserved) {
  while (true) {
    const int i = rng.uniform_int(kGrid * kGrid);
    if (cells[static_cast<size_t>(i)] != Cell::empty) continue;
    if (std::find(reserved.begin(), reserved.end(), i) != reserved.end()) continue;
    return i;
  }
}

// Cells reachable from (r, c) through empty/fruit/exit cells.
std::array<bool, kGrid * kGrid> flood_fill(const std::array<Cell, kGrid * kGrid>& cells, int r,
                                           int c, bool hazards_block) {
  std::array<bool, kGrid * kGrid> seen{};
  std::deque<int> frontier{cell_index(r, c)};
  seen[static_cast<size_t>(cell_index(r, c))] = true;
  while (!frontier.empty()) {
    const int cur = frontier.front();
    frontier.pop_front();
    const int cr = cur / kGrid, cc = cur % kGrid;
    for (int a = 1; a < kActions; ++a) {
      const int nr = cr + kDr[a], nc = cc + kDc[a];
      if (!in_grid(nr, nc)) continue;
      const int ni = cell_index(nr, nc);
      if (seen[static_cast<size_t>(ni)]) continue;
      const Cell cell = cells[static_cast<size_t>(ni)];
      if (cell == Cell::wall) continue;
      if (hazards_block && cell == Cell::hazard) continue;
      seen[static_cast<size_t>(ni)] = true;
      frontier.push_back(ni);
    }
  }
  return seen;
}

bool generate_collector(Rng& rng, EnvState& env) {
  env.cells.fill(Cell::empty);
  for (int i = 0; i < kCollectorWalls; ++i)
    env.cells[static_cast<size_t>(draw_free_cell(rng, env.cells, {}))] = Cell::wall;
  std::vector<int> fruit_cells;
  for (int i = 0; i < kCollectorFruits; ++i) {
    const int cell = draw_free_cell(rng, env.cells, fruit_cells);
    fruit_cells.push_back(cell);
  }
  for (int cell : fruit_cells) env.cells[static_cast<size_t>(cell)] = Cell::fruit;

  // Hazards keep their distance from fruit so a near-miss is survivable.
  for (int i = 0; i < kCollectorHazards; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      const int cell = draw_free_cell(rng, env.cells, {});
      const int r = cell / kGrid, c = cell % kGrid;
      bool near_fruit = false;
      for (int a = 1; a < kActions; ++a) {
        const int nr = r + kDr[a], nc = c + kDc[a];
        if (in_grid(nr, nc) && env.cells[static_cast<size_t>(cell_index(nr, nc))] == Cell::fruit)
          near_fruit = true;
      }
      if (near_fruit) continue;
      env.cells[static_cast<size_t>(cell)] = Cell::hazard;
      placed = true;
    }
    if (!placed) return false;
  }

  const int agent = draw_free_cell(rng, env.cells, {});
  env.agent_r = agent / kGrid;
  env.agent_c = agent % kGrid;
  env.fruits_left = kCollectorFruits;

  const auto reach = flood_fill(env.cells, env.agent_r, env.agent_c, true);
  for (int cell : fruit_cells)
    if (!reach[static_cast<size_t>(cell)]) return false;
  return true;
}

bool generate_corridor(Rng& rng, EnvState& env) {
  env.cells.fill(Cell::empty);
  for (int i = 0; i < kGrid * kGrid; ++i)
    if (rng.uniform() < kCorridorWallProb) env.cells[static_cast<size_t>(i)] = Cell::wall;

  const int agent = draw_free_cell(rng, env.cells, {});
  env.agent_r = agent / kGrid;
  env.agent_c = agent % kGrid;

  int exit_cell = -1;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const int cell = draw_free_cell(rng, env.cells, {agent});
    const int dist = std::abs(cell / kGrid - env.agent_r) + std::abs(cell % kGrid - env.agent_c);
    if (dist >= kGrid) {
      exit_cell = cell;
      break;
    }
  }
  if (exit_cell < 0) return false;
  env.cells[static_cast<size_t>(exit_cell)] = Cell::exit_door;
  env.fruits_left = 0;

  const auto reach = flood_fill(env.cells, env.agent_r, env.agent_c, false);
  return reach[static_cast<size_t>(exit_cell)];
}

}  // namespace

Game game_from_string(const std::string& name) {
  if (name == "collector") return Game::collector;
  if (name == "corridor") return Game::corridor;
  throw std::invalid_argument("unknown game: " + name);
}

std::string to_string(Game game) {
  return game == Game::collector ? "collector" : "corridor";
}

double game_r_max(Game game) {
  return game == Game::collector ? static_cast<double>(kCollectorFruits) : kExitReward;
}

uint64_t LevelSeed::rng_seed() const {
  const uint64_t g = static_cast<uint64_t>(game) + 1;
  return (g << 40) ^ (static_cast<uint64_t>(index) * 0x9E3779B97F4A7C15ULL) ^ 0x5851F42D4C957F2DULL;
}

EnvState make_level(const LevelSeed& seed, const EnvConfig& cfg) {
  if (cfg.obs_size % kGrid != 0)
    throw std::invalid_argument("obs_size must be a multiple of " + std::to_string(kGrid));
  for (int attempt = 0; attempt < kLevelRetries; ++attempt) {
    Rng rng(seed.rng_seed(), static_cast<uint64_t>(attempt));
    EnvState env;
    env.game = seed.game;
    env.level = seed.index;
    env.palette = sample_palette(rng);
    env.steps = 0;
    env.horizon = cfg.horizon;
    env.done = false;
    const bool ok = seed.game == Game::collector ? generate_collector(rng, env)
                                                 : generate_corridor(rng, env);
    if (ok) return env;
  }
  throw std::runtime_error("could not generate a solvable level for " + to_string(seed.game) +
                           " index " + std::to_string(seed.index));
}

StepResult env_step(EnvState& env, int action) {
  if (env.done) throw std::logic_error("env_step: episode already finished");
  if (action < 0 || action >= kActions)
    throw std::invalid_argument("action out of range: " + std::to_string(action));
  env.steps += 1;

  StepResult out;
  int nr = env.agent_r + kDr[action];
  int nc = env.agent_c + kDc[action];
  if (!in_grid(nr, nc) || env.cells[static_cast<size_t>(cell_index(nr, nc))] == Cell::wall) {
    nr = env.agent_r;
    nc = env.agent_c;
  }
  env.agent_r = nr;
  env.agent_c = nc;

  Cell& here = env.cells[static_cast<size_t>(cell_index(nr, nc))];
  switch (here) {
    case Cell::fruit:
      out.reward = 1.0;
      here = Cell::empty;
      env.fruits_left -= 1;
      if (env.fruits_left == 0) out.done = true;
      break;
    case Cell::hazard:
      out.done = true;
      break;
    case Cell::exit_door:
      out.reward = kExitReward;
      out.done = true;
      break;
    default:
      break;
  }
  if (env.steps >= env.horizon) out.done = true;
  env.done = out.done;
  return out;
}

void observe(const EnvState& env, const EnvConfig& cfg, Tensor& out) {
  const int H = cfg.obs_size;
  if (out.shape != std::vector<int>{3, H, H}) out = Tensor({3, H, H});
  const int px = H / kGrid;
  const Palette& pal = env.palette;

  auto fill_rect = [&](int r0, int c0, int h, int w, const std::array<double, 3>& color) {
    for (int ch = 0; ch < 3; ++ch) {
      double* plane = &out.data[static_cast<size_t>(ch) * H * H];
      for (int r = r0; r < r0 + h; ++r)
        for (int c = c0; c < c0 + w; ++c) plane[r * H + c] = color[static_cast<size_t>(ch)];
    }
  };

  fill_rect(0, 0, H, H, pal.bg);
  for (int r = 0; r < kGrid; ++r)
    for (int c = 0; c < kGrid; ++c) {
      const Cell cell = env.cells[static_cast<size_t>(cell_index(r, c))];
      const int y = r * px, x = c * px;
      switch (cell) {
        case Cell::wall:
          fill_rect(y, x, px, px, pal.wall);
          break;
        case Cell::fruit:
          fill_rect(y + px / 4, x + px / 4, px / 2, px / 2, pal.item);
          break;
        case Cell::hazard:
          for (int ch = 0; ch < 3; ++ch) {
            double* plane = &out.data[static_cast<size_t>(ch) * H * H];
            for (int d = 0; d < px; ++d) {
              plane[(y + d) * H + (x + d)] = pal.hazard[static_cast<size_t>(ch)];
              plane[(y + d) * H + (x + px - 1 - d)] = pal.hazard[static_cast<size_t>(ch)];
            }
          }
          break;
        case Cell::exit_door: {
          const int t = std::max(1, px / 4);
          fill_rect(y, x, px, t, pal.item);
          fill_rect(y + px - t, x, px, t, pal.item);
          fill_rect(y, x, t, px, pal.item);
          fill_rect(y + px - t, x, t, px, pal.item);
          break;
        }
        default:
          break;
      }
    }
  const int ay = env.agent_r * px, ax = env.agent_c * px;
  const int inset = std::max(1, px / 8);
  fill_rect(ay + inset, ax + inset, px - 2 * inset, px - 2 * inset, pal.agent);
}

Tensor observe(const EnvState& env, const EnvConfig& cfg) {
  Tensor out({3, cfg.obs_size, cfg.obs_size});
  observe(env, cfg, out);
  return out;
}

int greedy_action(const EnvState& env) {
  const bool hazards_block = env.game == Game::collector;
  const Cell target = env.game == Game::collector ? Cell::fruit : Cell::exit_door;

  std::array<int, kGrid * kGrid> first_action{};
  std::array<bool, kGrid * kGrid> seen{};
  first_action.fill(0);
  std::deque<int> frontier;
  const int start = cell_index(env.agent_r, env.agent_c);
  seen[static_cast<size_t>(start)] = true;
  frontier.push_back(start);
  while (!frontier.empty()) {
    const int cur = frontier.front();
    frontier.pop_front();
    if (env.cells[static_cast<size_t>(cur)] == target) return first_action[static_cast<size_t>(cur)];
    const int cr = cur / kGrid, cc = cur % kGrid;
    for (int a = 1; a < kActions; ++a) {
      const int nr = cr + kDr[a], nc = cc + kDc[a];
      if (!in_grid(nr, nc)) continue;
      const int ni = cell_index(nr, nc);
      if (seen[static_cast<size_t>(ni)]) continue;
      const Cell cell = env.cells[static_cast<size_t>(ni)];
      if (cell == Cell::wall) continue;
      if (hazards_block && cell == Cell::hazard) continue;
      seen[static_cast<size_t>(ni)] = true;
      first_action[static_cast<size_t>(ni)] =
          cur == start ? a : first_action[static_cast<size_t>(cur)];
      frontier.push_back(ni);
    }
  }
  return 0;
}

LevelSplit split_levels(uint32_t n_train, uint32_t universe) {
  if (n_train < 1) throw std::invalid_argument("n_train must be at least 1");
  if (n_train >= universe)
    throw std::invalid_argument("training set covers the whole universe; no test levels remain");
  LevelSplit split;
  split.universe = universe;
  split.train.resize(n_train);
  for (uint32_t i = 0; i < n_train; ++i) split.train[i] = i;
  return split;
}

uint32_t LevelSplit::sample_test(Rng& rng) const {
  // The training set is the index prefix, so the complement is a range.
  const uint32_t n_train = static_cast<uint32_t>(train.size());
  return n_train + static_cast<uint32_t>(rng.uniform_int(static_cast<int>(universe - n_train)));
}

VecEnv::VecEnv(Game game, const EnvConfig& cfg, std::vector<uint32_t> level_set, int n_envs,
               uint64_t seed, uint64_t stream)
    : game_(game), cfg_(cfg), level_set_(std::move(level_set)), level_rng_(seed, stream) {
  if (level_set_.empty()) throw std::invalid_argument("VecEnv needs a non-empty level set");
  if (n_envs < 1) throw std::invalid_argument("VecEnv needs at least one instance");
  envs_.resize(static_cast<size_t>(n_envs));
  obs_.resize(static_cast<size_t>(n_envs));
  ep_return_.resize(static_cast<size_t>(n_envs));
  ep_len_.resize(static_cast<size_t>(n_envs));
  for (int e = 0; e < n_envs; ++e) reset_env(e);
}

void VecEnv::reset_env(int e) {
  const uint32_t idx =
      level_set_[static_cast<size_t>(level_rng_.uniform_int(static_cast<int>(level_set_.size())))];
  envs_[static_cast<size_t>(e)] = make_level({game_, idx}, cfg_);
  observe(envs_[static_cast<size_t>(e)], cfg_, obs_[static_cast<size_t>(e)]);
  ep_return_[static_cast<size_t>(e)] = 0.0;
  ep_len_[static_cast<size_t>(e)] = 0;
}

VecEnv::Out VecEnv::step(int e, int action) {
  EnvState& env = envs_[static_cast<size_t>(e)];
  StepResult r = env_step(env, action);
  ep_return_[static_cast<size_t>(e)] += r.reward;
  ep_len_[static_cast<size_t>(e)] += 1;

  Out out;
  out.reward = r.reward;
  out.done = r.done;
  if (r.done) {
    out.episode_return = ep_return_[static_cast<size_t>(e)];
    out.episode_len = ep_len_[static_cast<size_t>(e)];
    reset_env(e);
  } else {
    observe(env, cfg_, obs_[static_cast<size_t>(e)]);
  }
  return out;
}

namespace {

void put_be32(std::string& s, uint32_t v) {
  s.push_back(static_cast<char>((v >> 24) & 0xFF));
  s.push_back(static_cast<char>((v >> 16) & 0xFF));
  s.push_back(static_cast<char>((v >> 8) & 0xFF));
  s.push_back(static_cast<char>(v & 0xFF));
}

void put_chunk(std::string& out, const char type[4], const std::string& data) {
  put_be32(out, static_cast<uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  const uLong crc =
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  put_be32(out, static_cast<uint32_t>(crc));
}

}  // namespace

void render_png(const Tensor& obs, const std::filesystem::path& path) {
  if (obs.rank() != 3 || obs.extent(0) != 3)
    throw std::invalid_argument("render_png expects a [3,H,W] observation");
  const int H = obs.extent(1), W = obs.extent(2);

  std::string raw;
  raw.reserve(static_cast<size_t>(H) * (1 + 3 * W));
  for (int r = 0; r < H; ++r) {
    raw.push_back('\0');  // filter type 0
    for (int c = 0; c < W; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        const double v = obs.data[(static_cast<size_t>(ch) * H + r) * W + c];
        raw.push_back(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
      }
  }
  uLongf comp_len = compressBound(static_cast<uLong>(raw.size()));
  std::string compressed(comp_len, '\0');
  if (compress2(reinterpret_cast<Bytef*>(compressed.data()), &comp_len,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                Z_BEST_SPEED) != Z_OK)
    throw std::runtime_error("png deflate failed");
  compressed.resize(comp_len);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<uint32_t>(W));
  put_be32(ihdr, static_cast<uint32_t>(H));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", compressed);
  put_chunk(png, "IEND", "");

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f.write(png.data(), static_cast<std::streamsize>(png.size()));
}

}  // namespace mixrl
