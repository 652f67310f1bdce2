#pragma once

#include <cstdint>
#include <deque>
#include <vector>

#include "mixrl/mix.hpp"
#include "mixrl/network.hpp"
#include "mixrl/rng.hpp"

namespace mixrl {

struct RainbowHyper {
  double gamma = 0.999;
  double lr = 2.5e-4;
  double adam_eps = 1.5e-4;
  double grad_clip = 0.0;  // disabled
  int n_step = 3;
  int atoms = 51;
  double v_min = 0.0;
  double v_max = 5.0;
  int replay_capacity = 50'000;
  int min_history = 2'000;
  int batch_size = 256;
  int update_every = 64;    // environment frames between gradient steps
  int target_period = 1'000;  // gradient steps between target syncs
  double prio_omega = 0.5;
  double prio_beta = 0.4;
  double prio_eps = 1e-6;
  bool noisy = true;
  double sigma0 = 0.5;
};

// Sum/min segment tree over leaf weights; sampling probability of leaf i
// is weight_i / total.
class SumTree {
 public:
  explicit SumTree(int capacity);
  void set(int i, double weight);
  double get(int i) const;
  double total() const;
  double min_weight() const;  // over leaves that were set
  int find_prefix(double mass) const;
  int capacity() const { return cap_; }

 private:
  int cap_, base_;
  std::vector<double> sum_, min_;
};

// Splits each shifted-and-contracted atom's mass linearly between the two
// neighboring canonical atoms, clamping out-of-range atoms to the border.
void project_distribution(double return_n, double discount_n, const double* masses, int n_atoms,
                          double v_min, double v_max, double* out);

std::vector<double> atom_support(int n_atoms, double v_min, double v_max);

// Ring of single observations (8-bit encoded) plus n-step transition
// records referencing them by index; prioritized sampling with
// importance weights normalized by the buffer-wide maximum.
class NStepReplay {
 public:
  NStepReplay(const RainbowHyper& hyper, int n_envs, int obs_c, int obs_h, int obs_w);

  void push(int env, const Tensor& obs, int action, double reward, bool done);
  int size() const { return static_cast<int>(std::min<int64_t>(record_count_, capacity_)); }
  bool ready() const { return size() >= min_history_; }

  struct Batch {
    std::vector<int64_t> ids;
    Tensor obs, next_obs;  // [B, C, H, W]
    std::vector<int> action;
    std::vector<double> return_n, discount_n, weight;
  };
  Batch sample(int batch_size, Rng& rng);
  void update_priorities(const std::vector<int64_t>& ids, const std::vector<double>& kl);
  int64_t stale_updates() const { return stale_; }

 private:
  struct Pending {
    int64_t obs_id;
    int action;
    double reward;
    bool done;
  };
  struct Record {
    int64_t id = -1;
    int64_t obs_id = 0, next_obs_id = 0;
    int action = 0;
    double return_n = 0.0, discount_n = 0.0;
  };

  void store_obs(const Tensor& obs, int64_t id);
  void decode_obs(int64_t id, double* out) const;
  void emit(std::deque<Pending>& queue, int64_t bootstrap_obs_id);

  int capacity_, min_history_, n_step_;
  double gamma_, omega_, beta_, prio_eps_;
  int obs_c_, obs_h_, obs_w_;
  size_t obs_len_;
  int obs_capacity_;
  std::vector<uint8_t> obs_ring_;
  std::vector<Record> records_;
  std::vector<std::deque<Pending>> pending_;
  SumTree tree_;
  int64_t obs_count_ = 0, record_count_ = 0, stale_ = 0;
  double max_priority_ = 1.0;
};

// Projected target masses [B, atoms] plus the online-greedy bootstrap
// actions. The bootstrap action comes from the online parameters, its
// return distribution from the target parameters; a mix plan interpolates
// masses and returns and takes the dominant side's action, discount and
// predicted action.
struct RainbowTargets {
  Tensor masses;
  std::vector<int> bootstrap_action;
};
RainbowTargets build_targets(DistributionalNet& net, NetworkParams& online_params,
                             NetworkParams& target_params, const Tensor& next_obs,
                             const std::vector<double>& return_n,
                             const std::vector<double>& discount_n, const RainbowHyper& hyper,
                             Rng* noise_rng, const MixPlan* plan);

std::vector<double> q_from_log_probs(const Tensor& log_probs, const std::vector<double>& support);

struct RainbowDiag {
  double loss = 0.0;
  double mean_kl = 0.0;
  double grad_norm = 0.0;
  double mean_weight = 0.0;
  int gradient_steps = 0;
};

class RainbowAgent {
 public:
  RainbowAgent(const ImpalaMiniConfig& net_cfg, const RainbowHyper& hyper, int n_actions,
               int n_envs, Rng& init_rng);

  // Greedy actions w.r.t. the online network's expected values; train
  // mode resamples factorized noise (the only exploration source).
  std::vector<int> act(const Tensor& obs_batch, Mode mode, Rng* noise_rng);

  void record(int env, const Tensor& obs, int action, double reward, bool done) {
    replay_.push(env, obs, action, reward, done);
  }
  bool ready() const { return replay_.ready(); }

  RainbowDiag update(const AugmentSpec& augment, double l2_weight, Rng& replay_rng, Rng& mix_rng,
                     Rng* noise_rng);

  DistributionalNet& net() { return net_; }
  NetworkParams& target_params() { return target_params_; }
  NStepReplay& replay() { return replay_; }
  const RainbowHyper& hyper() const { return hyper_; }
  int64_t updates() const { return updates_; }
  const std::vector<double>& support() const { return support_; }

 private:
  RainbowHyper hyper_;
  DistributionalNet net_;
  NetworkParams target_params_;
  NStepReplay replay_;
  std::vector<double> support_;
  int64_t updates_ = 0;
};

}  // namespace mixrl
