#pragma once

#include <cstdint>
#include <vector>

#include "mixrl/env.hpp"
#include "mixrl/network.hpp"
#include "mixrl/rng.hpp"

namespace mixrl {

// T*E transitions laid out index = t*E + e. Behavior policy probability
// and value come from eval-mode forward at collection time.
struct RolloutBatch {
  int T = 0, E = 0;
  Tensor obs;  // [T*E, C, H, W]
  std::vector<int> action;
  std::vector<double> reward_raw, reward_norm;
  std::vector<double> pi_old, v_old;
  std::vector<uint8_t> done;
  std::vector<double> bootstrap_value;          // [E], value of the state after step T-1
  std::vector<double> advantage, value_target;  // filled by gae()

  int64_t size() const { return static_cast<int64_t>(T) * E; }
};

// Scales rewards by the running std of the discounted-return accumulator
// (no mean subtraction), clipped to +/-clip.
class RewardNormalizer {
 public:
  RewardNormalizer(int n_envs, double gamma, double clip = 10.0);
  double normalize(int env, double raw_reward, bool done);
  double running_std() const;
  int64_t count() const { return n_; }

 private:
  std::vector<double> ret_;
  double gamma_, clip_;
  double mean_ = 0.0, m2_ = 0.0;
  int64_t n_ = 0;
};

// A_t = sum_k (gamma*lambda)^k delta_{t+k}, truncated at episode ends and
// bootstrapped at the rollout boundary; V^targ = A + V.
void gae(const std::vector<double>& rewards, const std::vector<double>& values,
         const std::vector<uint8_t>& dones, const std::vector<double>& bootstrap, int T, int E,
         double gamma, double lambda, std::vector<double>& advantage,
         std::vector<double>& value_target);

struct NStepOut {
  double return_n = 0.0;
  double discount_n = 0.0;
  int bootstrap_index = 0;  // state index to bootstrap from (unused when discount is 0)
};

// Truncated n-step discounted return starting at transition t; the
// per-step discount drops to zero at episode termination.
NStepOut nstep_return(const std::vector<double>& rewards, const std::vector<uint8_t>& dones,
                      int t, int n, double gamma);

// Runs the policy snapshot for T vectorized steps. Completed-episode raw
// returns are appended to episode_returns when provided.
RolloutBatch collect(PolicyValueNet& net, VecEnv& venv, int T, RewardNormalizer* normalizer,
                     Rng& action_rng, std::vector<double>* episode_returns = nullptr,
                     std::vector<int>* episode_lengths = nullptr);

}  // namespace mixrl
