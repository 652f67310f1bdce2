#include "mixrl/rollout.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace mixrl {

RewardNormalizer::RewardNormalizer(int n_envs, double gamma, double clip)
    : ret_(static_cast<size_t>(n_envs), 0.0), gamma_(gamma), clip_(clip) {
  if (n_envs < 1) throw std::invalid_argument("RewardNormalizer needs at least one env");
}

double RewardNormalizer::running_std() const {
  const double var = n_ > 0 ? m2_ / static_cast<double>(n_) : 0.0;
  return std::sqrt(var + 1e-8);
}

double RewardNormalizer::normalize(int env, double raw, bool done) {
  double& ret = ret_[static_cast<size_t>(env)];
  ret = gamma_ * ret + raw;
  n_ += 1;
  const double d = ret - mean_;
  mean_ += d / static_cast<double>(n_);
  m2_ += d * (ret - mean_);
  if (done) ret = 0.0;
  const double scaled = raw / running_std();
  return std::clamp(scaled, -clip_, clip_);
}

void gae(const std::vector<double>& rewards, const std::vector<double>& values,
         const std::vector<uint8_t>& dones, const std::vector<double>& bootstrap, int T, int E,
         double gamma, double lambda, std::vector<double>& advantage,
         std::vector<double>& value_target) {
  const size_t n = static_cast<size_t>(T) * E;
  if (rewards.size() != n || values.size() != n || dones.size() != n ||
      bootstrap.size() != static_cast<size_t>(E))
    throw std::invalid_argument("gae: sequence lengths do not match T*E");
  advantage.assign(n, 0.0);
  value_target.assign(n, 0.0);
  for (int e = 0; e < E; ++e) {
    double carry = 0.0;
    for (int t = T - 1; t >= 0; --t) {
      const size_t i = static_cast<size_t>(t) * E + e;
      const double nonterminal = dones[i] ? 0.0 : 1.0;
      const double next_value =
          t == T - 1 ? bootstrap[static_cast<size_t>(e)] : values[i + static_cast<size_t>(E)];
      const double delta = rewards[i] + gamma * next_value * nonterminal - values[i];
      carry = delta + gamma * lambda * nonterminal * carry;
      advantage[i] = carry;
      value_target[i] = carry + values[i];
    }
  }
}

NStepOut nstep_return(const std::vector<double>& rewards, const std::vector<uint8_t>& dones,
                      int t, int n, double gamma) {
  if (n < 1) throw std::invalid_argument("nstep_return: n must be at least 1");
  if (t < 0 || t >= static_cast<int>(rewards.size()))
    throw std::invalid_argument("nstep_return: start index out of range");
  NStepOut out;
  double disc = 1.0;
  int k = 0;
  for (; k < n && t + k < static_cast<int>(rewards.size()); ++k) {
    out.return_n += disc * rewards[static_cast<size_t>(t + k)];
    disc *= dones[static_cast<size_t>(t + k)] ? 0.0 : gamma;
    if (dones[static_cast<size_t>(t + k)]) {
      k += 1;
      break;
    }
  }
  out.discount_n = disc;
  out.bootstrap_index = t + k;
  return out;
}

RolloutBatch collect(PolicyValueNet& net, VecEnv& venv, int T, RewardNormalizer* normalizer,
                     Rng& action_rng, std::vector<double>* episode_returns,
                     std::vector<int>* episode_lengths) {
  if (T < 1) throw std::invalid_argument("collect: T must be at least 1");
  const int E = venv.size();
  const int C = venv.obs(0).extent(0);
  const int H = venv.obs(0).extent(1);
  const int W = venv.obs(0).extent(2);
  const size_t obs_len = static_cast<size_t>(C) * H * W;

  RolloutBatch batch;
  batch.T = T;
  batch.E = E;
  batch.obs = Tensor({T * E, C, H, W});
  batch.action.resize(static_cast<size_t>(T) * E);
  batch.reward_raw.resize(static_cast<size_t>(T) * E);
  batch.reward_norm.resize(static_cast<size_t>(T) * E);
  batch.pi_old.resize(static_cast<size_t>(T) * E);
  batch.v_old.resize(static_cast<size_t>(T) * E);
  batch.done.resize(static_cast<size_t>(T) * E);
  batch.bootstrap_value.resize(static_cast<size_t>(E));

  Tensor step_obs({E, C, H, W});
  for (int t = 0; t < T; ++t) {
    for (int e = 0; e < E; ++e)
      std::memcpy(&step_obs.data[static_cast<size_t>(e) * obs_len], venv.obs(e).data.data(),
                  obs_len * sizeof(double));
    std::memcpy(&batch.obs.data[static_cast<size_t>(t) * E * obs_len], step_obs.data.data(),
                static_cast<size_t>(E) * obs_len * sizeof(double));

    Graph g;
    const auto out = net.forward(g, g.leaf(step_obs), Mode::eval);
    const int probs_node = g.softmax_last(out.logits);
    const Tensor& probs = g.value(probs_node);
    const Tensor& values = g.value(out.value);
    const int A = probs.extent(1);

    for (int e = 0; e < E; ++e) {
      const double* pe = &probs.data[static_cast<size_t>(e) * A];
      const double u = action_rng.uniform();
      int a = A - 1;
      double acc = 0.0;
      for (int k = 0; k < A; ++k) {
        acc += pe[k];
        if (u < acc) {
          a = k;
          break;
        }
      }
      const size_t i = static_cast<size_t>(t) * E + e;
      const auto sr = venv.step(e, a);
      batch.action[i] = a;
      batch.pi_old[i] = pe[a];
      batch.v_old[i] = values.data[static_cast<size_t>(e)];
      batch.reward_raw[i] = sr.reward;
      batch.reward_norm[i] =
          normalizer ? normalizer->normalize(e, sr.reward, sr.done) : sr.reward;
      batch.done[i] = sr.done ? 1 : 0;
      if (sr.done) {
        if (episode_returns) episode_returns->push_back(sr.episode_return);
        if (episode_lengths) episode_lengths->push_back(sr.episode_len);
      }
    }
  }

  for (int e = 0; e < E; ++e)
    std::memcpy(&step_obs.data[static_cast<size_t>(e) * obs_len], venv.obs(e).data.data(),
                obs_len * sizeof(double));
  Graph g;
  const auto out = net.forward(g, g.leaf(step_obs), Mode::eval);
  batch.bootstrap_value.assign(g.value(out.value).data.begin(), g.value(out.value).data.end());
  return batch;
}

}  // namespace mixrl
