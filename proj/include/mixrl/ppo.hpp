#pragma once

#include <vector>

#include "mixrl/mix.hpp"
#include "mixrl/network.hpp"
#include "mixrl/rollout.hpp"

namespace mixrl {

struct PpoHyper {
  double clip = 0.2;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double gamma = 0.999;
  double gae_lambda = 0.95;
  double lr = 5e-4;
  double adam_eps = 1e-5;
  double grad_clip = 0.5;
  int epochs = 3;
  int minibatches = 8;
  int rollout_steps = 256;
  bool reward_norm = true;
};

// Negated clipped surrogate: -E[min(r*A, clip(r, 1-eps, 1+eps)*A)] with
// r = pi(a|s) / pi_old. pi_old entries must be positive.
int clip_loss(Graph& g, int logits, const std::vector<int>& actions,
              const std::vector<double>& pi_old, const std::vector<double>& advantage,
              double clip);

// 0.5 * E[max((V - targ)^2, (clip(V, old-eps, old+eps) - targ)^2)]
int value_loss(Graph& g, int value, const std::vector<double>& v_old,
               const std::vector<double>& v_target, double clip);

// E[H(pi(.|s))]
int entropy_bonus(Graph& g, int logits);

std::vector<double> standardized(const std::vector<double>& x);

struct PpoDiag {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  int gradient_steps = 0;
};

// epochs x minibatches Adam steps over the rollout. Mixing (or a local
// observation augmentation) is applied per minibatch draw; advantages are
// standardized over the whole batch before mixing.
PpoDiag ppo_update(PolicyValueNet& net, const RolloutBatch& batch, const PpoHyper& hyper,
                   const AugmentSpec& augment, double l2_weight, Rng& mix_rng, Rng& opt_rng,
                   Rng* noise_rng = nullptr);

}  // namespace mixrl
