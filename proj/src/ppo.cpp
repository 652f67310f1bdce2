#include "mixrl/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <stdexcept>

#include "mixrl/optim.hpp"

namespace mixrl {

int clip_loss(Graph& g, int logits, const std::vector<int>& actions,
              const std::vector<double>& pi_old, const std::vector<double>& advantage,
              double clip) {
  const int B = g.value(logits).extent(0);
  if (static_cast<int>(pi_old.size()) != B || static_cast<int>(advantage.size()) != B)
    throw std::invalid_argument("clip_loss: batch length mismatch");
  std::vector<double> log_pi_old(pi_old.size());
  for (size_t i = 0; i < pi_old.size(); ++i) {
    if (!(pi_old[i] > 0.0)) throw std::invalid_argument("clip_loss: behavior probability <= 0");
    log_pi_old[i] = std::log(pi_old[i]);
  }
  const int logp = g.log_softmax_last(logits);
  const int logp_a = g.gather_rows(logp, actions);
  const int ratio = g.exp_(g.sub(logp_a, g.leaf(Tensor::from({B}, std::move(log_pi_old)))));
  const int adv = g.leaf(Tensor::from({B}, advantage));
  const int unclipped = g.mul(ratio, adv);
  const int clipped = g.mul(g.clamp(ratio, Tensor({B}, 1.0 - clip), Tensor({B}, 1.0 + clip)), adv);
  return g.neg(g.mean_all(g.minimum(unclipped, clipped)));
}

int value_loss(Graph& g, int value, const std::vector<double>& v_old,
               const std::vector<double>& v_target, double clip) {
  const int B = g.value(value).extent(0);
  if (static_cast<int>(v_old.size()) != B || static_cast<int>(v_target.size()) != B)
    throw std::invalid_argument("value_loss: batch length mismatch");
  Tensor lo({B}), hi({B});
  for (int i = 0; i < B; ++i) {
    lo.data[static_cast<size_t>(i)] = v_old[static_cast<size_t>(i)] - clip;
    hi.data[static_cast<size_t>(i)] = v_old[static_cast<size_t>(i)] + clip;
  }
  const int targ = g.leaf(Tensor::from({B}, v_target));
  const int plain = g.square(g.sub(value, targ));
  const int clipped = g.square(g.sub(g.clamp(value, std::move(lo), std::move(hi)), targ));
  return g.affine({g.mean_all(g.maximum(plain, clipped))}, {0.5});
}

int entropy_bonus(Graph& g, int logits) {
  const int logp = g.log_softmax_last(logits);
  const int p = g.exp_(logp);
  return g.mean_all(g.neg(g.sum_last(g.mul(p, logp))));
}

std::vector<double> standardized(const std::vector<double>& x) {
  if (x.empty()) return {};
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / (std::sqrt(var) + 1e-8);
  std::vector<double> out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) * inv;
  return out;
}

namespace {

struct Minibatch {
  Tensor obs;
  std::vector<int> action;
  std::vector<double> pi_old, advantage, v_target, v_old;
};

Minibatch gather_minibatch(const RolloutBatch& batch, const std::vector<double>& advantage,
                           const std::vector<int>& ids) {
  const int n = static_cast<int>(ids.size());
  const int C = batch.obs.extent(1), H = batch.obs.extent(2), W = batch.obs.extent(3);
  const size_t row = static_cast<size_t>(C) * H * W;
  Minibatch mb;
  mb.obs = Tensor({n, C, H, W});
  mb.action.resize(ids.size());
  mb.pi_old.resize(ids.size());
  mb.advantage.resize(ids.size());
  mb.v_target.resize(ids.size());
  mb.v_old.resize(ids.size());
  for (int k = 0; k < n; ++k) {
    const size_t i = static_cast<size_t>(ids[static_cast<size_t>(k)]);
    std::memcpy(&mb.obs.data[static_cast<size_t>(k) * row], &batch.obs.data[i * row],
                row * sizeof(double));
    mb.action[static_cast<size_t>(k)] = batch.action[i];
    mb.pi_old[static_cast<size_t>(k)] = batch.pi_old[i];
    mb.advantage[static_cast<size_t>(k)] = advantage[i];
    mb.v_target[static_cast<size_t>(k)] = batch.value_target[i];
    mb.v_old[static_cast<size_t>(k)] = batch.v_old[i];
  }
  return mb;
}

void mix_minibatch(Minibatch& mb, const AugmentSpec& spec, Rng& mix_rng) {
  std::map<std::string, std::vector<double>> attachments{{"advantage", mb.advantage},
                                                         {"pi_old", mb.pi_old},
                                                         {"v_old", mb.v_old},
                                                         {"v_target", mb.v_target}};
  MixedBatch mixed =
      spec.method == AugmentMethod::mixreg
          ? mix_batch(mb.obs, mb.action, attachments, spec.mix_alpha, mix_rng, spec.force_lambda)
          : mix_obs_only(mb.obs, mb.action, attachments, spec.mix_alpha, mix_rng,
                         spec.force_lambda);
  mb.obs = std::move(mixed.obs);
  mb.action = std::move(mixed.action);
  mb.advantage = std::move(mixed.scalars.at("advantage"));
  mb.pi_old = std::move(mixed.scalars.at("pi_old"));
  mb.v_old = std::move(mixed.scalars.at("v_old"));
  mb.v_target = std::move(mixed.scalars.at("v_target"));
}

}  // namespace

PpoDiag ppo_update(PolicyValueNet& net, const RolloutBatch& batch, const PpoHyper& hyper,
                   const AugmentSpec& augment, double l2_weight, Rng& mix_rng, Rng& opt_rng,
                   Rng* noise_rng) {
  const int B = static_cast<int>(batch.size());
  if (B == 0 || batch.advantage.empty())
    throw std::invalid_argument("ppo_update: empty or incomplete rollout batch");

  const std::vector<double> advantage = standardized(batch.advantage);

  std::vector<int> perm(static_cast<size_t>(B));
  std::iota(perm.begin(), perm.end(), 0);

  PpoDiag diag;
  const AdamHyper adam{hyper.lr, 0.9, 0.999, hyper.adam_eps};
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    for (int i = B - 1; i > 0; --i)
      std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(opt_rng.uniform_int(i + 1))]);
    for (int m = 0; m < hyper.minibatches; ++m) {
      const int lo = static_cast<int>(static_cast<int64_t>(B) * m / hyper.minibatches);
      const int hi = static_cast<int>(static_cast<int64_t>(B) * (m + 1) / hyper.minibatches);
      if (hi <= lo) continue;
      Minibatch mb = gather_minibatch(batch, advantage,
                                      {perm.begin() + lo, perm.begin() + hi});
      if (augment.method == AugmentMethod::mixreg || augment.method == AugmentMethod::mixobs_only)
        mix_minibatch(mb, augment, mix_rng);
      else
        apply_observation_augment(mb.obs, augment, mix_rng);

      Graph g;
      const auto out = net.forward(g, g.leaf(mb.obs), Mode::train, noise_rng);
      const int l_clip = clip_loss(g, out.logits, mb.action, mb.pi_old, mb.advantage, hyper.clip);
      const int l_value = value_loss(g, out.value, mb.v_old, mb.v_target, hyper.clip);
      const int l_entropy = entropy_bonus(g, out.logits);
      int total = g.affine({l_clip, l_value, l_entropy},
                           {1.0, hyper.value_coef, -hyper.entropy_coef});
      if (l2_weight > 0.0) total = g.affine({total, l2_penalty(g, net.params, l2_weight)}, {1.0, 1.0});

      const double loss_value = g.value(total).data[0];
      if (!std::isfinite(loss_value))
        throw std::runtime_error("ppo_update: non-finite loss (policy=" +
                                 std::to_string(g.value(l_clip).data[0]) +
                                 ", value=" + std::to_string(g.value(l_value).data[0]) + ")");

      net.params.zero_grad();
      g.backward(total);
      diag.grad_norm += grad_norm(net.params);
      adam_step(net.params, adam, hyper.grad_clip);

      // diagnostics from this minibatch's tape
      diag.policy_loss += g.value(l_clip).data[0];
      diag.value_loss += g.value(l_value).data[0];
      diag.entropy += g.value(l_entropy).data[0];
      const int n = static_cast<int>(mb.action.size());
      const Tensor& logp = g.value(g.log_softmax_last(out.logits));
      const int A = logp.extent(1);
      double kl = 0.0, clipped = 0.0;
      for (int k = 0; k < n; ++k) {
        const double lp =
            logp.data[static_cast<size_t>(k) * A + mb.action[static_cast<size_t>(k)]];
        const double ratio = std::exp(lp - std::log(mb.pi_old[static_cast<size_t>(k)]));
        kl += std::log(mb.pi_old[static_cast<size_t>(k)]) - lp;
        if (std::fabs(ratio - 1.0) > hyper.clip) clipped += 1.0;
      }
      diag.approx_kl += kl / n;
      diag.clip_fraction += clipped / n;
      diag.gradient_steps += 1;
    }
  }
  const double steps = std::max(1, diag.gradient_steps);
  diag.policy_loss /= steps;
  diag.value_loss /= steps;
  diag.entropy /= steps;
  diag.approx_kl /= steps;
  diag.clip_fraction /= steps;
  diag.grad_norm /= steps;
  return diag;
}

}  // namespace mixrl
