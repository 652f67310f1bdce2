#include "mixrl/rainbow.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <stdexcept>

#include "mixrl/optim.hpp"

namespace mixrl {

SumTree::SumTree(int capacity) : cap_(capacity) {
  if (capacity < 1) throw std::invalid_argument("SumTree capacity must be positive");
  base_ = 1;
  while (base_ < capacity) base_ <<= 1;
  sum_.assign(static_cast<size_t>(2 * base_), 0.0);
  min_.assign(static_cast<size_t>(2 * base_), std::numeric_limits<double>::infinity());
}

void SumTree::set(int i, double weight) {
  if (i < 0 || i >= cap_) throw std::out_of_range("SumTree index out of range");
  if (!(weight > 0.0) || !std::isfinite(weight))
    throw std::invalid_argument("SumTree weights must be positive and finite");
  size_t node = static_cast<size_t>(base_ + i);
  sum_[node] = weight;
  min_[node] = weight;
  for (node >>= 1; node >= 1; node >>= 1) {
    sum_[node] = sum_[2 * node] + sum_[2 * node + 1];
    min_[node] = std::min(min_[2 * node], min_[2 * node + 1]);
  }
}

double SumTree::get(int i) const { return sum_[static_cast<size_t>(base_ + i)]; }
double SumTree::total() const { return sum_[1]; }
double SumTree::min_weight() const { return min_[1]; }

int SumTree::find_prefix(double mass) const {
  size_t node = 1;
  while (node < static_cast<size_t>(base_)) {
    if (mass < sum_[2 * node]) {
      node = 2 * node;
    } else {
      mass -= sum_[2 * node];
      node = 2 * node + 1;
    }
  }
  const int leaf = static_cast<int>(node) - base_;
  return std::min(leaf, cap_ - 1);
}

std::vector<double> atom_support(int n_atoms, double v_min, double v_max) {
  if (n_atoms < 2 || !(v_max > v_min))
    throw std::invalid_argument("atom support needs n_atoms >= 2 and v_max > v_min");
  std::vector<double> z(static_cast<size_t>(n_atoms));
  const double dz = (v_max - v_min) / (n_atoms - 1);
  for (int i = 0; i < n_atoms; ++i) z[static_cast<size_t>(i)] = v_min + dz * i;
  return z;
}

void project_distribution(double return_n, double discount_n, const double* masses, int n_atoms,
                          double v_min, double v_max, double* out) {
  const double dz = (v_max - v_min) / (n_atoms - 1);
  std::fill(out, out + n_atoms, 0.0);
  for (int j = 0; j < n_atoms; ++j) {
    const double z = v_min + dz * j;
    const double tz = std::clamp(return_n + discount_n * z, v_min, v_max);
    const double b = (tz - v_min) / dz;
    const int lo = static_cast<int>(std::floor(b));
    const int hi = static_cast<int>(std::ceil(b));
    if (lo == hi) {
      out[lo] += masses[j];
    } else {
      out[lo] += masses[j] * (hi - b);
      out[hi] += masses[j] * (b - lo);
    }
  }
}

NStepReplay::NStepReplay(const RainbowHyper& hyper, int n_envs, int obs_c, int obs_h, int obs_w)
    : capacity_(hyper.replay_capacity),
      min_history_(hyper.min_history),
      n_step_(hyper.n_step),
      gamma_(hyper.gamma),
      omega_(hyper.prio_omega),
      beta_(hyper.prio_beta),
      prio_eps_(hyper.prio_eps),
      obs_c_(obs_c),
      obs_h_(obs_h),
      obs_w_(obs_w),
      obs_len_(static_cast<size_t>(obs_c) * obs_h * obs_w),
      tree_(hyper.replay_capacity) {
  if (capacity_ < 1 || min_history_ < 1 || n_step_ < 1)
    throw std::invalid_argument("replay capacity, min history and n must be positive");
  // Referenced observations must outlive their records: one record per
  // observation plus the assembly lag bounds the gap.
  obs_capacity_ = capacity_ + (n_step_ + 2) * n_envs + 64;
  obs_ring_.assign(static_cast<size_t>(obs_capacity_) * obs_len_, 0);
  records_.assign(static_cast<size_t>(capacity_), Record{});
  pending_.resize(static_cast<size_t>(n_envs));
}

void NStepReplay::store_obs(const Tensor& obs, int64_t id) {
  const size_t slot = static_cast<size_t>(id % obs_capacity_);
  uint8_t* dst = &obs_ring_[slot * obs_len_];
  for (size_t i = 0; i < obs_len_; ++i)
    dst[i] = static_cast<uint8_t>(std::lround(std::clamp(obs.data[i], 0.0, 1.0) * 255.0));
}

void NStepReplay::decode_obs(int64_t id, double* out) const {
  const size_t slot = static_cast<size_t>(id % obs_capacity_);
  const uint8_t* src = &obs_ring_[slot * obs_len_];
  for (size_t i = 0; i < obs_len_; ++i) out[i] = static_cast<double>(src[i]) / 255.0;
}

void NStepReplay::emit(std::deque<Pending>& queue, int64_t bootstrap_obs_id) {
  const Pending& front = queue.front();
  Record rec;
  rec.id = record_count_;
  rec.obs_id = front.obs_id;
  rec.next_obs_id = bootstrap_obs_id;
  rec.action = front.action;
  double disc = 1.0;
  for (int k = 0; k < n_step_ && k < static_cast<int>(queue.size()); ++k) {
    const Pending& p = queue[static_cast<size_t>(k)];
    rec.return_n += disc * p.reward;
    disc *= p.done ? 0.0 : gamma_;
    if (p.done) break;
  }
  rec.discount_n = disc;
  const int slot = static_cast<int>(record_count_ % capacity_);
  records_[static_cast<size_t>(slot)] = rec;
  tree_.set(slot, std::pow(max_priority_ + prio_eps_, omega_));
  record_count_ += 1;
}

void NStepReplay::push(int env, const Tensor& obs, int action, double reward, bool done) {
  if (obs.numel() != static_cast<int64_t>(obs_len_))
    throw std::invalid_argument("replay push: observation size mismatch");
  const int64_t id = obs_count_++;
  store_obs(obs, id);
  auto& queue = pending_[static_cast<size_t>(env)];
  queue.push_back({id, action, reward, done});
  if (done) {
    while (!queue.empty()) {
      emit(queue, id);
      queue.pop_front();
    }
    return;
  }
  if (static_cast<int>(queue.size()) == n_step_ + 1) {
    emit(queue, id);
    queue.pop_front();
  }
}

NStepReplay::Batch NStepReplay::sample(int batch_size, Rng& rng) {
  const int n = size();
  if (n < 1) throw std::logic_error("replay sample: buffer empty");
  const double total = tree_.total();
  NStepReplay::Batch batch;
  batch.obs = Tensor({batch_size, obs_c_, obs_h_, obs_w_});
  batch.next_obs = Tensor({batch_size, obs_c_, obs_h_, obs_w_});
  batch.ids.resize(static_cast<size_t>(batch_size));
  batch.action.resize(static_cast<size_t>(batch_size));
  batch.return_n.resize(static_cast<size_t>(batch_size));
  batch.discount_n.resize(static_cast<size_t>(batch_size));
  batch.weight.resize(static_cast<size_t>(batch_size));

  const double min_p = tree_.min_weight() / total;
  const double max_w = std::pow(static_cast<double>(n) * min_p, -beta_);
  const double segment = total / batch_size;
  for (int b = 0; b < batch_size; ++b) {
    const double mass = (b + rng.uniform()) * segment;
    const int slot = tree_.find_prefix(mass);
    const Record& rec = records_[static_cast<size_t>(slot)];
    batch.ids[static_cast<size_t>(b)] = rec.id;
    batch.action[static_cast<size_t>(b)] = rec.action;
    batch.return_n[static_cast<size_t>(b)] = rec.return_n;
    batch.discount_n[static_cast<size_t>(b)] = rec.discount_n;
    const double p = tree_.get(slot) / total;
    batch.weight[static_cast<size_t>(b)] =
        std::pow(static_cast<double>(n) * p, -beta_) / max_w;
    decode_obs(rec.obs_id, &batch.obs.data[static_cast<size_t>(b) * obs_len_]);
    decode_obs(rec.next_obs_id, &batch.next_obs.data[static_cast<size_t>(b) * obs_len_]);
  }
  return batch;
}

void NStepReplay::update_priorities(const std::vector<int64_t>& ids,
                                    const std::vector<double>& kl) {
  if (ids.size() != kl.size())
    throw std::invalid_argument("update_priorities: length mismatch");
  for (size_t i = 0; i < ids.size(); ++i) {
    const int slot = static_cast<int>(ids[i] % capacity_);
    if (records_[static_cast<size_t>(slot)].id != ids[i]) {
      stale_ += 1;
      continue;
    }
    const double raw = kl[i] + prio_eps_;
    max_priority_ = std::max(max_priority_, raw);
    tree_.set(slot, std::pow(raw, omega_));
  }
}

std::vector<double> q_from_log_probs(const Tensor& log_probs, const std::vector<double>& support) {
  const int B = log_probs.extent(0), A = log_probs.extent(1), Z = log_probs.extent(2);
  if (static_cast<int>(support.size()) != Z)
    throw std::invalid_argument("q_from_log_probs: support size mismatch");
  std::vector<double> q(static_cast<size_t>(B) * A, 0.0);
  for (int b = 0; b < B; ++b)
    for (int a = 0; a < A; ++a) {
      double acc = 0.0;
      const double* lp = &log_probs.data[(static_cast<size_t>(b) * A + a) * Z];
      for (int z = 0; z < Z; ++z) acc += support[static_cast<size_t>(z)] * std::exp(lp[z]);
      q[static_cast<size_t>(b) * A + a] = acc;
    }
  return q;
}

RainbowTargets build_targets(DistributionalNet& net, NetworkParams& online_params,
                             NetworkParams& target_params, const Tensor& next_obs,
                             const std::vector<double>& return_n,
                             const std::vector<double>& discount_n, const RainbowHyper& hyper,
                             Rng* noise_rng, const MixPlan* plan) {
  const int B = next_obs.extent(0);
  const int A = net.n_actions, Z = net.n_atoms;
  const std::vector<double> z = atom_support(Z, hyper.v_min, hyper.v_max);

  // Bootstrap action: greedy under the online network.
  Graph ga;
  const auto online_out = net.forward(ga, online_params, ga.leaf(next_obs), Mode::train, noise_rng);
  const std::vector<double> q = q_from_log_probs(ga.value(online_out.log_probs), z);
  std::vector<int> a_star(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int a = 1; a < A; ++a)
      if (q[static_cast<size_t>(b) * A + a] > q[static_cast<size_t>(b) * A + best]) best = a;
    a_star[static_cast<size_t>(b)] = best;
  }

  // Return distribution of that action: evaluated by the target network.
  Graph gt;
  const auto target_out = net.forward(gt, target_params, gt.leaf(next_obs), Mode::train, noise_rng);
  const Tensor& target_lp = gt.value(target_out.log_probs);

  auto target_probs = [&](int b, int a, double* out) {
    const double* lp = &target_lp.data[(static_cast<size_t>(b) * A + a) * Z];
    for (int zi = 0; zi < Z; ++zi) out[zi] = std::exp(lp[zi]);
  };

  RainbowTargets out;
  out.masses = Tensor({B, Z});
  out.bootstrap_action.resize(static_cast<size_t>(B));
  std::vector<double> mi(static_cast<size_t>(Z)), mj(static_cast<size_t>(Z)),
      mixed(static_cast<size_t>(Z));
  for (int b = 0; b < B; ++b) {
    double rn = return_n[static_cast<size_t>(b)];
    double disc = discount_n[static_cast<size_t>(b)];
    const double* masses = nullptr;
    if (plan) {
      const int j = plan->partner[static_cast<size_t>(b)];
      const int dom = plan->dominant(b);
      const double lam = plan->lambda[static_cast<size_t>(b)];
      const int a_tilde = a_star[static_cast<size_t>(dom)];
      out.bootstrap_action[static_cast<size_t>(b)] = a_tilde;
      target_probs(b, a_tilde, mi.data());
      target_probs(j, a_tilde, mj.data());
      for (int zi = 0; zi < Z; ++zi)
        mixed[static_cast<size_t>(zi)] =
            lam == 1.0   ? mi[static_cast<size_t>(zi)]
            : lam == 0.0 ? mj[static_cast<size_t>(zi)]
                         : lam * mi[static_cast<size_t>(zi)] +
                               (1.0 - lam) * mj[static_cast<size_t>(zi)];
      const double rj = return_n[static_cast<size_t>(j)];
      rn = lam == 1.0 ? rn : lam == 0.0 ? rj : lam * rn + (1.0 - lam) * rj;
      disc = discount_n[static_cast<size_t>(dom)];
      masses = mixed.data();
    } else {
      out.bootstrap_action[static_cast<size_t>(b)] = a_star[static_cast<size_t>(b)];
      target_probs(b, a_star[static_cast<size_t>(b)], mi.data());
      masses = mi.data();
    }
    project_distribution(rn, disc, masses, Z, hyper.v_min, hyper.v_max,
                         &out.masses.data[static_cast<size_t>(b) * Z]);
  }
  return out;
}

RainbowAgent::RainbowAgent(const ImpalaMiniConfig& net_cfg, const RainbowHyper& hyper,
                           int n_actions, int n_envs, Rng& init_rng)
    : hyper_(hyper),
      net_(DistributionalNet::make(net_cfg, n_actions, hyper.atoms, init_rng)),
      target_params_(net_.params.clone()),
      replay_(hyper, n_envs, net_cfg.obs_channels, net_cfg.obs_size, net_cfg.obs_size),
      support_(atom_support(hyper.atoms, hyper.v_min, hyper.v_max)) {}

std::vector<int> RainbowAgent::act(const Tensor& obs_batch, Mode mode, Rng* noise_rng) {
  Graph g;
  const auto out = net_.forward(g, g.leaf(obs_batch), mode, noise_rng);
  const std::vector<double> q = q_from_log_probs(g.value(out.log_probs), support_);
  const int B = obs_batch.extent(0), A = net_.n_actions;
  std::vector<int> actions(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    int best = 0;
    for (int a = 1; a < A; ++a)
      if (q[static_cast<size_t>(b) * A + a] > q[static_cast<size_t>(b) * A + best]) best = a;
    actions[static_cast<size_t>(b)] = best;
  }
  return actions;
}

RainbowDiag RainbowAgent::update(const AugmentSpec& augment, double l2_weight, Rng& replay_rng,
                                 Rng& mix_rng, Rng* noise_rng) {
  auto batch = replay_.sample(hyper_.batch_size, replay_rng);
  const int B = static_cast<int>(batch.ids.size());

  MixPlan plan;
  const bool mixing =
      augment.method == AugmentMethod::mixreg || augment.method == AugmentMethod::mixobs_only;
  if (mixing) plan = make_mix_plan(B, augment.mix_alpha, mix_rng, augment.force_lambda);

  Tensor obs;
  std::vector<int> actions;
  RainbowTargets targets;
  if (augment.method == AugmentMethod::mixreg) {
    targets = build_targets(net_, net_.params, target_params_, batch.next_obs, batch.return_n,
                            batch.discount_n, hyper_, noise_rng, &plan);
    obs = mix_observations(batch.obs, plan);
    actions = dominant_actions(batch.action, plan);
  } else if (augment.method == AugmentMethod::mixobs_only) {
    // Supervision comes verbatim from the dominant transition.
    std::vector<double> rn(static_cast<size_t>(B)), disc(static_cast<size_t>(B));
    std::vector<int64_t> dom_ids(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      const int dom = plan.dominant(b);
      rn[static_cast<size_t>(b)] = batch.return_n[static_cast<size_t>(dom)];
      disc[static_cast<size_t>(b)] = batch.discount_n[static_cast<size_t>(dom)];
    }
    Tensor next_obs = batch.next_obs;
    for (int b = 0; b < B; ++b) {
      const int dom = plan.dominant(b);
      if (dom != b)
        std::memcpy(&next_obs.data[static_cast<size_t>(b) * next_obs.numel() / B],
                    &batch.next_obs.data[static_cast<size_t>(dom) * next_obs.numel() / B],
                    static_cast<size_t>(next_obs.numel() / B) * sizeof(double));
    }
    targets = build_targets(net_, net_.params, target_params_, next_obs, rn, disc, hyper_,
                            noise_rng, nullptr);
    obs = mix_observations(batch.obs, plan);
    actions = dominant_actions(batch.action, plan);
  } else {
    targets = build_targets(net_, net_.params, target_params_, batch.next_obs, batch.return_n,
                            batch.discount_n, hyper_, noise_rng, nullptr);
    obs = batch.obs;
    actions = batch.action;
    apply_observation_augment(obs, augment, mix_rng);
  }

  Graph g;
  const auto out = net_.forward(g, g.leaf(obs), Mode::train, noise_rng);
  const int lp_a = g.gather_dist(out.log_probs, actions);
  const int ce = g.neg(g.sum_last(g.mul(g.leaf(targets.masses), lp_a)));  // [B]
  int loss = g.mean_all(g.mul(ce, g.leaf(Tensor::from({B}, batch.weight))));
  if (l2_weight > 0.0) loss = g.affine({loss, l2_penalty(g, net_.params, l2_weight)}, {1.0, 1.0});

  const double loss_value = g.value(loss).data[0];
  if (!std::isfinite(loss_value))
    throw std::runtime_error("rainbow update: non-finite loss");

  net_.params.zero_grad();
  g.backward(loss);
  RainbowDiag diag;
  diag.grad_norm = grad_norm(net_.params);
  adam_step(net_.params, {hyper_.lr, 0.9, 0.999, hyper_.adam_eps}, hyper_.grad_clip);

  // Per-sample KL = cross-entropy minus the target's entropy (the
  // entropy term is constant in theta, so only the values differ, not
  // the gradients). The mixed sample's divergence updates the priority
  // of the primary index; importance weights stay those of the primary
  // sample.
  const Tensor& per_sample = g.value(ce);
  const int Z = net_.n_atoms;
  std::vector<double> kl(static_cast<size_t>(B));
  for (int b = 0; b < B; ++b) {
    double h = 0.0;
    const double* m = &targets.masses.data[static_cast<size_t>(b) * Z];
    for (int zi = 0; zi < Z; ++zi)
      if (m[zi] > 0.0) h -= m[zi] * std::log(m[zi]);
    kl[static_cast<size_t>(b)] = std::max(0.0, per_sample.data[static_cast<size_t>(b)] - h);
  }
  replay_.update_priorities(batch.ids, kl);

  updates_ += 1;
  if (hyper_.target_period > 0 && updates_ % hyper_.target_period == 0)
    target_params_.copy_values_from(net_.params);

  diag.loss = loss_value;
  double kl_sum = 0.0, w = 0.0;
  for (int b = 0; b < B; ++b) {
    kl_sum += kl[static_cast<size_t>(b)];
    w += batch.weight[static_cast<size_t>(b)];
  }
  diag.mean_kl = kl_sum / B;
  diag.mean_weight = w / B;
  diag.gradient_steps = 1;
  return diag;
}

}  // namespace mixrl
