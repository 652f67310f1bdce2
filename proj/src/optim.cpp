#include "mixrl/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mixrl {

double grad_norm(const NetworkParams& params) {
  double total = 0.0;
  for (const auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    for (double g : p.value.grad) total += g * g;
  }
  return std::sqrt(total);
}

double clip_grad_norm(NetworkParams& params, double max_norm) {
  const double norm = grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, p] : params.items()) {
      if (!p.trainable) continue;
      for (double& g : p.value.grad) g *= scale;
    }
  }
  return norm;
}

void adam_step(NetworkParams& params, const AdamHyper& hyper, double grad_clip_norm) {
  for (const auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    for (double g : p.value.grad)
      if (!std::isfinite(g))
        throw std::runtime_error("non-finite gradient in parameter " + name);
  }
  clip_grad_norm(params, grad_clip_norm);

  params.adam_steps += 1;
  const double t = static_cast<double>(params.adam_steps);
  const double bc1 = 1.0 - std::pow(hyper.beta1, t);
  const double bc2 = 1.0 - std::pow(hyper.beta2, t);
  for (auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    for (size_t i = 0; i < p.value.data.size(); ++i) {
      const double g = p.value.grad[i];
      p.m.data[i] = hyper.beta1 * p.m.data[i] + (1.0 - hyper.beta1) * g;
      p.v.data[i] = hyper.beta2 * p.v.data[i] + (1.0 - hyper.beta2) * g * g;
      const double mhat = p.m.data[i] / bc1;
      const double vhat = p.v.data[i] / bc2;
      p.value.data[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

int l2_penalty(Graph& g, NetworkParams& params, double weight) {
  if (weight < 0.0) throw std::invalid_argument("l2 weight must be nonnegative");
  if (weight == 0.0) return g.leaf(Tensor::scalar(0.0));
  int acc = -1;
  for (auto& [name, p] : params.items()) {
    if (!p.trainable || !p.is_weight) continue;
    const int term = g.sum_all(g.square(g.param(p.value)));
    acc = acc < 0 ? term : g.affine({acc, term}, {1.0, 1.0});
  }
  if (acc < 0) return g.leaf(Tensor::scalar(0.0));
  return g.affine({acc}, {weight});
}

}  // namespace mixrl
