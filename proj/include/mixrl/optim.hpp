#pragma once

#include "mixrl/graph.hpp"
#include "mixrl/network.hpp"

namespace mixrl {

struct AdamHyper {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-5;
};

double grad_norm(const NetworkParams& params);

// Scales trainable gradients so the global l2 norm is at most max_norm
// (max_norm <= 0 disables). Returns the pre-clip norm.
double clip_grad_norm(NetworkParams& params, double max_norm);

// Bias-corrected Adam over trainable parameters, clipping first. A
// non-finite gradient aborts with the offending parameter's name.
void adam_step(NetworkParams& params, const AdamHyper& hyper, double grad_clip_norm);

// weight * sum of squared entries over weight matrices/kernels only
// (biases and batch-norm affine parameters excluded). Differentiable.
int l2_penalty(Graph& g, NetworkParams& params, double weight);

}  // namespace mixrl
