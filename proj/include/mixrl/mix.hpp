#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mixrl/rng.hpp"
#include "mixrl/tensor.hpp"

namespace mixrl {

enum class AugmentMethod { none, mixreg, mixobs_only, cutout_color, random_crop, random_conv };

AugmentMethod augment_from_string(const std::string& name);
std::string to_string(AugmentMethod method);

struct AugmentSpec {
  AugmentMethod method = AugmentMethod::none;
  double mix_alpha = 0.2;
  std::optional<double> force_lambda;  // pins every drawn coefficient (tests, endpoint checks)
  int cutout_min = 2;                  // rectangle side range [cutout_min, H/2]
  double crop_scale = 75.0 / 64.0;     // upscale factor before re-cropping
  int conv_kernel = 3;
};

struct MixCoefficient {
  double lambda = 1.0;
  double alpha = 0.2;
};

// Beta(alpha, alpha) via two Gamma draws.
MixCoefficient sample_lambda(double alpha, Rng& rng);

// Per-element pairing: partner drawn uniformly over the batch (self
// allowed), fresh coefficient per element.
struct MixPlan {
  std::vector<int> partner;
  std::vector<double> lambda;
  int size() const { return static_cast<int>(partner.size()); }
  int dominant(int i) const { return lambda[static_cast<size_t>(i)] >= 0.5 ? i : partner[static_cast<size_t>(i)]; }
};

MixPlan make_mix_plan(int batch_size, double alpha, Rng& rng,
                      std::optional<double> force_lambda = std::nullopt);

// y_tilde = lambda * y_i + (1 - lambda) * y_j, elementwise over rows.
Tensor mix_observations(const Tensor& obs, const MixPlan& plan);
std::vector<double> mix_scalars(const std::vector<double>& y, const MixPlan& plan);
std::vector<double> mix_rows(const std::vector<double>& rows, int dim, const MixPlan& plan);
std::vector<int> dominant_actions(const std::vector<int>& actions, const MixPlan& plan);

// Convexly combined batch: observations and every supervision attachment
// interpolated with the same per-element coefficient; the discrete action
// follows the dominant side (lambda >= 0.5 keeps i).
struct MixedBatch {
  Tensor obs;
  MixPlan plan;
  std::vector<int> action;
  std::map<std::string, std::vector<double>> scalars;
};

MixedBatch mix_batch(const Tensor& obs, const std::vector<int>& actions,
                     const std::map<std::string, std::vector<double>>& attachments, double alpha,
                     Rng& rng, std::optional<double> force_lambda = std::nullopt);

// Observations mixed, supervision and action taken verbatim from the
// dominant transition.
MixedBatch mix_obs_only(const Tensor& obs, const std::vector<int>& actions,
                        const std::map<std::string, std::vector<double>>& attachments,
                        double alpha, Rng& rng,
                        std::optional<double> force_lambda = std::nullopt);

// Local perturbation baselines; obs is a [B,C,H,W] batch, modified in
// place. random_conv draws one fresh kernel per call.
void cutout_color(Tensor& obs, const AugmentSpec& spec, Rng& rng);
void random_crop(Tensor& obs, const AugmentSpec& spec, Rng& rng);
void random_conv(Tensor& obs, const AugmentSpec& spec, Rng& rng);

// Same-padded convolution with the given [C,C,K,K] kernel followed by a
// per-image min-max rescale to [0, 1].
void conv_rescale(Tensor& obs, const Tensor& kernel);

void apply_observation_augment(Tensor& obs, const AugmentSpec& spec, Rng& rng);

}  // namespace mixrl
