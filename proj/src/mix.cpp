#include "mixrl/mix.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "mixrl/network.hpp"

namespace mixrl {

AugmentMethod augment_from_string(const std::string& name) {
  if (name == "none") return AugmentMethod::none;
  if (name == "mixreg") return AugmentMethod::mixreg;
  if (name == "mixobs-only") return AugmentMethod::mixobs_only;
  if (name == "cutout-color") return AugmentMethod::cutout_color;
  if (name == "random-crop") return AugmentMethod::random_crop;
  if (name == "random-conv") return AugmentMethod::random_conv;
  throw std::invalid_argument("unknown augmentation method: " + name);
}

std::string to_string(AugmentMethod method) {
  switch (method) {
    case AugmentMethod::none: return "none";
    case AugmentMethod::mixreg: return "mixreg";
    case AugmentMethod::mixobs_only: return "mixobs-only";
    case AugmentMethod::cutout_color: return "cutout-color";
    case AugmentMethod::random_crop: return "random-crop";
    case AugmentMethod::random_conv: return "random-conv";
  }
  return "none";
}

MixCoefficient sample_lambda(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw std::invalid_argument("mix_alpha must be positive");
  return {rng.beta(alpha, alpha), alpha};
}

MixPlan make_mix_plan(int batch_size, double alpha, Rng& rng,
                      std::optional<double> force_lambda) {
  if (batch_size < 2) throw std::invalid_argument("mixing needs a batch of at least 2");
  MixPlan plan;
  plan.partner.resize(static_cast<size_t>(batch_size));
  plan.lambda.resize(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    plan.lambda[static_cast<size_t>(i)] =
        force_lambda ? *force_lambda : sample_lambda(alpha, rng).lambda;
    plan.partner[static_cast<size_t>(i)] = rng.uniform_int(batch_size);
  }
  return plan;
}

namespace {
inline double interpolate(double lambda, double yi, double yj) {
  if (lambda == 1.0) return yi;
  if (lambda == 0.0) return yj;
  return lambda * yi + (1.0 - lambda) * yj;
}
}  // namespace

Tensor mix_observations(const Tensor& obs, const MixPlan& plan) {
  if (obs.rank() < 2 || obs.extent(0) != plan.size())
    throw std::invalid_argument("mix_observations: batch extent does not match plan");
  const int64_t row = obs.numel() / obs.extent(0);
  Tensor out(obs.shape);
  for (int i = 0; i < plan.size(); ++i) {
    const double lam = plan.lambda[static_cast<size_t>(i)];
    const double* yi = &obs.data[static_cast<size_t>(i) * row];
    const double* yj = &obs.data[static_cast<size_t>(plan.partner[static_cast<size_t>(i)]) * row];
    double* o = &out.data[static_cast<size_t>(i) * row];
    if (lam == 1.0) {
      std::memcpy(o, yi, static_cast<size_t>(row) * sizeof(double));
    } else if (lam == 0.0) {
      std::memcpy(o, yj, static_cast<size_t>(row) * sizeof(double));
    } else {
      for (int64_t k = 0; k < row; ++k) o[k] = lam * yi[k] + (1.0 - lam) * yj[k];
    }
  }
  return out;
}

std::vector<double> mix_scalars(const std::vector<double>& y, const MixPlan& plan) {
  if (static_cast<int>(y.size()) != plan.size())
    throw std::invalid_argument("mix_scalars: length does not match plan");
  std::vector<double> out(y.size());
  for (int i = 0; i < plan.size(); ++i)
    out[static_cast<size_t>(i)] =
        interpolate(plan.lambda[static_cast<size_t>(i)], y[static_cast<size_t>(i)],
                    y[static_cast<size_t>(plan.partner[static_cast<size_t>(i)])]);
  return out;
}

std::vector<double> mix_rows(const std::vector<double>& rows, int dim, const MixPlan& plan) {
  if (static_cast<int>(rows.size()) != plan.size() * dim)
    throw std::invalid_argument("mix_rows: length does not match plan");
  std::vector<double> out(rows.size());
  for (int i = 0; i < plan.size(); ++i) {
    const double lam = plan.lambda[static_cast<size_t>(i)];
    const double* yi = &rows[static_cast<size_t>(i) * dim];
    const double* yj = &rows[static_cast<size_t>(plan.partner[static_cast<size_t>(i)]) * dim];
    double* o = &out[static_cast<size_t>(i) * dim];
    for (int k = 0; k < dim; ++k) o[k] = interpolate(lam, yi[k], yj[k]);
  }
  return out;
}

std::vector<int> dominant_actions(const std::vector<int>& actions, const MixPlan& plan) {
  if (static_cast<int>(actions.size()) != plan.size())
    throw std::invalid_argument("dominant_actions: length does not match plan");
  std::vector<int> out(actions.size());
  for (int i = 0; i < plan.size(); ++i)
    out[static_cast<size_t>(i)] = actions[static_cast<size_t>(plan.dominant(i))];
  return out;
}

MixedBatch mix_batch(const Tensor& obs, const std::vector<int>& actions,
                     const std::map<std::string, std::vector<double>>& attachments, double alpha,
                     Rng& rng, std::optional<double> force_lambda) {
  MixedBatch out;
  out.plan = make_mix_plan(obs.extent(0), alpha, rng, force_lambda);
  out.obs = mix_observations(obs, out.plan);
  out.action = dominant_actions(actions, out.plan);
  for (const auto& [name, y] : attachments) out.scalars[name] = mix_scalars(y, out.plan);
  return out;
}

MixedBatch mix_obs_only(const Tensor& obs, const std::vector<int>& actions,
                        const std::map<std::string, std::vector<double>>& attachments,
                        double alpha, Rng& rng, std::optional<double> force_lambda) {
  MixedBatch out;
  out.plan = make_mix_plan(obs.extent(0), alpha, rng, force_lambda);
  out.obs = mix_observations(obs, out.plan);
  out.action = dominant_actions(actions, out.plan);
  for (const auto& [name, y] : attachments) {
    std::vector<double> kept(y.size());
    for (int i = 0; i < out.plan.size(); ++i)
      kept[static_cast<size_t>(i)] = y[static_cast<size_t>(out.plan.dominant(i))];
    out.scalars[name] = std::move(kept);
  }
  return out;
}

void cutout_color(Tensor& obs, const AugmentSpec& spec, Rng& rng) {
  const int B = obs.extent(0), C = obs.extent(1), H = obs.extent(2), W = obs.extent(3);
  const int max_h = std::max(spec.cutout_min, H / 2);
  const int max_w = std::max(spec.cutout_min, W / 2);
  for (int b = 0; b < B; ++b) {
    const int h = spec.cutout_min + rng.uniform_int(max_h - spec.cutout_min + 1);
    const int w = spec.cutout_min + rng.uniform_int(max_w - spec.cutout_min + 1);
    const int y0 = rng.uniform_int(H - h + 1);
    const int x0 = rng.uniform_int(W - w + 1);
    for (int c = 0; c < C; ++c) {
      const double color = rng.uniform();
      double* plane = &obs.data[(static_cast<size_t>(b) * C + c) * H * W];
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) plane[y * W + x] = color;
    }
  }
}

namespace {

// Bilinear sample with half-pixel centers, clamped at the border.
double bilinear(const double* plane, int H, int W, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(H - 1));
  x = std::clamp(x, 0.0, static_cast<double>(W - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  const double fy = y - y0, fx = x - x0;
  return plane[y0 * W + x0] * (1 - fy) * (1 - fx) + plane[y0 * W + x1] * (1 - fy) * fx +
         plane[y1 * W + x0] * fy * (1 - fx) + plane[y1 * W + x1] * fy * fx;
}

}  // namespace

void random_crop(Tensor& obs, const AugmentSpec& spec, Rng& rng) {
  const int B = obs.extent(0), C = obs.extent(1), H = obs.extent(2), W = obs.extent(3);
  const int H2 = static_cast<int>(std::lround(spec.crop_scale * H));
  const int W2 = static_cast<int>(std::lround(spec.crop_scale * W));
  std::vector<double> up(static_cast<size_t>(H2) * W2);
  for (int b = 0; b < B; ++b) {
    const int y0 = rng.uniform_int(H2 - H + 1);
    const int x0 = rng.uniform_int(W2 - W + 1);
    for (int c = 0; c < C; ++c) {
      double* plane = &obs.data[(static_cast<size_t>(b) * C + c) * H * W];
      for (int y = 0; y < H2; ++y)
        for (int x = 0; x < W2; ++x) {
          const double sy = (y + 0.5) * H / H2 - 0.5;
          const double sx = (x + 0.5) * W / W2 - 0.5;
          up[static_cast<size_t>(y) * W2 + x] = bilinear(plane, H, W, sy, sx);
        }
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
          plane[y * W + x] = up[static_cast<size_t>(y0 + y) * W2 + (x0 + x)];
    }
  }
}

void random_conv(Tensor& obs, const AugmentSpec& spec, Rng& rng) {
  const int C = obs.extent(1);
  conv_rescale(obs, orthogonal_init({C, C, spec.conv_kernel, spec.conv_kernel}, 1.0, rng));
}

void conv_rescale(Tensor& obs, const Tensor& kernel) {
  const int B = obs.extent(0), C = obs.extent(1), H = obs.extent(2), W = obs.extent(3);
  const int K = kernel.extent(2);
  const int pad = K / 2;
  std::vector<double> out(static_cast<size_t>(C) * H * W);
  for (int b = 0; b < B; ++b) {
    double* img = &obs.data[static_cast<size_t>(b) * C * H * W];
    for (int f = 0; f < C; ++f)
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          double acc = 0.0;
          for (int c = 0; c < C; ++c)
            for (int ki = 0; ki < K; ++ki) {
              const int iy = y - pad + ki;
              if (iy < 0 || iy >= H) continue;
              for (int kj = 0; kj < K; ++kj) {
                const int ix = x - pad + kj;
                if (ix < 0 || ix >= W) continue;
                acc += kernel.data[((static_cast<size_t>(f) * C + c) * K + ki) * K + kj] *
                       img[(static_cast<size_t>(c) * H + iy) * W + ix];
              }
            }
          out[(static_cast<size_t>(f) * H + y) * W + x] = acc;
        }
    double lo = out[0], hi = out[0];
    for (double v : out) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double range = hi - lo;
    if (range < 1e-12) {
      std::fill(img, img + static_cast<size_t>(C) * H * W, 0.5);
    } else {
      for (size_t i = 0; i < out.size(); ++i) img[i] = (out[i] - lo) / range;
    }
  }
}

void apply_observation_augment(Tensor& obs, const AugmentSpec& spec, Rng& rng) {
  switch (spec.method) {
    case AugmentMethod::cutout_color: cutout_color(obs, spec, rng); break;
    case AugmentMethod::random_crop: random_crop(obs, spec, rng); break;
    case AugmentMethod::random_conv: random_conv(obs, spec, rng); break;
    default: break;
  }
}

}  // namespace mixrl
