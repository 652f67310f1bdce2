#include "mixrl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "mixrl/mix.hpp"
#include "mixrl/svg.hpp"

namespace mixrl {

namespace svg {

std::string heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  // dark blue -> cyan -> yellow -> red
  const double r = std::clamp(1.5 * t - 0.25, 0.0, 1.0);
  const double g = std::clamp(1.6 - std::fabs(2.2 * t - 1.1), 0.0, 1.0);
  const double b = std::clamp(1.1 - 1.6 * t, 0.0, 1.0);
  char buf[8];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", static_cast<int>(r * 255),
                static_cast<int>(g * 255), static_cast<int>(b * 255));
  return buf;
}

std::string series_color(size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                 "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
  return colors[i % (sizeof(colors) / sizeof(colors[0]))];
}

}  // namespace svg

LipschitzReport empirical_lipschitz(const EmbedFn& embed, const Tensor& corpus, int n_pairs,
                                    Rng& rng) {
  const int N = corpus.extent(0);
  if (N < 2) throw std::invalid_argument("empirical_lipschitz: corpus needs at least 2 entries");
  if (n_pairs < 1) throw std::invalid_argument("empirical_lipschitz: n_pairs must be positive");

  const Tensor latents = embed(corpus);
  if (latents.extent(0) != N)
    throw std::invalid_argument("empirical_lipschitz: embedding row count mismatch");
  const int64_t obs_dim = corpus.numel() / N;
  const int64_t lat_dim = latents.numel() / N;

  LipschitzReport report;
  report.pairs_sampled = n_pairs;
  report.ratios.reserve(static_cast<size_t>(n_pairs));
  for (int p = 0; p < n_pairs; ++p) {
    const int i = rng.uniform_int(N);
    const int j = rng.uniform_int(N);
    double ds = 0.0;
    const double* si = &corpus.data[static_cast<size_t>(i) * obs_dim];
    const double* sj = &corpus.data[static_cast<size_t>(j) * obs_dim];
    for (int64_t k = 0; k < obs_dim; ++k) ds += (si[k] - sj[k]) * (si[k] - sj[k]);
    if (ds == 0.0) {
      report.zero_distance_excluded += 1;
      continue;
    }
    double df = 0.0;
    const double* fi = &latents.data[static_cast<size_t>(i) * lat_dim];
    const double* fj = &latents.data[static_cast<size_t>(j) * lat_dim];
    for (int64_t k = 0; k < lat_dim; ++k) df += (fi[k] - fj[k]) * (fi[k] - fj[k]);
    report.ratios.push_back(std::sqrt(df) / std::sqrt(ds));
  }
  if (report.ratios.empty())
    throw std::runtime_error("empirical_lipschitz: every sampled pair had zero distance");

  std::vector<double> sorted = report.ratios;
  std::sort(sorted.begin(), sorted.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const size_t lo = static_cast<size_t>(pos);
    const size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
  };
  report.min = sorted.front();
  report.max = sorted.back();
  report.q1 = quantile(0.25);
  report.median = quantile(0.5);
  report.q3 = quantile(0.75);
  return report;
}

ValueSurface value_surface(const ValueFn& value_fn, const Tensor& anchor_a,
                           const Tensor& anchor_b, const Tensor& anchor_c, int resolution) {
  if (resolution < 2) throw std::invalid_argument("value_surface: resolution must be >= 2");
  if (!anchor_a.same_shape(anchor_b) || !anchor_a.same_shape(anchor_c))
    throw std::invalid_argument("value_surface: anchors must share one shape");

  ValueSurface surface;
  surface.resolution = resolution;
  for (int i = 0; i <= resolution; ++i)
    for (int j = 0; j + i <= resolution; ++j) {
      const double u = static_cast<double>(i) / resolution;
      const double v = static_cast<double>(j) / resolution;
      surface.weights.push_back({u, v, 1.0 - u - v});
    }

  const int n = static_cast<int>(surface.weights.size());
  std::vector<int> batch_shape{n};
  for (int d = 0; d < anchor_a.rank(); ++d) batch_shape.push_back(anchor_a.extent(d));
  Tensor batch(batch_shape);
  const int64_t row = anchor_a.numel();
  for (int p = 0; p < n; ++p) {
    const auto [u, v, w] = surface.weights[static_cast<size_t>(p)];
    double* o = &batch.data[static_cast<size_t>(p) * row];
    for (int64_t k = 0; k < row; ++k)
      o[k] = u * anchor_a.data[static_cast<size_t>(k)] + v * anchor_b.data[static_cast<size_t>(k)] +
             w * anchor_c.data[static_cast<size_t>(k)];
  }
  surface.values = value_fn(batch);
  if (static_cast<int>(surface.values.size()) != n)
    throw std::invalid_argument("value_surface: value function returned wrong row count");
  return surface;
}

ScoreSummary normalized_scores(std::vector<GameScore> games) {
  if (games.empty()) throw std::invalid_argument("normalized_scores: no games");
  ScoreSummary s;
  double train_raw = 0.0, test_raw = 0.0;
  for (GameScore& g : games) {
    if (!(g.r_max > g.r_rand))
      throw std::invalid_argument("normalized_scores: R_max must exceed R_rand for " + g.game);
    const double denom = g.r_max - g.r_rand;
    g.train_norm = std::clamp((g.train_return - g.r_rand) / denom, 0.0, 1.0);
    g.test_norm = std::clamp((g.test_return - g.r_rand) / denom, 0.0, 1.0);
    s.mean_train_norm += g.train_norm;
    s.mean_test_norm += g.test_norm;
    train_raw += g.train_return;
    test_raw += g.test_return;
  }
  const double n = static_cast<double>(games.size());
  s.mean_train_norm /= n;
  s.mean_test_norm /= n;
  s.gap_raw = (train_raw - test_raw) / n;
  s.gap_norm = s.mean_train_norm - s.mean_test_norm;
  s.games = std::move(games);
  return s;
}

namespace {
double mean_nn_distance(const Tensor& transformed, const Tensor& original) {
  const int N = transformed.extent(0);
  const int64_t row = transformed.numel() / N;
  double total = 0.0;
  for (int i = 0; i < N; ++i) {
    double best = std::numeric_limits<double>::infinity();
    const double* ti = &transformed.data[static_cast<size_t>(i) * row];
    for (int j = 0; j < N; ++j) {
      const double* oj = &original.data[static_cast<size_t>(j) * row];
      double d = 0.0;
      for (int64_t k = 0; k < row; ++k) d += (ti[k] - oj[k]) * (ti[k] - oj[k]);
      best = std::min(best, d);
    }
    total += std::sqrt(best);
  }
  return total / N;
}
}  // namespace

std::vector<DiversityRow> mixing_diversity_table(const Tensor& obs_batch, double alpha,
                                                 Rng& rng) {
  std::vector<DiversityRow> rows;
  {
    const MixPlan plan = make_mix_plan(obs_batch.extent(0), alpha, rng);
    rows.push_back({"mixreg", mean_nn_distance(mix_observations(obs_batch, plan), obs_batch)});
  }
  {
    Tensor t = obs_batch;
    AugmentSpec spec;
    cutout_color(t, spec, rng);
    rows.push_back({"cutout-color", mean_nn_distance(t, obs_batch)});
  }
  {
    Tensor t = obs_batch;
    AugmentSpec spec;
    random_crop(t, spec, rng);
    rows.push_back({"random-crop", mean_nn_distance(t, obs_batch)});
  }
  {
    Tensor t = obs_batch;
    AugmentSpec spec;
    random_conv(t, spec, rng);
    rows.push_back({"random-conv", mean_nn_distance(t, obs_batch)});
  }
  return rows;
}

void write_lipschitz_csv(const LipschitzReport& report, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << "statistic,value\n";
  f << "pairs_sampled," << report.pairs_sampled << "\n";
  f << "zero_distance_excluded," << report.zero_distance_excluded << "\n";
  f << "min," << report.min << "\n";
  f << "q1," << report.q1 << "\n";
  f << "median," << report.median << "\n";
  f << "q3," << report.q3 << "\n";
  f << "max," << report.max << "\n";
}

void write_surface_csv(const ValueSurface& surface, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << "u,v,w,value\n";
  for (size_t i = 0; i < surface.values.size(); ++i) {
    const auto& w = surface.weights[i];
    f << w[0] << "," << w[1] << "," << w[2] << "," << surface.values[i] << "\n";
  }
}

void write_surface_svg(const ValueSurface& surface, const std::filesystem::path& path) {
  const double W = 480, H = 440, margin = 40;
  svg::Doc doc(W, H);
  double lo = surface.values[0], hi = surface.values[0];
  for (double v : surface.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double range = hi - lo > 1e-12 ? hi - lo : 1.0;
  const double side = W - 2 * margin;
  // barycentric (u, v, w) on an equilateral triangle
  auto to_xy = [&](double u, double v) {
    const double x = margin + side * (v + 0.5 * u);
    const double y = H - margin - side * 0.866 * u;
    return std::array<double, 2>{x, y};
  };
  const double r = side / (2.2 * surface.resolution);
  for (size_t i = 0; i < surface.values.size(); ++i) {
    const auto& w = surface.weights[i];
    const auto xy = to_xy(w[0], w[1]);
    doc.circle(xy[0], xy[1], r, svg::heat_color((surface.values[i] - lo) / range));
  }
  doc.text(margin, H - 12, "low=" + std::to_string(lo) + " high=" + std::to_string(hi), 12);
  doc.save(path);
}

void write_scores_csv(const ScoreSummary& summary, const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << "game,train_return,test_return,r_rand,r_max,train_norm,test_norm\n";
  for (const auto& g : summary.games)
    f << g.game << "," << g.train_return << "," << g.test_return << "," << g.r_rand << ","
      << g.r_max << "," << g.train_norm << "," << g.test_norm << "\n";
  f << "mean,,,," << "," << summary.mean_train_norm << "," << summary.mean_test_norm << "\n";
  f << "gap_raw," << summary.gap_raw << ",,,,,\n";
  f << "gap_norm," << summary.gap_norm << ",,,,,\n";
}

void write_diversity_csv(const std::vector<DiversityRow>& rows,
                         const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << "method,mean_nn_distance\n";
  for (const auto& r : rows) f << r.method << "," << r.mean_nn_distance << "\n";
}

}  // namespace mixrl
