#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mixrl/rng.hpp"
#include "mixrl/tensor.hpp"

namespace mixrl {

// Maps a batch of observations [N, C, H, W] to latent rows [N, D].
using EmbedFn = std::function<Tensor(const Tensor& obs_batch)>;
// Maps a batch of observations to one value prediction per row.
using ValueFn = std::function<std::vector<double>(const Tensor& obs_batch)>;

struct LipschitzReport {
  std::vector<double> ratios;  // finite, zero-distance pairs excluded
  double max = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, min = 0.0;
  int64_t pairs_sampled = 0;
  int64_t zero_distance_excluded = 0;
};

// Ratio ||f(s_i)-f(s_j)|| / ||s_i-s_j|| over uniformly sampled pairs
// (with replacement); the maximum estimates the Lipschitz constant of
// the latent representation.
LipschitzReport empirical_lipschitz(const EmbedFn& embed, const Tensor& corpus, int n_pairs,
                                    Rng& rng);

struct ValueSurface {
  int resolution = 0;
  std::vector<std::array<double, 3>> weights;  // barycentric coordinates
  std::vector<double> values;
};

// Value predictions over the convex hull of three anchor observations,
// on the triangular grid of barycentric multiples of 1/resolution.
ValueSurface value_surface(const ValueFn& value_fn, const Tensor& anchor_a,
                           const Tensor& anchor_b, const Tensor& anchor_c, int resolution);

struct GameScore {
  std::string game;
  double train_return = 0.0, test_return = 0.0;
  double r_rand = 0.0, r_max = 0.0;
  double train_norm = 0.0, test_norm = 0.0;
};

struct ScoreSummary {
  std::vector<GameScore> games;
  double mean_train_norm = 0.0, mean_test_norm = 0.0;
  double gap_raw = 0.0, gap_norm = 0.0;  // train minus test
};

// (R - R_rand) / (R_max - R_rand) per game, clamped to [0, 1], averaged
// with equal weights.
ScoreSummary normalized_scores(std::vector<GameScore> games);

// Mean nearest-neighbor distance from each transformed batch to the
// original batch; reported, not asserted.
struct DiversityRow {
  std::string method;
  double mean_nn_distance = 0.0;
};
std::vector<DiversityRow> mixing_diversity_table(const Tensor& obs_batch, double alpha, Rng& rng);

void write_lipschitz_csv(const LipschitzReport& report, const std::filesystem::path& path);
void write_surface_csv(const ValueSurface& surface, const std::filesystem::path& path);
void write_surface_svg(const ValueSurface& surface, const std::filesystem::path& path);
void write_scores_csv(const ScoreSummary& summary, const std::filesystem::path& path);
void write_diversity_csv(const std::vector<DiversityRow>& rows, const std::filesystem::path& path);

}  // namespace mixrl
