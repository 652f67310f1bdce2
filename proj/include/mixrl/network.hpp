#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixrl/graph.hpp"
#include "mixrl/rng.hpp"
#include "mixrl/tensor.hpp"

namespace mixrl {

enum class Mode { train, eval };

enum class LayerKind { conv, dense, noisy_dense, batch_norm, relu, max_pool, flatten, softmax };

struct LayerSpec {
  LayerKind kind;
  int in = 0, out = 0;       // channel/feature counts for conv/dense
  int kernel = 0, stride = 1, pad = 0;
  double sigma0 = 0.5;       // noisy-dense initial noise scale
  double gain = 1.0;         // orthogonal-init gain for conv/dense

  static LayerSpec conv2d(int in, int out, int kernel, int stride = 1, int pad = -1,
                          double gain = M_SQRT2) {
    return {LayerKind::conv, in, out, kernel, stride, pad < 0 ? kernel / 2 : pad, 0.5, gain};
  }
  static LayerSpec dense(int in, int out, double gain = M_SQRT2) {
    return {LayerKind::dense, in, out, 0, 1, 0, 0.5, gain};
  }
  static LayerSpec noisy_dense(int in, int out, double sigma0 = 0.5) {
    return {LayerKind::noisy_dense, in, out, 0, 1, 0, sigma0, 1.0};
  }
  static LayerSpec batch_norm() { return {LayerKind::batch_norm}; }
  static LayerSpec relu() { return {LayerKind::relu}; }
  static LayerSpec max_pool() { return {LayerKind::max_pool}; }
  static LayerSpec flatten() { return {LayerKind::flatten}; }
  static LayerSpec softmax() { return {LayerKind::softmax}; }
};

struct Param {
  Tensor value;           // gradient buffer always allocated
  Tensor m, v;            // Adam moments, same shape as value
  bool trainable = true;
  bool is_weight = false; // participates in the l2 penalty
};

// Ordered, named parameter collection shared by one or more layer stacks.
class NetworkParams {
 public:
  Param& create(const std::string& name, Tensor init, bool trainable = true,
                bool is_weight = false);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Param>>& items() { return items_; }
  const std::vector<std::pair<std::string, Param>>& items() const { return items_; }

  void zero_grad();
  NetworkParams clone() const;
  void copy_values_from(const NetworkParams& other);  // same structure required

  int64_t adam_steps = 0;

 private:
  std::vector<std::pair<std::string, Param>> items_;
  std::unordered_map<std::string, size_t> index_;
};

Tensor orthogonal_init(std::vector<int> shape, double gain, Rng& rng);

// Materializes the stack's parameters under `prefix.<i>.<field>`; returns
// the output shape for the given input shape (batch extent included).
std::vector<int> build_stack(NetworkParams& params, const std::string& prefix,
                             const std::vector<LayerSpec>& specs, std::vector<int> in_shape,
                             Rng& init_rng);

// Runs the stack on the tape. Train mode uses batch statistics and fresh
// factorized noise; eval mode uses running statistics and zero noise.
int apply_stack(Graph& g, NetworkParams& params, const std::string& prefix,
                const std::vector<LayerSpec>& specs, int input, Mode mode, Rng* noise_rng);

struct ImpalaMiniConfig {
  int obs_channels = 3;
  int obs_size = 32;
  int width_mult = 1;       // scales conv channels only
  bool batch_norm = false;
  bool noisy = false;       // noisy trunk dense layer (value-based agent)
  double sigma0 = 0.5;
};

std::vector<LayerSpec> impala_mini_trunk(const ImpalaMiniConfig& cfg);

// Policy-gradient agent: shared trunk, categorical policy head, value head.
class PolicyValueNet {
 public:
  static PolicyValueNet make(const ImpalaMiniConfig& cfg, int n_actions, Rng& init_rng);

  struct Out {
    int logits;  // [B, A]
    int value;   // [B]
    int latent;  // [B, hidden]
  };
  Out forward(Graph& g, int obs, Mode mode, Rng* noise_rng = nullptr);

  NetworkParams params;
  std::vector<LayerSpec> trunk, policy_head, value_head;
  int n_actions = 0;
};

// Value-based agent: dueling distributional head over a fixed atom support.
class DistributionalNet {
 public:
  static DistributionalNet make(const ImpalaMiniConfig& cfg, int n_actions, int n_atoms,
                                Rng& init_rng);

  struct Out {
    int log_probs;  // [B, A, Z]
    int latent;     // [B, hidden]
  };
  Out forward(Graph& g, int obs, Mode mode, Rng* noise_rng = nullptr) {
    return forward(g, params, obs, mode, noise_rng);
  }
  // Runs the same stacks over a structurally identical parameter set
  // (e.g. the target copy).
  Out forward(Graph& g, NetworkParams& with_params, int obs, Mode mode,
              Rng* noise_rng = nullptr);

  NetworkParams params;
  std::vector<LayerSpec> trunk, value_stream, adv_stream;
  int n_actions = 0, n_atoms = 0;
};

// Binary parameter container: magic, version, count, then per tensor
// name length, name bytes, rank, extents, little-endian f64 payload.
void save_checkpoint(const NetworkParams& params, const std::filesystem::path& path);
void load_checkpoint(NetworkParams& params, const std::filesystem::path& path);

}  // namespace mixrl
