#include "mixrl/network.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mixrl {

Param& NetworkParams::create(const std::string& name, Tensor init, bool trainable,
                             bool is_weight) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  Param p;
  p.value = std::move(init);
  p.value.alloc_grad();
  p.m = Tensor(p.value.shape);
  p.v = Tensor(p.value.shape);
  p.trainable = trainable;
  p.is_weight = is_weight;
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(p));
  return items_.back().second;
}

Param& NetworkParams::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].second;
}

const Param& NetworkParams::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return items_[it->second].second;
}

void NetworkParams::zero_grad() {
  for (auto& [name, p] : items_) p.value.zero_grad();
}

NetworkParams NetworkParams::clone() const {
  NetworkParams out;
  out.items_ = items_;
  out.index_ = index_;
  out.adam_steps = adam_steps;
  return out;
}

void NetworkParams::copy_values_from(const NetworkParams& other) {
  if (other.items_.size() != items_.size())
    throw std::invalid_argument("copy_values_from: parameter structure mismatch");
  for (size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].first != other.items_[i].first ||
        !items_[i].second.value.same_shape(other.items_[i].second.value))
      throw std::invalid_argument("copy_values_from: parameter structure mismatch at " +
                                  items_[i].first);
    items_[i].second.value.data = other.items_[i].second.value.data;
  }
}

Tensor orthogonal_init(std::vector<int> shape, double gain, Rng& rng) {
  const int64_t total = shape_numel(shape);
  const int rows = shape.at(0);
  const int cols = static_cast<int>(total / rows);
  const int m = std::min(rows, cols);

  // Gaussian fill, then modified Gram-Schmidt over the shorter axis.
  std::vector<std::vector<double>> vecs(static_cast<size_t>(m),
                                        std::vector<double>(static_cast<size_t>(std::max(rows, cols))));
  const int veclen = std::max(rows, cols);
  for (auto& v : vecs)
    for (auto& x : v) x = rng.normal();
  for (int pass = 0; pass < 2; ++pass) {
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < i; ++j) {
        double dot = 0.0;
        for (int k = 0; k < veclen; ++k) dot += vecs[i][k] * vecs[j][k];
        for (int k = 0; k < veclen; ++k) vecs[i][k] -= dot * vecs[j][k];
      }
      double norm = 0.0;
      for (int k = 0; k < veclen; ++k) norm += vecs[i][k] * vecs[i][k];
      norm = std::sqrt(norm);
      if (norm < 1e-12) {
        for (int k = 0; k < veclen; ++k) vecs[i][k] = rng.normal();
        --i;
        continue;
      }
      for (int k = 0; k < veclen; ++k) vecs[i][k] /= norm;
    }
  }

  Tensor t(shape);
  // rows <= cols: rows are the orthonormal vectors; otherwise columns.
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      t.data[static_cast<size_t>(r) * cols + c] =
          gain * (rows <= cols ? vecs[static_cast<size_t>(r)][static_cast<size_t>(c)]
                               : vecs[static_cast<size_t>(c)][static_cast<size_t>(r)]);
  return t;
}

namespace {

std::string pname(const std::string& prefix, size_t i, const char* field) {
  return prefix + "." + std::to_string(i) + "." + field;
}

[[noreturn]] void layer_error(const std::string& prefix, size_t i, const std::string& msg) {
  throw std::invalid_argument("layer " + prefix + "[" + std::to_string(i) + "]: " + msg);
}

int feature_count(const std::vector<int>& shape) {
  int64_t n = 1;
  for (size_t i = 1; i < shape.size(); ++i) n *= shape[i];
  return static_cast<int>(n);
}

}  // namespace

std::vector<int> build_stack(NetworkParams& params, const std::string& prefix,
                             const std::vector<LayerSpec>& specs, std::vector<int> shape,
                             Rng& rng) {
  for (size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    switch (s.kind) {
      case LayerKind::conv: {
        if (s.kernel <= 0 || s.stride <= 0) layer_error(prefix, i, "kernel and stride must be positive");
        if (shape.size() != 4) layer_error(prefix, i, "conv expects rank-4 input, got " + shape_str(shape));
        if (shape[1] != s.in)
          layer_error(prefix, i, "conv expects " + std::to_string(s.in) + " channels, got " +
                                     std::to_string(shape[1]));
        params.create(pname(prefix, i, "w"),
                      orthogonal_init({s.out, s.in, s.kernel, s.kernel}, s.gain, rng), true, true);
        params.create(pname(prefix, i, "b"), Tensor({s.out}));
        const int oh = (shape[2] + 2 * s.pad - s.kernel) / s.stride + 1;
        const int ow = (shape[3] + 2 * s.pad - s.kernel) / s.stride + 1;
        if (oh <= 0 || ow <= 0) layer_error(prefix, i, "kernel larger than padded input");
        shape = {shape[0], s.out, oh, ow};
        break;
      }
      case LayerKind::dense: {
        if (shape.size() != 2) layer_error(prefix, i, "dense expects rank-2 input, got " + shape_str(shape));
        if (shape[1] != s.in)
          layer_error(prefix, i, "dense expects " + std::to_string(s.in) + " features, got " +
                                     std::to_string(shape[1]));
        params.create(pname(prefix, i, "w"), orthogonal_init({s.out, s.in}, s.gain, rng), true, true);
        params.create(pname(prefix, i, "b"), Tensor({s.out}));
        shape = {shape[0], s.out};
        break;
      }
      case LayerKind::noisy_dense: {
        if (s.sigma0 <= 0.0) layer_error(prefix, i, "noisy-dense sigma0 must be positive");
        if (shape.size() != 2) layer_error(prefix, i, "noisy-dense expects rank-2 input");
        if (shape[1] != s.in)
          layer_error(prefix, i, "noisy-dense expects " + std::to_string(s.in) + " features, got " +
                                     std::to_string(shape[1]));
        const double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
        Tensor wmu({s.out, s.in}), bmu({s.out});
        for (auto& x : wmu.data) x = rng.uniform(-bound, bound);
        for (auto& x : bmu.data) x = rng.uniform(-bound, bound);
        params.create(pname(prefix, i, "w_mu"), std::move(wmu), true, true);
        params.create(pname(prefix, i, "w_sigma"), Tensor({s.out, s.in}, s.sigma0 * bound), true, true);
        params.create(pname(prefix, i, "b_mu"), std::move(bmu));
        params.create(pname(prefix, i, "b_sigma"), Tensor({s.out}, s.sigma0 * bound));
        shape = {shape[0], s.out};
        break;
      }
      case LayerKind::batch_norm: {
        if (shape.size() != 2 && shape.size() != 4)
          layer_error(prefix, i, "batch-norm expects rank-2 or rank-4 input");
        const int c = shape[1];
        params.create(pname(prefix, i, "gamma"), Tensor({c}, 1.0));
        params.create(pname(prefix, i, "beta"), Tensor({c}));
        params.create(pname(prefix, i, "running_mean"), Tensor({c}), false);
        params.create(pname(prefix, i, "running_var"), Tensor({c}, 1.0), false);
        break;
      }
      case LayerKind::relu:
      case LayerKind::softmax:
        break;
      case LayerKind::max_pool: {
        if (shape.size() != 4) layer_error(prefix, i, "max-pool expects rank-4 input");
        if (shape[2] % 2 != 0 || shape[3] % 2 != 0)
          layer_error(prefix, i, "max-pool expects even spatial extents");
        shape = {shape[0], shape[1], shape[2] / 2, shape[3] / 2};
        break;
      }
      case LayerKind::flatten: {
        shape = {shape[0], feature_count(shape)};
        break;
      }
    }
  }
  return shape;
}

int apply_stack(Graph& g, NetworkParams& params, const std::string& prefix,
                const std::vector<LayerSpec>& specs, int input, Mode mode, Rng* noise_rng) {
  int x = input;
  for (size_t i = 0; i < specs.size(); ++i) {
    const LayerSpec& s = specs[i];
    const std::vector<int>& shape = g.value(x).shape;
    try {
      switch (s.kind) {
        case LayerKind::conv: {
          const int w = g.param(params.at(pname(prefix, i, "w")).value);
          const int b = g.param(params.at(pname(prefix, i, "b")).value);
          x = g.conv2d(x, w, b, s.stride, s.pad);
          break;
        }
        case LayerKind::dense: {
          const int w = g.param(params.at(pname(prefix, i, "w")).value);
          const int b = g.param(params.at(pname(prefix, i, "b")).value);
          x = g.dense(x, w, b);
          break;
        }
        case LayerKind::noisy_dense: {
          const int wmu = g.param(params.at(pname(prefix, i, "w_mu")).value);
          const int bmu = g.param(params.at(pname(prefix, i, "b_mu")).value);
          if (mode == Mode::train) {
            if (!noise_rng)
              throw std::invalid_argument("noisy-dense needs a noise stream in train mode");
            const int n_in = s.in, n_out = s.out;
            std::vector<double> fin(static_cast<size_t>(n_in)), fout(static_cast<size_t>(n_out));
            auto squash = [](double x) { return (x < 0 ? -1.0 : 1.0) * std::sqrt(std::fabs(x)); };
            for (auto& v : fin) v = squash(noise_rng->normal());
            for (auto& v : fout) v = squash(noise_rng->normal());
            Tensor noise_w({n_out, n_in});
            for (int r = 0; r < n_out; ++r)
              for (int c = 0; c < n_in; ++c)
                noise_w.data[static_cast<size_t>(r) * n_in + c] =
                    fout[static_cast<size_t>(r)] * fin[static_cast<size_t>(c)];
            const int wsig = g.param(params.at(pname(prefix, i, "w_sigma")).value);
            const int bsig = g.param(params.at(pname(prefix, i, "b_sigma")).value);
            const int w = g.add(wmu, g.mul(wsig, g.leaf(std::move(noise_w))));
            const int b = g.add(bmu, g.mul(bsig, g.leaf(Tensor::from({n_out}, fout))));
            x = g.dense(x, w, b);
          } else {
            x = g.dense(x, wmu, bmu);
          }
          break;
        }
        case LayerKind::batch_norm: {
          const int gamma = g.param(params.at(pname(prefix, i, "gamma")).value);
          const int beta = g.param(params.at(pname(prefix, i, "beta")).value);
          x = g.batchnorm(x, gamma, beta, params.at(pname(prefix, i, "running_mean")).value,
                          params.at(pname(prefix, i, "running_var")).value, mode == Mode::train,
                          0.1, 1e-5);
          break;
        }
        case LayerKind::relu:
          x = g.relu(x);
          break;
        case LayerKind::max_pool:
          x = g.maxpool2(x);
          break;
        case LayerKind::flatten:
          x = g.reshape(x, {shape[0], feature_count(shape)});
          break;
        case LayerKind::softmax:
          x = g.softmax_last(x);
          break;
      }
    } catch (const std::invalid_argument& e) {
      layer_error(prefix, i, e.what());
    }
  }
  return x;
}

std::vector<LayerSpec> impala_mini_trunk(const ImpalaMiniConfig& cfg) {
  const int m = cfg.width_mult;
  if (m != 1 && m != 2 && m != 4)
    throw std::invalid_argument("width_mult must be 1, 2 or 4");
  if (cfg.obs_size % 4 != 0) throw std::invalid_argument("obs_size must be divisible by 4");
  std::vector<LayerSpec> s;
  s.push_back(LayerSpec::conv2d(cfg.obs_channels, 16 * m, 3));
  if (cfg.batch_norm) s.push_back(LayerSpec::batch_norm());
  s.push_back(LayerSpec::relu());
  s.push_back(LayerSpec::max_pool());
  s.push_back(LayerSpec::conv2d(16 * m, 32 * m, 3));
  if (cfg.batch_norm) s.push_back(LayerSpec::batch_norm());
  s.push_back(LayerSpec::relu());
  s.push_back(LayerSpec::max_pool());
  s.push_back(LayerSpec::flatten());
  const int flat = 32 * m * (cfg.obs_size / 4) * (cfg.obs_size / 4);
  if (cfg.noisy)
    s.push_back(LayerSpec::noisy_dense(flat, 256, cfg.sigma0));
  else
    s.push_back(LayerSpec::dense(flat, 256));
  s.push_back(LayerSpec::relu());
  return s;
}

PolicyValueNet PolicyValueNet::make(const ImpalaMiniConfig& cfg, int n_actions, Rng& init_rng) {
  PolicyValueNet net;
  net.n_actions = n_actions;
  net.trunk = impala_mini_trunk(cfg);
  net.policy_head = {LayerSpec::dense(256, n_actions, 0.01)};
  net.value_head = {LayerSpec::dense(256, 1, 1.0)};
  std::vector<int> shape{1, cfg.obs_channels, cfg.obs_size, cfg.obs_size};
  shape = build_stack(net.params, "trunk", net.trunk, shape, init_rng);
  build_stack(net.params, "policy", net.policy_head, shape, init_rng);
  build_stack(net.params, "value", net.value_head, shape, init_rng);
  return net;
}

PolicyValueNet::Out PolicyValueNet::forward(Graph& g, int obs, Mode mode, Rng* noise_rng) {
  const int latent = apply_stack(g, params, "trunk", trunk, obs, mode, noise_rng);
  const int logits = apply_stack(g, params, "policy", policy_head, latent, mode, noise_rng);
  int value = apply_stack(g, params, "value", value_head, latent, mode, noise_rng);
  value = g.reshape(value, {g.value(value).extent(0)});
  return {logits, value, latent};
}

DistributionalNet DistributionalNet::make(const ImpalaMiniConfig& cfg, int n_actions,
                                          int n_atoms, Rng& init_rng) {
  DistributionalNet net;
  net.n_actions = n_actions;
  net.n_atoms = n_atoms;
  net.trunk = impala_mini_trunk(cfg);
  if (cfg.noisy) {
    net.value_stream = {LayerSpec::noisy_dense(256, n_atoms, cfg.sigma0)};
    net.adv_stream = {LayerSpec::noisy_dense(256, n_actions * n_atoms, cfg.sigma0)};
  } else {
    net.value_stream = {LayerSpec::dense(256, n_atoms, 1.0)};
    net.adv_stream = {LayerSpec::dense(256, n_actions * n_atoms, 0.01)};
  }
  std::vector<int> shape{1, cfg.obs_channels, cfg.obs_size, cfg.obs_size};
  shape = build_stack(net.params, "trunk", net.trunk, shape, init_rng);
  build_stack(net.params, "value", net.value_stream, shape, init_rng);
  build_stack(net.params, "adv", net.adv_stream, shape, init_rng);
  return net;
}

DistributionalNet::Out DistributionalNet::forward(Graph& g, NetworkParams& with_params, int obs,
                                                  Mode mode, Rng* noise_rng) {
  NetworkParams& params = with_params;
  const int latent = apply_stack(g, params, "trunk", trunk, obs, mode, noise_rng);
  const int v = apply_stack(g, params, "value", value_stream, latent, mode, noise_rng);
  int a = apply_stack(g, params, "adv", adv_stream, latent, mode, noise_rng);
  const int B = g.value(a).extent(0);
  a = g.reshape(a, {B, n_actions, n_atoms});
  const int q = g.dueling_combine(v, a);
  return {g.log_softmax_last(q), latent};
}

namespace {
constexpr uint64_t kCheckpointMagic = 0x4D58524C43503031ULL;  // "MXRLCP01"
constexpr uint32_t kCheckpointVersion = 1;

template <typename T>
void write_raw(std::ofstream& f, const T& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
void read_raw(std::ifstream& f, T& v) {
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
}
}  // namespace

void save_checkpoint(const NetworkParams& params, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  write_raw(f, kCheckpointMagic);
  write_raw(f, kCheckpointVersion);
  write_raw(f, static_cast<uint32_t>(params.items().size()));
  for (const auto& [name, p] : params.items()) {
    write_raw(f, static_cast<uint32_t>(name.size()));
    f.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_raw(f, static_cast<uint32_t>(p.value.rank()));
    for (int e : p.value.shape) write_raw(f, static_cast<uint64_t>(e));
    f.write(reinterpret_cast<const char*>(p.value.data.data()),
            static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("checkpoint write failed: " + path.string());
}

void load_checkpoint(NetworkParams& params, const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
  uint64_t magic = 0;
  uint32_t version = 0, count = 0;
  read_raw(f, magic);
  read_raw(f, version);
  read_raw(f, count);
  if (magic != kCheckpointMagic)
    throw std::runtime_error("not a parameter checkpoint: " + path.string());
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  if (count != params.items().size())
    throw std::runtime_error("checkpoint has " + std::to_string(count) + " tensors, expected " +
                             std::to_string(params.items().size()));
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = 0;
    read_raw(f, name_len);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    uint32_t rank = 0;
    read_raw(f, rank);
    std::vector<int> shape(rank);
    for (auto& e : shape) {
      uint64_t x = 0;
      read_raw(f, x);
      e = static_cast<int>(x);
    }
    Param& p = params.at(name);
    if (shape != p.value.shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": got " +
                               shape_str(shape) + ", expected " + shape_str(p.value.shape));
    f.read(reinterpret_cast<char*>(p.value.data.data()),
           static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
  }
  if (!f) throw std::runtime_error("truncated checkpoint: " + path.string());
}

}  // namespace mixrl
