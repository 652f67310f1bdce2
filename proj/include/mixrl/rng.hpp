#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace mixrl {

// Named sub-streams derived from one master seed. Components draw from
// their own stream so ablations perturb only the component under study.
enum class Stream : uint64_t {
  env_gen = 1,
  net_init,
  net_noise,
  rollout,
  mixing,
  replay,
  opt,
  eval,
  analysis,
};

// Counter-based splitmix64 stream. The sequence is a pure function of
// (seed, stream, draw index), identical on every platform.
class Rng {
 public:
  Rng() : Rng(0, 0) {}
  Rng(uint64_t seed, uint64_t stream)
      : state_(mix64(seed + 0x9E3779B97F4A7C15ULL) ^
               mix64(stream * 0xBF58476D1CE4E5B9ULL + 0x94D049BB133111EBULL)) {}
  Rng(uint64_t seed, Stream stream) : Rng(seed, static_cast<uint64_t>(stream)) {}

  uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    return mix64(state_);
  }

  // [0, 1)
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // {0, ..., n-1}
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
    // Lemire's multiply-shift; rejection keeps it exactly uniform.
    uint64_t range = static_cast<uint64_t>(n);
    while (true) {
      uint64_t x = next_u64();
      __uint128_t m = static_cast<__uint128_t>(x) * range;
      uint64_t lo = static_cast<uint64_t>(m);
      if (lo >= range || lo >= (-range) % range) return static_cast<int>(m >> 64);
    }
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    // Box-Muller on (0,1] uniforms.
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Gamma(shape, 1), shape > 0. Marsaglia-Tsang squeeze with the
  // shape < 1 boost.
  double gamma(double shape) {
    if (!(shape > 0.0)) throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      double u = uniform();
      while (u <= 0.0) u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    double d = shape - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    while (true) {
      double x = normal();
      double t = 1.0 + c * x;
      if (t <= 0.0) continue;
      double v = t * t * t;
      double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  double beta(double a, double b) {
    while (true) {
      double x = gamma(a);
      double y = gamma(b);
      if (x + y > 0.0) return x / (x + y);
    }
  }

 private:
  static uint64_t mix64(uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

inline Rng make_stream(uint64_t master_seed, Stream s) { return Rng(master_seed, s); }

}  // namespace mixrl
