#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace mixrl {

inline int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int e : shape) n *= e;
  return n;
}

std::string shape_str(const std::vector<int>& shape);

// Dense row-major tensor of 64-bit reals with an optional gradient
// buffer of identical shape.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty, or data.size() elements

  Tensor() = default;

  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    check_extents(shape);
    data.assign(static_cast<size_t>(shape_numel(shape)), fill);
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.data.assign(1, v);
    return t;  // rank 0
  }

  static Tensor from(std::vector<int> s, std::vector<double> values) {
    check_extents(s);
    if (static_cast<int64_t>(values.size()) != shape_numel(s))
      throw std::invalid_argument("tensor data length does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(values);
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int extent(int i) const { return shape.at(static_cast<size_t>(i)); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  void alloc_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
  bool has_grad() const { return grad.size() == data.size() && !data.empty(); }

 private:
  static void check_extents(const std::vector<int>& s) {
    for (int e : s)
      if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(s));
  }
};

}  // namespace mixrl
