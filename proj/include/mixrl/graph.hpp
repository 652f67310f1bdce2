#pragma once

#include <array>
#include <functional>
#include <vector>

#include "mixrl/tensor.hpp"

namespace mixrl {

// Reverse-mode tape over Tensor-granular operations. Nodes are appended
// in topological order; backward() walks the tape in reverse and
// accumulates parameter gradients into the bound parameter tensors.
class Graph {
 public:
  struct Node {
    Tensor value;  // value.grad doubles as the node adjoint buffer
    std::array<int, 3> parents{-1, -1, -1};
    int n_parents = 0;
    std::function<void(Graph&)> back;
    Tensor* sink = nullptr;  // parameter leaf: adjoint flushed here
    bool needs_grad = false;
  };

  // leaves
  int leaf(Tensor value);
  int param(Tensor& parameter);  // requires an allocated gradient buffer

  // layers
  int conv2d(int x, int w, int b, int stride, int pad);
  int maxpool2(int x);
  int dense(int x, int w, int b);
  int batchnorm(int x, int gamma, int beta, Tensor& running_mean, Tensor& running_var,
                bool train, double momentum, double eps);
  int relu(int x);
  int reshape(int x, std::vector<int> shape);
  int softmax_last(int x);
  int log_softmax_last(int x);
  int dueling_combine(int value_stream, int advantage_stream);  // [B,Z], [B,A,Z] -> [B,A,Z]

  // elementwise / reductions
  int exp_(int x);
  int log_(int x);
  int neg(int x);
  int add(int a, int b);
  int sub(int a, int b);
  int mul(int a, int b);
  int square(int x);
  int clamp(int x, Tensor lo, Tensor hi);
  int minimum(int a, int b);
  int maximum(int a, int b);
  int gather_rows(int x, std::vector<int> index);  // [B,A] -> [B]
  int gather_dist(int x, std::vector<int> index);  // [B,A,Z] -> [B,Z]
  int sum_last(int x);
  int sum_all(int x);
  int mean_all(int x);
  int affine(const std::vector<int>& xs, const std::vector<double>& coeffs);  // scalars

  // Accumulates d(loss)/d(parameter) into every reachable parameter's
  // gradient buffer. Repeated calls accumulate.
  void backward(int loss);

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor& grad(int id) { return nodes_[static_cast<size_t>(id)].value; }
  size_t size() const { return nodes_.size(); }

 private:
  friend struct GraphOps;
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  int push(Node n);
  int unary(int x, Tensor value, std::function<void(Graph&)> back);
  int binary(int a, int b, Tensor value, std::function<void(Graph&)> back);
  double* grad_ptr(int id);        // allocated lazily during backward
  bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

  std::vector<Node> nodes_;
};

}  // namespace mixrl
