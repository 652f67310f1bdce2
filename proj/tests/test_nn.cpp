#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mixrl/graph.hpp"
#include "mixrl/network.hpp"
#include "mixrl/optim.hpp"

using namespace mixrl;

namespace {

// Central finite differences over every trainable parameter. The loss
// function must be a pure function of the parameters.
void check_gradients(NetworkParams& params, const std::function<double()>& loss_value,
                     const std::function<void()>& backward_into_params, double tol = 1e-3) {
  params.zero_grad();
  backward_into_params();
  const double h = 1e-4;
  for (auto& [name, p] : params.items()) {
    if (!p.trainable) continue;
    for (size_t i = 0; i < p.value.data.size(); ++i) {
      const double keep = p.value.data[i];
      p.value.data[i] = keep + h;
      const double up = loss_value();
      p.value.data[i] = keep - h;
      const double down = loss_value();
      p.value.data[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double an = p.value.grad[i];
      const double err = std::fabs(fd - an) / std::max({1.0, std::fabs(fd), std::fabs(an)});
      if (err > tol)
        FAIL("gradient mismatch at ", name, "[", i, "]: analytic ", an, " vs fd ", fd);
    }
  }
}

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.data) x = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), std::invalid_argument);
  t.alloc_grad();
  CHECK(t.grad.size() == t.data.size());
}

TEST_CASE("empty stack is the identity") {
  NetworkParams params;
  Rng rng(1, 0);
  Graph g;
  const Tensor x = random_tensor({2, 5}, rng);
  const int out = apply_stack(g, params, "id", {}, g.leaf(x), Mode::train, nullptr);
  CHECK(g.value(out).data == x.data);
}

TEST_CASE("dense identity weights pass the input through") {
  NetworkParams params;
  Rng rng(2, 0);
  build_stack(params, "net", {LayerSpec::dense(4, 4)}, {1, 4}, rng);
  Param& w = params.at("net.0.w");
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) w.value.data[static_cast<size_t>(r) * 4 + c] = r == c ? 1.0 : 0.0;
  Graph g;
  const Tensor v = Tensor::from({1, 4}, {0.5, -1.0, 2.0, 3.25});
  const int out =
      apply_stack(g, params, "net", {LayerSpec::dense(4, 4)}, g.leaf(v), Mode::eval, nullptr);
  for (int i = 0; i < 4; ++i)
    CHECK(g.value(out).data[static_cast<size_t>(i)] == doctest::Approx(v.data[static_cast<size_t>(i)]));
}

TEST_CASE("1x1 all-ones conv sums channels") {
  // two channels of constants 3 and 5 -> every output element 8
  NetworkParams params;
  Rng rng(3, 0);
  const std::vector<LayerSpec> spec{LayerSpec::conv2d(2, 1, 1, 1, 0)};
  build_stack(params, "net", spec, {1, 2, 4, 4}, rng);
  Param& w = params.at("net.0.w");
  std::fill(w.value.data.begin(), w.value.data.end(), 1.0);
  Tensor x({1, 2, 4, 4});
  for (int i = 0; i < 16; ++i) {
    x.data[static_cast<size_t>(i)] = 3.0;
    x.data[static_cast<size_t>(16 + i)] = 5.0;
  }
  Graph g;
  const int out = apply_stack(g, params, "net", spec, g.leaf(x), Mode::eval, nullptr);
  for (double v : g.value(out).data) CHECK(v == doctest::Approx(8.0));
}

TEST_CASE("backward of sum(w * x) is x") {
  NetworkParams params;
  Tensor init({3});
  init.data = {1.0, 2.0, 3.0};
  Param& w = params.create("w", init);
  Graph g;
  const Tensor x = Tensor::from({3}, {4.0, -5.0, 6.0});
  const int loss = g.sum_all(g.mul(g.param(w.value), g.leaf(x)));
  g.backward(loss);
  for (int i = 0; i < 3; ++i)
    CHECK(w.value.grad[static_cast<size_t>(i)] == doctest::Approx(x.data[static_cast<size_t>(i)]));
}

TEST_CASE("backward of mean((w*x - y)^2) matches the analytic derivative") {
  // w=2, x=3, y=5 -> dL/dw = 2*(6-5)*3 = 6
  NetworkParams params;
  Param& w = params.create("w", Tensor::from({1}, {2.0}));
  Graph g;
  const int pred = g.mul(g.param(w.value), g.leaf(Tensor::from({1}, {3.0})));
  const int loss = g.mean_all(g.square(g.sub(pred, g.leaf(Tensor::from({1}, {5.0})))));
  g.backward(loss);
  CHECK(w.value.grad[0] == doctest::Approx(6.0));
}

TEST_CASE("backward requires a scalar connected to parameters") {
  Graph g;
  const int leaf = g.leaf(Tensor::from({2}, {1.0, 2.0}));
  CHECK_THROWS_AS(g.backward(leaf), std::invalid_argument);
  const int scalar = g.sum_all(leaf);
  CHECK_THROWS_AS(g.backward(scalar), std::invalid_argument);
}

TEST_CASE("repeated backward accumulates parameter gradients") {
  NetworkParams params;
  Param& w = params.create("w", Tensor::from({1}, {1.5}));
  Graph g;
  const int loss = g.sum_all(g.mul(g.param(w.value), g.leaf(Tensor::from({1}, {2.0}))));
  g.backward(loss);
  g.backward(loss);
  CHECK(w.value.grad[0] == doctest::Approx(4.0));
}

TEST_CASE("every layer kind matches central finite differences") {
  Rng rng(5, 0);
  struct Case {
    const char* name;
    std::vector<LayerSpec> spec;
    std::vector<int> in_shape;
    Mode mode;
  };
  const std::vector<Case> cases{
      {"conv", {LayerSpec::conv2d(2, 3, 3)}, {2, 2, 6, 6}, Mode::train},
      {"conv_stride", {LayerSpec::conv2d(2, 2, 3, 2, 1)}, {2, 2, 6, 6}, Mode::train},
      {"dense", {LayerSpec::dense(5, 4)}, {3, 5}, Mode::train},
      {"noisy_dense", {LayerSpec::noisy_dense(5, 4)}, {3, 5}, Mode::train},
      {"noisy_dense_eval", {LayerSpec::noisy_dense(5, 4)}, {3, 5}, Mode::eval},
      {"batch_norm_train", {LayerSpec::batch_norm()}, {4, 3}, Mode::train},
      {"batch_norm_eval", {LayerSpec::batch_norm()}, {4, 3}, Mode::eval},
      {"batch_norm_conv", {LayerSpec::conv2d(2, 2, 3), LayerSpec::batch_norm()}, {2, 2, 4, 4},
       Mode::train},
      {"relu_dense", {LayerSpec::dense(5, 4), LayerSpec::relu()}, {3, 5}, Mode::train},
      {"max_pool", {LayerSpec::conv2d(1, 2, 3), LayerSpec::max_pool()}, {2, 1, 6, 6}, Mode::train},
      {"softmax", {LayerSpec::dense(5, 4), LayerSpec::softmax()}, {3, 5}, Mode::train},
      {"stack", impala_mini_trunk({3, 8, 1, true, true, 0.5}), {2, 3, 8, 8}, Mode::train},
  };

  for (const auto& c : cases) {
    CAPTURE(c.name);
    NetworkParams params;
    Rng init(17, 0);
    build_stack(params, "net", c.spec, c.in_shape, init);
    const Tensor x = random_tensor(c.in_shape, rng);
    const Tensor target = random_tensor({c.in_shape[0]}, rng);

    // keep batch-norm running statistics frozen so the loss is a pure
    // function of the parameters
    NetworkParams frozen = params.clone();
    const auto loss_of = [&](NetworkParams& ps) {
      Graph g;
      Rng noise(99, 3);  // same noise draw on every evaluation
      int out = apply_stack(g, ps, "net", c.spec, g.leaf(x), c.mode, &noise);
      const std::vector<int>& shape = g.value(out).shape;
      if (shape.size() == 4)
        out = g.reshape(out, {shape[0], shape[1] * shape[2] * shape[3]});
      const int pooled = g.mean_all(g.square(g.sum_last(out)));
      return std::pair<Graph, int>(std::move(g), pooled);
    };
    const auto value_fn = [&]() {
      NetworkParams scratch = params.clone();
      for (size_t i = 0; i < scratch.items().size(); ++i)
        scratch.items()[i].second.value.data = params.items()[i].second.value.data;
      auto [g, loss] = loss_of(scratch);
      return g.value(loss).data[0];
    };
    const auto backward_fn = [&]() {
      NetworkParams scratch = params.clone();
      auto [g, loss] = loss_of(scratch);
      g.backward(loss);
      for (size_t i = 0; i < scratch.items().size(); ++i)
        params.items()[i].second.value.grad = scratch.items()[i].second.value.grad;
    };
    check_gradients(params, value_fn, backward_fn);
    (void)frozen;
  }
}

TEST_CASE("softmax rows are a distribution") {
  Rng rng(6, 0);
  Graph g;
  const int out = g.softmax_last(g.leaf(random_tensor({7, 9}, rng, 3.0)));
  const Tensor& p = g.value(out);
  for (int r = 0; r < 7; ++r) {
    double s = 0.0;
    for (int c = 0; c < 9; ++c) {
      const double v = p.data[static_cast<size_t>(r) * 9 + c];
      REQUIRE(v >= 0.0);
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("eval-mode forward is deterministic") {
  Rng init(21, 0);
  ImpalaMiniConfig cfg{3, 8, 1, true, true, 0.5};
  PolicyValueNet net = PolicyValueNet::make(cfg, 5, init);
  Rng rng(3, 1);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.3);
  const auto run_once = [&]() {
    Graph g;
    const auto out = net.forward(g, g.leaf(x), Mode::eval);
    return g.value(out.logits).data;
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("train-mode noisy layers actually perturb") {
  Rng init(22, 0);
  ImpalaMiniConfig cfg{3, 8, 1, false, true, 0.5};
  DistributionalNet net = DistributionalNet::make(cfg, 4, 11, init);
  Rng rng(4, 1);
  const Tensor x = random_tensor({2, 3, 8, 8}, rng, 0.3);
  Rng noise(60, 0);
  Graph g1, g2;
  const auto a = net.forward(g1, g1.leaf(x), Mode::train, &noise);
  const auto b = net.forward(g2, g2.leaf(x), Mode::train, &noise);
  CHECK(g1.value(a.log_probs).data != g2.value(b.log_probs).data);
}

TEST_CASE("gradient clipping definition and contract") {
  NetworkParams params;
  Param& w = params.create("w", Tensor::from({1}, {0.0}));
  w.value.grad[0] = 10.0;
  const double norm = clip_grad_norm(params, 0.5);
  CHECK(norm == doctest::Approx(10.0));
  CHECK(w.value.grad[0] == doctest::Approx(0.5));

  // identity below the threshold
  w.value.grad[0] = 0.3;
  clip_grad_norm(params, 0.5);
  CHECK(w.value.grad[0] == doctest::Approx(0.3));

  Rng rng(9, 0);
  NetworkParams big;
  big.create("a", random_tensor({20}, rng));
  big.create("b", random_tensor({4, 5}, rng));
  for (auto& [name, p] : big.items())
    for (double& gv : p.value.grad) gv = rng.normal();
  const double before = grad_norm(big);
  clip_grad_norm(big, 1.0);
  CHECK(grad_norm(big) <= std::max(1.0, before) + 1e-12);
}

TEST_CASE("adam leaves parameters alone on zero gradients") {
  Rng rng(10, 0);
  NetworkParams params;
  params.create("w", random_tensor({6}, rng));
  const std::vector<double> before = params.at("w").value.data;
  adam_step(params, {1e-3, 0.9, 0.999, 1e-8}, 0.5);
  CHECK(params.at("w").value.data == before);
}

TEST_CASE("adam aborts on non-finite gradients naming the parameter") {
  NetworkParams params;
  params.create("w.bad", Tensor::from({1}, {1.0}));
  params.at("w.bad").value.grad[0] = std::nan("");
  try {
    adam_step(params, {1e-3, 0.9, 0.999, 1e-8}, 0.0);
    FAIL("expected a throw");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("w.bad") != std::string::npos);
  }
}

TEST_CASE("l2 penalty covers weights only") {
  NetworkParams params;
  Rng rng(11, 0);
  params.create("w", Tensor::from({2}, {3.0, 4.0}), true, true);
  params.create("b", Tensor::from({2}, {100.0, 100.0}), true, false);
  Graph g;
  CHECK(g.value(l2_penalty(g, params, 0.0)).data[0] == 0.0);
  const int node = l2_penalty(g, params, 1.0);
  CHECK(g.value(node).data[0] == doctest::Approx(25.0));
  g.backward(node);
  CHECK(params.at("w").value.grad[0] == doctest::Approx(6.0));
  CHECK(params.at("b").value.grad[0] == doctest::Approx(0.0));
}

TEST_CASE("orthogonal init produces orthonormal rows") {
  Rng rng(12, 0);
  const Tensor w = orthogonal_init({4, 7}, 1.0, rng);
  for (int r1 = 0; r1 < 4; ++r1)
    for (int r2 = 0; r2 <= r1; ++r2) {
      double dot = 0.0;
      for (int c = 0; c < 7; ++c)
        dot += w.data[static_cast<size_t>(r1) * 7 + c] * w.data[static_cast<size_t>(r2) * 7 + c];
      CHECK(dot == doctest::Approx(r1 == r2 ? 1.0 : 0.0).epsilon(1e-9));
    }
}

TEST_CASE("stack mismatch reports the layer index") {
  NetworkParams params;
  Rng rng(13, 0);
  try {
    build_stack(params, "net", {LayerSpec::dense(4, 4), LayerSpec::dense(5, 2)}, {1, 4}, rng);
    FAIL("expected a throw");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("net[1]") != std::string::npos);
  }
}

TEST_CASE("checkpoint round-trips bitwise") {
  Rng init(14, 0);
  ImpalaMiniConfig cfg{3, 8, 1, true, false, 0.5};
  PolicyValueNet net = PolicyValueNet::make(cfg, 5, init);
  const auto path = std::filesystem::temp_directory_path() / "mixrl_ckpt_test.bin";
  save_checkpoint(net.params, path);

  Rng init2(999, 0);
  PolicyValueNet other = PolicyValueNet::make(cfg, 5, init2);
  load_checkpoint(other.params, path);
  for (size_t i = 0; i < net.params.items().size(); ++i)
    CHECK(other.params.items()[i].second.value.data == net.params.items()[i].second.value.data);

  std::ofstream(path, std::ios::binary) << "garbage";
  CHECK_THROWS(load_checkpoint(other.params, path));
  std::filesystem::remove(path);
}
