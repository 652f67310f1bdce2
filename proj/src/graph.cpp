#include "mixrl/graph.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

namespace mixrl {

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

namespace {

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) shape_error(op, detail);
}

// im2col for one chunk of batch elements. cols is [C*K*K, n*OH*OW].
void im2col(const double* x, int C, int H, int W, int K, int stride, int pad, int b0, int n,
            int OH, int OW, double* cols) {
  const int ncols = n * OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < K; ++ki) {
      for (int kj = 0; kj < K; ++kj) {
        double* row = cols + (static_cast<size_t>((c * K + ki) * K + kj)) * ncols;
        for (int bl = 0; bl < n; ++bl) {
          const double* xb = x + (static_cast<size_t>(b0 + bl) * C + c) * H * W;
          for (int oh = 0; oh < OH; ++oh) {
            const int ih = oh * stride - pad + ki;
            double* dst = row + (static_cast<size_t>(bl) * OH + oh) * OW;
            if (ih < 0 || ih >= H) {
              std::memset(dst, 0, sizeof(double) * static_cast<size_t>(OW));
              continue;
            }
            const double* src = xb + static_cast<size_t>(ih) * W;
            for (int ow = 0; ow < OW; ++ow) {
              const int iw = ow * stride - pad + kj;
              dst[ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, int C, int H, int W, int K, int stride, int pad, int b0,
                int n, int OH, int OW, double* dx) {
  const int ncols = n * OH * OW;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < K; ++ki) {
      for (int kj = 0; kj < K; ++kj) {
        const double* row = cols + (static_cast<size_t>((c * K + ki) * K + kj)) * ncols;
        for (int bl = 0; bl < n; ++bl) {
          double* xb = dx + (static_cast<size_t>(b0 + bl) * C + c) * H * W;
          for (int oh = 0; oh < OH; ++oh) {
            const int ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= H) continue;
            const double* src = row + (static_cast<size_t>(bl) * OH + oh) * OW;
            double* dst = xb + static_cast<size_t>(ih) * W;
            for (int ow = 0; ow < OW; ++ow) {
              const int iw = ow * stride - pad + kj;
              if (iw >= 0 && iw < W) dst[iw] += src[ow];
            }
          }
        }
      }
    }
  }
}

int conv_chunk(int CKK, int OHW, int B) {
  const int64_t budget = 4'000'000;  // doubles per cols buffer
  int n = static_cast<int>(std::max<int64_t>(1, budget / (static_cast<int64_t>(CKK) * OHW)));
  return std::min(n, B);
}

}  // namespace

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

double* Graph::grad_ptr(int id) {
  Tensor& t = nodes_[static_cast<size_t>(id)].value;
  t.alloc_grad();
  return t.grad.data();
}

int Graph::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.value.grad.clear();
  return push(std::move(n));
}

int Graph::param(Tensor& parameter) {
  if (!parameter.has_grad())
    throw std::invalid_argument("param: parameter tensor has no gradient buffer");
  Node n;
  n.value = parameter;  // snapshot; adjoint flushed back in backward()
  n.value.zero_grad();
  n.sink = &parameter;
  n.needs_grad = true;
  return push(std::move(n));
}

int Graph::unary(int x, Tensor value, std::function<void(Graph&)> back) {
  Node n;
  n.value = std::move(value);
  n.parents[0] = x;
  n.n_parents = 1;
  n.needs_grad = wants_grad(x);
  if (n.needs_grad) n.back = std::move(back);
  return push(std::move(n));
}

int Graph::binary(int a, int b, Tensor value, std::function<void(Graph&)> back) {
  Node n;
  n.value = std::move(value);
  n.parents[0] = a;
  n.parents[1] = b;
  n.n_parents = 2;
  n.needs_grad = wants_grad(a) || wants_grad(b);
  if (n.needs_grad) n.back = std::move(back);
  return push(std::move(n));
}

int Graph::conv2d(int x, int w, int b, int stride, int pad) {
  const Tensor& xt = value(x);
  const Tensor& wt = value(w);
  require(xt.rank() == 4, "conv2d", "input must be rank 4, got " + shape_str(xt.shape));
  require(wt.rank() == 4, "conv2d", "kernel must be rank 4, got " + shape_str(wt.shape));
  require(stride >= 1 && wt.extent(2) == wt.extent(3), "conv2d", "bad kernel geometry");
  const int B = xt.extent(0), C = xt.extent(1), H = xt.extent(2), W = xt.extent(3);
  const int F = wt.extent(0), K = wt.extent(2);
  require(wt.extent(1) == C, "conv2d",
          "kernel expects " + std::to_string(wt.extent(1)) + " channels, input has " +
              std::to_string(C));
  const int OH = (H + 2 * pad - K) / stride + 1;
  const int OW = (W + 2 * pad - K) / stride + 1;
  require(OH > 0 && OW > 0, "conv2d", "kernel larger than padded input");
  if (b >= 0) {
    const Tensor& bt = value(b);
    require(bt.numel() == F, "conv2d", "bias length must equal filter count");
  }

  Tensor out({B, F, OH, OW});
  const int CKK = C * K * K, OHW = OH * OW;
  const int chunk = conv_chunk(CKK, OHW, B);
  std::vector<double> cols(static_cast<size_t>(CKK) * chunk * OHW);
  std::vector<double> ybuf(static_cast<size_t>(F) * chunk * OHW);
  for (int b0 = 0; b0 < B; b0 += chunk) {
    const int n = std::min(chunk, B - b0);
    const int ncols = n * OHW;
    im2col(xt.data.data(), C, H, W, K, stride, pad, b0, n, OH, OW, cols.data());
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, F, ncols, CKK, 1.0, wt.data.data(),
                CKK, cols.data(), ncols, 0.0, ybuf.data(), ncols);
    for (int f = 0; f < F; ++f)
      for (int bl = 0; bl < n; ++bl)
        std::memcpy(&out.data[((static_cast<size_t>(b0 + bl) * F + f) * OHW)],
                    &ybuf[(static_cast<size_t>(f) * n + bl) * OHW],
                    sizeof(double) * static_cast<size_t>(OHW));
  }
  if (b >= 0) {
    const Tensor& bt = value(b);
    for (int bi = 0; bi < B; ++bi)
      for (int f = 0; f < F; ++f) {
        double* o = &out.data[(static_cast<size_t>(bi) * F + f) * OHW];
        const double bv = bt.data[static_cast<size_t>(f)];
        for (int q = 0; q < OHW; ++q) o[q] += bv;
      }
  }

  Node n;
  n.value = std::move(out);
  n.parents = {x, w, b};
  n.n_parents = b >= 0 ? 3 : 2;
  n.needs_grad = wants_grad(x) || wants_grad(w) || (b >= 0 && wants_grad(b));
  const int id = static_cast<int>(nodes_.size());
  if (n.needs_grad) {
    n.back = [id, x, w, b, stride, pad, B, C, H, W, F, K, OH, OW](Graph& g) {
      const Tensor& xt = g.value(x);
      const Tensor& wt = g.value(w);
      const double* dy = g.node(id).value.grad.data();
      const int CKK = C * K * K, OHW = OH * OW;
      const int chunk = conv_chunk(CKK, OHW, B);
      std::vector<double> cols(static_cast<size_t>(CKK) * chunk * OHW);
      std::vector<double> dybuf(static_cast<size_t>(F) * chunk * OHW);
      std::vector<double> dcols;
      const bool need_dx = g.wants_grad(x);
      const bool need_dw = g.wants_grad(w);
      if (need_dx) dcols.resize(static_cast<size_t>(CKK) * chunk * OHW);
      double* dx = need_dx ? g.grad_ptr(x) : nullptr;
      double* dw = need_dw ? g.grad_ptr(w) : nullptr;
      for (int b0 = 0; b0 < B; b0 += chunk) {
        const int n = std::min(chunk, B - b0);
        const int ncols = n * OHW;
        for (int f = 0; f < F; ++f)
          for (int bl = 0; bl < n; ++bl)
            std::memcpy(&dybuf[(static_cast<size_t>(f) * n + bl) * OHW],
                        &dy[((static_cast<size_t>(b0 + bl) * F + f) * OHW)],
                        sizeof(double) * static_cast<size_t>(OHW));
        if (need_dw) {
          im2col(xt.data.data(), C, H, W, K, stride, pad, b0, n, OH, OW, cols.data());
          cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, F, CKK, ncols, 1.0, dybuf.data(),
                      ncols, cols.data(), ncols, 1.0, dw, CKK);
        }
        if (need_dx) {
          cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, CKK, ncols, F, 1.0,
                      wt.data.data(), CKK, dybuf.data(), ncols, 0.0, dcols.data(), ncols);
          col2im_add(dcols.data(), C, H, W, K, stride, pad, b0, n, OH, OW, dx);
        }
      }
      if (b >= 0 && g.wants_grad(b)) {
        double* db = g.grad_ptr(b);
        for (int bi = 0; bi < B; ++bi)
          for (int f = 0; f < F; ++f) {
            const double* o = &dy[(static_cast<size_t>(bi) * F + f) * OHW];
            double s = 0.0;
            for (int q = 0; q < OHW; ++q) s += o[q];
            db[f] += s;
          }
      }
    };
  }
  return push(std::move(n));
}

int Graph::maxpool2(int x) {
  const Tensor& xt = value(x);
  require(xt.rank() == 4, "maxpool2", "input must be rank 4, got " + shape_str(xt.shape));
  const int B = xt.extent(0), C = xt.extent(1), H = xt.extent(2), W = xt.extent(3);
  require(H % 2 == 0 && W % 2 == 0, "maxpool2", "spatial extents must be even");
  const int OH = H / 2, OW = W / 2;
  Tensor out({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int32_t>>(out.data.size());
  const double* xd = xt.data.data();
  for (int bc = 0; bc < B * C; ++bc) {
    const double* plane = xd + static_cast<size_t>(bc) * H * W;
    double* o = &out.data[static_cast<size_t>(bc) * OH * OW];
    int32_t* am = argmax->data() + static_cast<size_t>(bc) * OH * OW;
    for (int oh = 0; oh < OH; ++oh)
      for (int ow = 0; ow < OW; ++ow) {
        const int i0 = (oh * 2) * W + ow * 2;
        int best = i0;
        if (plane[i0 + 1] > plane[best]) best = i0 + 1;
        if (plane[i0 + W] > plane[best]) best = i0 + W;
        if (plane[i0 + W + 1] > plane[best]) best = i0 + W + 1;
        o[oh * OW + ow] = plane[best];
        am[oh * OW + ow] = best;
      }
  }
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x, argmax, B, C, H, W, OH, OW](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* dy = g.node(id).value.grad.data();
    for (int bc = 0; bc < B * C; ++bc) {
      double* dplane = dx + static_cast<size_t>(bc) * H * W;
      const double* o = &dy[static_cast<size_t>(bc) * OH * OW];
      const int32_t* am = argmax->data() + static_cast<size_t>(bc) * OH * OW;
      for (int q = 0; q < OH * OW; ++q) dplane[am[q]] += o[q];
    }
  });
}

int Graph::dense(int x, int w, int b) {
  const Tensor& xt = value(x);
  const Tensor& wt = value(w);
  require(xt.rank() == 2, "dense", "input must be rank 2, got " + shape_str(xt.shape));
  require(wt.rank() == 2, "dense", "weight must be rank 2, got " + shape_str(wt.shape));
  const int B = xt.extent(0), N = xt.extent(1), M = wt.extent(0);
  require(wt.extent(1) == N, "dense",
          "weight expects " + std::to_string(wt.extent(1)) + " inputs, got " + std::to_string(N));
  if (b >= 0) require(value(b).numel() == M, "dense", "bias length must equal output width");

  Tensor out({B, M});
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, B, M, N, 1.0, xt.data.data(), N,
              wt.data.data(), N, 0.0, out.data.data(), M);
  if (b >= 0) {
    const double* bd = value(b).data.data();
    for (int bi = 0; bi < B; ++bi) {
      double* o = &out.data[static_cast<size_t>(bi) * M];
      for (int m = 0; m < M; ++m) o[m] += bd[m];
    }
  }
  Node n;
  n.value = std::move(out);
  n.parents = {x, w, b};
  n.n_parents = b >= 0 ? 3 : 2;
  n.needs_grad = wants_grad(x) || wants_grad(w) || (b >= 0 && wants_grad(b));
  const int id = static_cast<int>(nodes_.size());
  if (n.needs_grad) {
    n.back = [id, x, w, b, B, N, M](Graph& g) {
      const double* dy = g.node(id).value.grad.data();
      if (g.wants_grad(x))
        cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, B, N, M, 1.0, dy, M,
                    g.value(w).data.data(), N, 1.0, g.grad_ptr(x), N);
      if (g.wants_grad(w))
        cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, M, N, B, 1.0, dy, M,
                    g.value(x).data.data(), N, 1.0, g.grad_ptr(w), N);
      if (b >= 0 && g.wants_grad(b)) {
        double* db = g.grad_ptr(b);
        for (int bi = 0; bi < B; ++bi) {
          const double* row = &dy[static_cast<size_t>(bi) * M];
          for (int m = 0; m < M; ++m) db[m] += row[m];
        }
      }
    };
  }
  return push(std::move(n));
}

int Graph::batchnorm(int x, int gamma, int beta, Tensor& running_mean, Tensor& running_var,
                     bool train, double momentum, double eps) {
  const Tensor& xt = value(x);
  require(xt.rank() == 2 || xt.rank() == 4, "batchnorm",
          "input must be rank 2 or 4, got " + shape_str(xt.shape));
  const int B = xt.extent(0);
  const int C = xt.rank() == 4 ? xt.extent(1) : xt.extent(1);
  const int S = xt.rank() == 4 ? xt.extent(2) * xt.extent(3) : 1;
  require(value(gamma).numel() == C && value(beta).numel() == C, "batchnorm",
          "affine parameters must have one entry per channel");
  require(running_mean.numel() == C && running_var.numel() == C, "batchnorm",
          "running statistics must have one entry per channel");
  const int64_t count = static_cast<int64_t>(B) * S;

  auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(C), 0.0);
  auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(C), 0.0);
  const double* xd = xt.data.data();
  if (train) {
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int bi = 0; bi < B; ++bi) {
        const double* p = xd + (static_cast<size_t>(bi) * C + c) * S;
        for (int q = 0; q < S; ++q) s += p[q];
      }
      (*mean)[static_cast<size_t>(c)] = s / static_cast<double>(count);
    }
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      const double m = (*mean)[static_cast<size_t>(c)];
      for (int bi = 0; bi < B; ++bi) {
        const double* p = xd + (static_cast<size_t>(bi) * C + c) * S;
        for (int q = 0; q < S; ++q) s += (p[q] - m) * (p[q] - m);
      }
      const double var = s / static_cast<double>(count);
      (*invstd)[static_cast<size_t>(c)] = 1.0 / std::sqrt(var + eps);
      running_mean.data[static_cast<size_t>(c)] =
          (1.0 - momentum) * running_mean.data[static_cast<size_t>(c)] + momentum * m;
      running_var.data[static_cast<size_t>(c)] =
          (1.0 - momentum) * running_var.data[static_cast<size_t>(c)] + momentum * var;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[static_cast<size_t>(c)] = running_mean.data[static_cast<size_t>(c)];
      (*invstd)[static_cast<size_t>(c)] =
          1.0 / std::sqrt(running_var.data[static_cast<size_t>(c)] + eps);
    }
  }

  Tensor out(xt.shape);
  const double* gd = value(gamma).data.data();
  const double* bd = value(beta).data.data();
  for (int bi = 0; bi < B; ++bi)
    for (int c = 0; c < C; ++c) {
      const double* p = xd + (static_cast<size_t>(bi) * C + c) * S;
      double* o = &out.data[(static_cast<size_t>(bi) * C + c) * S];
      const double m = (*mean)[static_cast<size_t>(c)], is = (*invstd)[static_cast<size_t>(c)];
      const double gg = gd[c], bb = bd[c];
      for (int q = 0; q < S; ++q) o[q] = gg * (p[q] - m) * is + bb;
    }

  Node n;
  n.value = std::move(out);
  n.parents = {x, gamma, beta};
  n.n_parents = 3;
  n.needs_grad = wants_grad(x) || wants_grad(gamma) || wants_grad(beta);
  const int id = static_cast<int>(nodes_.size());
  if (n.needs_grad) {
    n.back = [id, x, gamma, beta, B, C, S, count, train, mean, invstd](Graph& g) {
      const double* dy = g.node(id).value.grad.data();
      const double* xd = g.value(x).data.data();
      const double* gd = g.value(gamma).data.data();
      for (int c = 0; c < C; ++c) {
        const double m = (*mean)[static_cast<size_t>(c)], is = (*invstd)[static_cast<size_t>(c)];
        double sum_dy = 0.0, sum_dyx = 0.0;
        for (int bi = 0; bi < B; ++bi) {
          const double* dp = dy + (static_cast<size_t>(bi) * C + c) * S;
          const double* xp = xd + (static_cast<size_t>(bi) * C + c) * S;
          for (int q = 0; q < S; ++q) {
            sum_dy += dp[q];
            sum_dyx += dp[q] * (xp[q] - m) * is;
          }
        }
        if (g.wants_grad(gamma)) g.grad_ptr(gamma)[c] += sum_dyx;
        if (g.wants_grad(beta)) g.grad_ptr(beta)[c] += sum_dy;
        if (g.wants_grad(x)) {
          double* dx = g.grad_ptr(x);
          const double gg = gd[c];
          const double inv_count = 1.0 / static_cast<double>(count);
          for (int bi = 0; bi < B; ++bi) {
            const double* dp = dy + (static_cast<size_t>(bi) * C + c) * S;
            const double* xp = xd + (static_cast<size_t>(bi) * C + c) * S;
            double* dxp = dx + (static_cast<size_t>(bi) * C + c) * S;
            for (int q = 0; q < S; ++q) {
              const double xhat = (xp[q] - m) * is;
              if (train)
                dxp[q] += gg * is * (dp[q] - inv_count * (sum_dy + xhat * sum_dyx));
              else
                dxp[q] += gg * is * dp[q];
            }
          }
        }
      }
    };
  }
  return push(std::move(n));
}

int Graph::relu(int x) {
  const Tensor& xt = value(x);
  Tensor out(xt.shape);
  for (size_t i = 0; i < xt.data.size(); ++i) out.data[i] = xt.data[i] > 0.0 ? xt.data[i] : 0.0;
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const Tensor& xt = g.value(x);
    const double* dy = g.node(id).value.grad.data();
    for (size_t i = 0; i < xt.data.size(); ++i)
      if (xt.data[i] > 0.0) dx[i] += dy[i];
  });
}

int Graph::reshape(int x, std::vector<int> shape) {
  const Tensor& xt = value(x);
  require(shape_numel(shape) == xt.numel(), "reshape",
          "cannot view " + shape_str(xt.shape) + " as " + shape_str(shape));
  Tensor out;
  out.shape = std::move(shape);
  out.data = xt.data;
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* dy = g.node(id).value.grad.data();
    const size_t n = g.value(x).data.size();
    for (size_t i = 0; i < n; ++i) dx[i] += dy[i];
  });
}

namespace {
// rows = numel / Z for reductions over the trailing extent
std::pair<int64_t, int> last_dim(const Tensor& t, const char* op) {
  if (t.rank() < 1) shape_error(op, "input must have rank >= 1");
  const int Z = t.shape.back();
  return {t.numel() / Z, Z};
}
}  // namespace

int Graph::softmax_last(int x) {
  const Tensor& xt = value(x);
  auto [rows, Z] = last_dim(xt, "softmax_last");
  Tensor out(xt.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = &xt.data[static_cast<size_t>(r) * Z];
    double* o = &out.data[static_cast<size_t>(r) * Z];
    double mx = in[0];
    for (int z = 1; z < Z; ++z) mx = std::max(mx, in[z]);
    double s = 0.0;
    for (int z = 0; z < Z; ++z) s += (o[z] = std::exp(in[z] - mx));
    for (int z = 0; z < Z; ++z) o[z] /= s;
  }
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x, rows = rows, Z = Z](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* p = g.node(id).value.data.data();
    const double* dy = g.node(id).value.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const size_t off = static_cast<size_t>(r) * Z;
      double dot = 0.0;
      for (int z = 0; z < Z; ++z) dot += dy[off + z] * p[off + z];
      for (int z = 0; z < Z; ++z) dx[off + z] += p[off + z] * (dy[off + z] - dot);
    }
  });
}

int Graph::log_softmax_last(int x) {
  const Tensor& xt = value(x);
  auto [rows, Z] = last_dim(xt, "log_softmax_last");
  Tensor out(xt.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = &xt.data[static_cast<size_t>(r) * Z];
    double* o = &out.data[static_cast<size_t>(r) * Z];
    double mx = in[0];
    for (int z = 1; z < Z; ++z) mx = std::max(mx, in[z]);
    double s = 0.0;
    for (int z = 0; z < Z; ++z) s += std::exp(in[z] - mx);
    const double lse = mx + std::log(s);
    for (int z = 0; z < Z; ++z) o[z] = in[z] - lse;
  }
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x, rows = rows, Z = Z](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* lp = g.node(id).value.data.data();
    const double* dy = g.node(id).value.grad.data();
    for (int64_t r = 0; r < rows; ++r) {
      const size_t off = static_cast<size_t>(r) * Z;
      double s = 0.0;
      for (int z = 0; z < Z; ++z) s += dy[off + z];
      for (int z = 0; z < Z; ++z) dx[off + z] += dy[off + z] - std::exp(lp[off + z]) * s;
    }
  });
}

int Graph::dueling_combine(int value_stream, int advantage_stream) {
  const Tensor& vt = value(value_stream);
  const Tensor& at = value(advantage_stream);
  require(vt.rank() == 2 && at.rank() == 3, "dueling_combine",
          "expected [B,Z] and [B,A,Z], got " + shape_str(vt.shape) + " and " + shape_str(at.shape));
  const int B = at.extent(0), A = at.extent(1), Z = at.extent(2);
  require(vt.extent(0) == B && vt.extent(1) == Z, "dueling_combine", "stream shape mismatch");
  Tensor out({B, A, Z});
  for (int bi = 0; bi < B; ++bi) {
    const double* v = &vt.data[static_cast<size_t>(bi) * Z];
    const double* a = &at.data[static_cast<size_t>(bi) * A * Z];
    double* o = &out.data[static_cast<size_t>(bi) * A * Z];
    for (int z = 0; z < Z; ++z) {
      double m = 0.0;
      for (int ai = 0; ai < A; ++ai) m += a[ai * Z + z];
      m /= static_cast<double>(A);
      for (int ai = 0; ai < A; ++ai) o[ai * Z + z] = v[z] + a[ai * Z + z] - m;
    }
  }
  const int id = static_cast<int>(nodes_.size());
  return binary(value_stream, advantage_stream, std::move(out),
                [id, value_stream, advantage_stream, B, A, Z](Graph& g) {
                  const double* dy = g.node(id).value.grad.data();
                  double* dv = g.wants_grad(value_stream) ? g.grad_ptr(value_stream) : nullptr;
                  double* da =
                      g.wants_grad(advantage_stream) ? g.grad_ptr(advantage_stream) : nullptr;
                  for (int bi = 0; bi < B; ++bi) {
                    const double* d = &dy[static_cast<size_t>(bi) * A * Z];
                    for (int z = 0; z < Z; ++z) {
                      double s = 0.0;
                      for (int ai = 0; ai < A; ++ai) s += d[ai * Z + z];
                      if (dv) dv[static_cast<size_t>(bi) * Z + z] += s;
                      if (da) {
                        const double m = s / static_cast<double>(A);
                        for (int ai = 0; ai < A; ++ai)
                          da[(static_cast<size_t>(bi) * A + ai) * Z + z] += d[ai * Z + z] - m;
                      }
                    }
                  }
                });
}

int Graph::exp_(int x) {
  const Tensor& xt = value(x);
  Tensor out(xt.shape);
  for (size_t i = 0; i < xt.data.size(); ++i) out.data[i] = std::exp(xt.data[i]);
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const Tensor& y = g.node(id).value;
    for (size_t i = 0; i < y.data.size(); ++i) dx[i] += y.grad[i] * y.data[i];
  });
}

int Graph::log_(int x) {
  const Tensor& xt = value(x);
  Tensor out(xt.shape);
  for (size_t i = 0; i < xt.data.size(); ++i) out.data[i] = std::log(xt.data[i]);
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const Tensor& xt = g.value(x);
    const double* dy = g.node(id).value.grad.data();
    for (size_t i = 0; i < xt.data.size(); ++i) dx[i] += dy[i] / xt.data[i];
  });
}

int Graph::neg(int x) {
  const Tensor& xt = value(x);
  Tensor out(xt.shape);
  for (size_t i = 0; i < xt.data.size(); ++i) out.data[i] = -xt.data[i];
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* dy = g.node(id).value.grad.data();
    const size_t n = g.value(x).data.size();
    for (size_t i = 0; i < n; ++i) dx[i] -= dy[i];
  });
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    shape_error(op, "operands " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}
}  // namespace

int Graph::add(int a, int b) {
  const Tensor& at = value(a);
  const Tensor& bt = value(b);
  require_same_shape(at, bt, "add");
  Tensor out(at.shape);
  for (size_t i = 0; i < at.data.size(); ++i) out.data[i] = at.data[i] + bt.data[i];
  const int id = static_cast<int>(nodes_.size());
  return binary(a, b, std::move(out), [id, a, b](Graph& g) {
    const double* dy = g.node(id).value.grad.data();
    const size_t n = g.node(id).value.data.size();
    if (g.wants_grad(a)) {
      double* da = g.grad_ptr(a);
      for (size_t i = 0; i < n; ++i) da[i] += dy[i];
    }
    if (g.wants_grad(b)) {
      double* db = g.grad_ptr(b);
      for (size_t i = 0; i < n; ++i) db[i] += dy[i];
    }
  });
}

int Graph::sub(int a, int b) {
  const Tensor& at = value(a);
  const Tensor& bt = value(b);
  require_same_shape(at, bt, "sub");
  Tensor out(at.shape);
  for (size_t i = 0; i < at.data.size(); ++i) out.data[i] = at.data[i] - bt.data[i];
  const int id = static_cast<int>(nodes_.size());
  return binary(a, b, std::move(out), [id, a, b](Graph& g) {
    const double* dy = g.node(id).value.grad.data();
    const size_t n = g.node(id).value.data.size();
    if (g.wants_grad(a)) {
      double* da = g.grad_ptr(a);
      for (size_t i = 0; i < n; ++i) da[i] += dy[i];
    }
    if (g.wants_grad(b)) {
      double* db = g.grad_ptr(b);
      for (size_t i = 0; i < n; ++i) db[i] -= dy[i];
    }
  });
}

int Graph::mul(int a, int b) {
  const Tensor& at = value(a);
  const Tensor& bt = value(b);
  require_same_shape(at, bt, "mul");
  Tensor out(at.shape);
  for (size_t i = 0; i < at.data.size(); ++i) out.data[i] = at.data[i] * bt.data[i];
  const int id = static_cast<int>(nodes_.size());
  return binary(a, b, std::move(out), [id, a, b](Graph& g) {
    const double* dy = g.node(id).value.grad.data();
    const size_t n = g.node(id).value.data.size();
    if (g.wants_grad(a)) {
      double* da = g.grad_ptr(a);
      const double* bv = g.value(b).data.data();
      for (size_t i = 0; i < n; ++i) da[i] += dy[i] * bv[i];
    }
    if (g.wants_grad(b)) {
      double* db = g.grad_ptr(b);
      const double* av = g.value(a).data.data();
      for (size_t i = 0; i < n; ++i) db[i] += dy[i] * av[i];
    }
  });
}

int Graph::square(int x) {
  const Tensor& xt = value(x);
  Tensor out(xt.shape);
  for (size_t i = 0; i < xt.data.size(); ++i) out.data[i] = xt.data[i] * xt.data[i];
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const Tensor& xt = g.value(x);
    const double* dy = g.node(id).value.grad.data();
    for (size_t i = 0; i < xt.data.size(); ++i) dx[i] += 2.0 * xt.data[i] * dy[i];
  });
}

int Graph::clamp(int x, Tensor lo, Tensor hi) {
  const Tensor& xt = value(x);
  require_same_shape(xt, lo, "clamp");
  require_same_shape(xt, hi, "clamp");
  Tensor out(xt.shape);
  for (size_t i = 0; i < xt.data.size(); ++i)
    out.data[i] = std::min(std::max(xt.data[i], lo.data[i]), hi.data[i]);
  auto lo_p = std::make_shared<Tensor>(std::move(lo));
  auto hi_p = std::make_shared<Tensor>(std::move(hi));
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x, lo_p, hi_p](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const Tensor& xt = g.value(x);
    const double* dy = g.node(id).value.grad.data();
    for (size_t i = 0; i < xt.data.size(); ++i)
      if (xt.data[i] >= lo_p->data[i] && xt.data[i] <= hi_p->data[i]) dx[i] += dy[i];
  });
}

int Graph::minimum(int a, int b) {
  const Tensor& at = value(a);
  const Tensor& bt = value(b);
  require_same_shape(at, bt, "minimum");
  Tensor out(at.shape);
  for (size_t i = 0; i < at.data.size(); ++i) out.data[i] = std::min(at.data[i], bt.data[i]);
  const int id = static_cast<int>(nodes_.size());
  return binary(a, b, std::move(out), [id, a, b](Graph& g) {
    const double* dy = g.node(id).value.grad.data();
    const double* av = g.value(a).data.data();
    const double* bv = g.value(b).data.data();
    const size_t n = g.node(id).value.data.size();
    double* da = g.wants_grad(a) ? g.grad_ptr(a) : nullptr;
    double* db = g.wants_grad(b) ? g.grad_ptr(b) : nullptr;
    for (size_t i = 0; i < n; ++i) {
      if (av[i] <= bv[i]) {  // ties go to the first operand
        if (da) da[i] += dy[i];
      } else if (db) {
        db[i] += dy[i];
      }
    }
  });
}

int Graph::maximum(int a, int b) {
  const Tensor& at = value(a);
  const Tensor& bt = value(b);
  require_same_shape(at, bt, "maximum");
  Tensor out(at.shape);
  for (size_t i = 0; i < at.data.size(); ++i) out.data[i] = std::max(at.data[i], bt.data[i]);
  const int id = static_cast<int>(nodes_.size());
  return binary(a, b, std::move(out), [id, a, b](Graph& g) {
    const double* dy = g.node(id).value.grad.data();
    const double* av = g.value(a).data.data();
    const double* bv = g.value(b).data.data();
    const size_t n = g.node(id).value.data.size();
    double* da = g.wants_grad(a) ? g.grad_ptr(a) : nullptr;
    double* db = g.wants_grad(b) ? g.grad_ptr(b) : nullptr;
    for (size_t i = 0; i < n; ++i) {
      if (av[i] >= bv[i]) {
        if (da) da[i] += dy[i];
      } else if (db) {
        db[i] += dy[i];
      }
    }
  });
}

int Graph::gather_rows(int x, std::vector<int> index) {
  const Tensor& xt = value(x);
  require(xt.rank() == 2, "gather_rows", "input must be rank 2, got " + shape_str(xt.shape));
  const int B = xt.extent(0), A = xt.extent(1);
  require(static_cast<int>(index.size()) == B, "gather_rows", "index length must equal batch");
  Tensor out({B});
  for (int bi = 0; bi < B; ++bi) {
    const int a = index[static_cast<size_t>(bi)];
    require(a >= 0 && a < A, "gather_rows", "index out of range");
    out.data[static_cast<size_t>(bi)] = xt.data[static_cast<size_t>(bi) * A + a];
  }
  auto idx = std::make_shared<std::vector<int>>(std::move(index));
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x, idx, A](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* dy = g.node(id).value.grad.data();
    for (size_t bi = 0; bi < idx->size(); ++bi) dx[bi * A + (*idx)[bi]] += dy[bi];
  });
}

int Graph::gather_dist(int x, std::vector<int> index) {
  const Tensor& xt = value(x);
  require(xt.rank() == 3, "gather_dist", "input must be rank 3, got " + shape_str(xt.shape));
  const int B = xt.extent(0), A = xt.extent(1), Z = xt.extent(2);
  require(static_cast<int>(index.size()) == B, "gather_dist", "index length must equal batch");
  Tensor out({B, Z});
  for (int bi = 0; bi < B; ++bi) {
    const int a = index[static_cast<size_t>(bi)];
    require(a >= 0 && a < A, "gather_dist", "index out of range");
    std::memcpy(&out.data[static_cast<size_t>(bi) * Z],
                &xt.data[(static_cast<size_t>(bi) * A + a) * Z],
                sizeof(double) * static_cast<size_t>(Z));
  }
  auto idx = std::make_shared<std::vector<int>>(std::move(index));
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x, idx, A, Z](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* dy = g.node(id).value.grad.data();
    for (size_t bi = 0; bi < idx->size(); ++bi)
      for (int z = 0; z < Z; ++z)
        dx[(bi * A + (*idx)[bi]) * Z + z] += dy[bi * static_cast<size_t>(Z) + z];
  });
}

int Graph::sum_last(int x) {
  const Tensor& xt = value(x);
  auto [rows, Z] = last_dim(xt, "sum_last");
  std::vector<int> oshape(xt.shape.begin(), xt.shape.end() - 1);
  Tensor out(oshape.empty() ? Tensor::scalar(0.0) : Tensor(oshape));
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    const double* in = &xt.data[static_cast<size_t>(r) * Z];
    for (int z = 0; z < Z; ++z) s += in[z];
    out.data[static_cast<size_t>(r)] = s;
  }
  const int id = static_cast<int>(nodes_.size());
  return unary(x, std::move(out), [id, x, rows = rows, Z = Z](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double* dy = g.node(id).value.grad.data();
    for (int64_t r = 0; r < rows; ++r)
      for (int z = 0; z < Z; ++z) dx[static_cast<size_t>(r) * Z + z] += dy[r];
  });
}

int Graph::sum_all(int x) {
  const Tensor& xt = value(x);
  double s = 0.0;
  for (double v : xt.data) s += v;
  const int id = static_cast<int>(nodes_.size());
  return unary(x, Tensor::scalar(s), [id, x](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double dy = g.node(id).value.grad[0];
    const size_t n = g.value(x).data.size();
    for (size_t i = 0; i < n; ++i) dx[i] += dy;
  });
}

int Graph::mean_all(int x) {
  const Tensor& xt = value(x);
  double s = 0.0;
  for (double v : xt.data) s += v;
  const double inv = 1.0 / static_cast<double>(xt.numel());
  const int id = static_cast<int>(nodes_.size());
  return unary(x, Tensor::scalar(s * inv), [id, x, inv](Graph& g) {
    if (!g.wants_grad(x)) return;
    double* dx = g.grad_ptr(x);
    const double dy = g.node(id).value.grad[0] * inv;
    const size_t n = g.value(x).data.size();
    for (size_t i = 0; i < n; ++i) dx[i] += dy;
  });
}

int Graph::affine(const std::vector<int>& xs, const std::vector<double>& coeffs) {
  require(xs.size() == coeffs.size() && !xs.empty(), "affine", "needs matching terms");
  double s = 0.0;
  bool needs = false;
  for (size_t i = 0; i < xs.size(); ++i) {
    const Tensor& t = value(xs[i]);
    require(t.numel() == 1, "affine", "terms must be scalars");
    s += coeffs[i] * t.data[0];
    needs = needs || wants_grad(xs[i]);
  }
  Node n;
  n.value = Tensor::scalar(s);
  n.n_parents = static_cast<int>(std::min<size_t>(xs.size(), 3));
  for (int i = 0; i < n.n_parents; ++i) n.parents[static_cast<size_t>(i)] = xs[static_cast<size_t>(i)];
  n.needs_grad = needs;
  const int id = static_cast<int>(nodes_.size());
  auto terms = std::make_shared<std::pair<std::vector<int>, std::vector<double>>>(xs, coeffs);
  if (xs.size() > 3)
    throw std::invalid_argument("affine: at most 3 terms per node; chain them");
  if (needs) {
    n.back = [id, terms](Graph& g) {
      const double dy = g.node(id).value.grad[0];
      for (size_t i = 0; i < terms->first.size(); ++i) {
        const int xi = terms->first[i];
        if (!g.wants_grad(xi)) continue;
        g.grad_ptr(xi)[0] += terms->second[i] * dy;
      }
    };
  }
  return push(std::move(n));
}

void Graph::backward(int loss) {
  Node& ln = node(loss);
  if (ln.value.numel() != 1)
    throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                shape_str(ln.value.shape));
  if (!ln.needs_grad)
    throw std::invalid_argument("backward: loss is not connected to any parameter");

  std::vector<char> marked(nodes_.size(), 0);
  std::vector<int> stack{loss};
  marked[static_cast<size_t>(loss)] = 1;
  bool touches_param = false;
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    Node& n = node(id);
    if (n.sink) touches_param = true;
    for (int i = 0; i < n.n_parents; ++i) {
      const int p = n.parents[static_cast<size_t>(i)];
      if (p < 0 || marked[static_cast<size_t>(p)] || !wants_grad(p)) continue;
      marked[static_cast<size_t>(p)] = 1;
      stack.push_back(p);
    }
  }
  if (!touches_param)
    throw std::invalid_argument("backward: loss is not connected to any parameter");

  for (size_t i = 0; i < nodes_.size(); ++i)
    if (marked[i]) {
      nodes_[i].value.alloc_grad();
      nodes_[i].value.zero_grad();
    }
  node(loss).value.grad[0] = 1.0;
  for (int id = loss; id >= 0; --id) {
    if (!marked[static_cast<size_t>(id)]) continue;
    Node& n = node(id);
    if (n.back) n.back(*this);
    if (n.sink) {
      for (size_t i = 0; i < n.value.grad.size(); ++i) n.sink->grad[i] += n.value.grad[i];
      n.value.zero_grad();
    }
  }
}

}  // namespace mixrl
