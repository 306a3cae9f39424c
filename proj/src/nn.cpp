#include "vialguard/nn.hpp"

#include <cblas.h>
#include <unistd.h>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "vialguard/errors.hpp"

namespace vialguard::nn {

Tensor::Tensor(std::vector<std::size_t> shape, double fill) : shape_(std::move(shape)) {
  const std::size_t n =
      std::accumulate(shape_.begin(), shape_.end(), std::size_t{1}, std::multiplies<>());
  data_.assign(n, fill);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.shape());
  return grad;
}

Var Tape::leaf(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var Tape::record(Tensor value, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (recording_) {
    node->backward = std::move(backward);
    nodes_.push_back(node);
  }
  return node;
}

void Tape::backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& node = **it;
    if (node.backward && !node.grad.empty()) node.backward(node);
  }
}

int AvgPool2d::out_size(int in_size) const {
  const int span = in_size - kernel;
  if (span < 0) return kernel >= in_size && ceil_mode ? 1 : 0;
  const int q = ceil_mode ? (span + stride - 1) / stride : span / stride;
  return q + 1;
}

std::size_t ParameterStore::add(std::string path, Tensor value, bool trainable) {
  Parameter p;
  p.path = std::move(path);
  p.value = std::move(value);
  p.trainable = trainable;
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) {
    if (!p.trainable) continue;
    if (p.grad.size() != p.value.size()) p.grad = Tensor(p.value.shape());
    p.grad.fill(0.0);
  }
}

Conv2d make_conv(ParameterStore& store, std::string path, int in_channels, int out_channels,
                 int kernel, int stride, int pad) {
  Conv2d c;
  c.path = std::move(path);
  c.in_channels = in_channels;
  c.out_channels = out_channels;
  c.kernel = kernel;
  c.stride = stride;
  c.pad = pad;
  c.weight = store.add(c.path + ".weight",
                       Tensor({static_cast<std::size_t>(out_channels),
                               static_cast<std::size_t>(in_channels),
                               static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)}));
  c.bias = store.add(c.path + ".bias", Tensor({static_cast<std::size_t>(out_channels)}));
  return c;
}

BatchNorm2d make_batch_norm(ParameterStore& store, std::string path, int channels) {
  BatchNorm2d bn;
  bn.path = std::move(path);
  bn.channels = channels;
  const std::vector<std::size_t> shape{static_cast<std::size_t>(channels)};
  bn.gamma = store.add(bn.path + ".gamma", Tensor(shape, 1.0));
  bn.beta = store.add(bn.path + ".beta", Tensor(shape, 0.0));
  bn.running_mean = store.add(bn.path + ".running_mean", Tensor(shape, 0.0), false);
  bn.running_var = store.add(bn.path + ".running_var", Tensor(shape, 1.0), false);
  return bn;
}

namespace {

void blas_gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
               const double* b, double beta, double* c) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, trans_a ? m : k, b,
              trans_b ? k : n, beta, c, n);
}

void eigen_gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
                const double* b, double beta, double* c) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<Mat> C(c, m, n);
  if (beta == 0.0) {
    C.setZero();
  } else if (beta != 1.0) {
    C *= beta;
  }
  if (trans_a && trans_b) {
    C.noalias() += alpha * Eigen::Map<const Mat>(a, k, m).transpose() * Eigen::Map<const Mat>(b, n, k).transpose();
  } else if (trans_a) {
    C.noalias() += alpha * Eigen::Map<const Mat>(a, k, m).transpose() * Eigen::Map<const Mat>(b, k, n);
  } else if (trans_b) {
    C.noalias() += alpha * Eigen::Map<const Mat>(a, m, k) * Eigen::Map<const Mat>(b, n, k).transpose();
  } else {
    C.noalias() += alpha * Eigen::Map<const Mat>(a, m, k) * Eigen::Map<const Mat>(b, k, n);
  }
}

// Some OpenBLAS builds pick a kernel that returns wrong products on this
// class of CPU for certain shapes. Compare against a naive product on shapes
// the network actually uses.
bool check_blas() {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const int shapes[][3] = {{4, 2048, 144}, {16, 2048, 72}, {48, 722, 432}, {3, 500, 27}};
  for (const auto& s : shapes) {
    for (int variant = 0; variant < 3; ++variant) {
      const bool ta = variant == 1, tb = variant == 2;
      const int m = s[0], n = s[1], k = s[2];
      std::vector<double> a(static_cast<std::size_t>(m) * k), b(static_cast<std::size_t>(k) * n),
          c(static_cast<std::size_t>(m) * n, 0.0);
      for (auto& v : a) v = u(rng);
      for (auto& v : b) v = u(rng);
      blas_gemm(ta, tb, m, n, k, 1.0, a.data(), b.data(), 0.0, c.data());
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          double ref = 0.0;
          for (int p = 0; p < k; ++p) {
            const double av = ta ? a[static_cast<std::size_t>(p) * m + i] : a[static_cast<std::size_t>(i) * k + p];
            const double bv = tb ? b[static_cast<std::size_t>(j) * k + p] : b[static_cast<std::size_t>(p) * n + j];
            ref += av * bv;
          }
          if (std::abs(ref - c[static_cast<std::size_t>(i) * n + j]) > 1e-9 * (1.0 + std::abs(ref))) return false;
        }
      }
    }
  }
  return true;
}

bool use_blas() {
  static const bool ok = [] {
    const bool good = check_blas();
    if (!good) {
      std::cerr << "vialguard: OpenBLAS kernel " << openblas_get_corename()
                << " failed the self-test; using the Eigen fallback (set OPENBLAS_CORETYPE to avoid this)\n";
    }
    return good;
  }();
  return ok;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          const double* b, double beta, double* c) {
  if (use_blas()) {
    blas_gemm(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
  } else {
    eigen_gemm(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
  }
}

bool blas_self_test() { return check_blas(); }

void ensure_reliable_blas(char** argv) {
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr || check_blas()) return;
  // The core type is read when the library loads, so the process restarts
  // itself once with a kernel family that has been reliable.
  const char* core = __builtin_cpu_supports("avx512f") ? "SkylakeX"
                     : __builtin_cpu_supports("avx2") ? "Haswell"
                                                      : "Sandybridge";
  ::setenv("OPENBLAS_CORETYPE", core, 1);
  ::execv("/proc/self/exe", argv);
  // execv only returns on failure; the Eigen fallback keeps results correct.
}

namespace {

struct Geometry4 {
  std::size_t c, n, h, w;
};

Geometry4 dims(const Tensor& t) {
  if (t.rank() != 4) throw ShapeError("expected a rank-4 activation, got " + shape_string(t.shape()));
  return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
}

void im2col(const double* x, const Geometry4& g, int k, int stride, int pad, int oh, int ow,
            double* cols) {
  const std::size_t plane = g.n * oh * ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* xc = x + c * g.n * g.h * g.w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* xn = xc + n * g.h * g.w;
          for (int oy = 0; oy < oh; ++oy) {
            double* out = row + (n * oh + oy) * ow;
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= static_cast<int>(g.h)) {
              std::fill(out, out + ow, 0.0);
              continue;
            }
            const double* xr = xn + iy * g.w;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - pad + kx;
              out[ox] = (ix >= 0 && ix < static_cast<int>(g.w)) ? xr[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const Geometry4& g, int k, int stride, int pad, int oh, int ow,
            double* dx) {
  const std::size_t plane = g.n * oh * ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    double* xc = dx + c * g.n * g.h * g.w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * plane;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* xn = xc + n * g.h * g.w;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= static_cast<int>(g.h)) continue;
            const double* in = row + (n * oh + oy) * ow;
            double* xr = xn + iy * g.w;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < static_cast<int>(g.w)) xr[ix] += in[ox];
            }
          }
        }
      }
    }
  }
}

bool is_pointwise(const Conv2d& conv) {
  return conv.kernel == 1 && conv.stride == 1 && conv.pad == 0;
}

}  // namespace

Var conv2d(Tape& tape, const Var& x, const Conv2d& conv, ParameterStore& store) {
  const Geometry4 g = dims(x->value);
  if (static_cast<int>(g.c) != conv.in_channels) {
    throw ShapeError(conv.path + ": expected " + std::to_string(conv.in_channels) +
                     " input channels, got " + std::to_string(g.c));
  }
  const int oh = conv.out_size(static_cast<int>(g.h));
  const int ow = conv.out_size(static_cast<int>(g.w));
  if (oh <= 0 || ow <= 0) throw ShapeError(conv.path + ": input too small");
  const int cols_rows = conv.in_channels * conv.kernel * conv.kernel;
  const int plane = static_cast<int>(g.n) * oh * ow;

  Tensor y({static_cast<std::size_t>(conv.out_channels), g.n, static_cast<std::size_t>(oh),
            static_cast<std::size_t>(ow)});
  const double* w = store[conv.weight].value.data();
  const double* b = store[conv.bias].value.data();
  for (int o = 0; o < conv.out_channels; ++o) {
    std::fill(y.data() + static_cast<std::size_t>(o) * plane,
              y.data() + static_cast<std::size_t>(o + 1) * plane, b[o]);
  }
  if (is_pointwise(conv)) {
    gemm(false, false, conv.out_channels, plane, cols_rows, 1.0, w, x->value.data(), 1.0, y.data());
  } else {
    std::vector<double> cols(static_cast<std::size_t>(cols_rows) * plane);
    im2col(x->value.data(), g, conv.kernel, conv.stride, conv.pad, oh, ow, cols.data());
    gemm(false, false, conv.out_channels, plane, cols_rows, 1.0, w, cols.data(), 1.0, y.data());
  }
  if (!tape.recording()) return tape.record(std::move(y), {});

  ParameterStore* ps = &store;
  return tape.record(std::move(y), [x, conv, ps, g, oh, ow, cols_rows, plane](Node& self) {
    Parameter& wp = (*ps)[conv.weight];
    Parameter& bp = (*ps)[conv.bias];
    const double* dy = self.grad.data();
    if (bp.grad.size() != bp.value.size()) bp.grad = Tensor(bp.value.shape());
    if (wp.grad.size() != wp.value.size()) wp.grad = Tensor(wp.value.shape());
    for (int o = 0; o < conv.out_channels; ++o) {
      const double* row = dy + static_cast<std::size_t>(o) * plane;
      bp.grad[o] += std::accumulate(row, row + plane, 0.0);
    }
    Tensor& dx = x->grad_buffer();
    if (is_pointwise(conv)) {
      gemm(false, true, conv.out_channels, cols_rows, plane, 1.0, dy, x->value.data(), 1.0,
           wp.grad.data());
      gemm(true, false, cols_rows, plane, conv.out_channels, 1.0, wp.value.data(), dy, 1.0,
           dx.data());
      return;
    }
    std::vector<double> cols(static_cast<std::size_t>(cols_rows) * plane);
    im2col(x->value.data(), g, conv.kernel, conv.stride, conv.pad, oh, ow, cols.data());
    gemm(false, true, conv.out_channels, cols_rows, plane, 1.0, dy, cols.data(), 1.0,
         wp.grad.data());
    gemm(true, false, cols_rows, plane, conv.out_channels, 1.0, wp.value.data(), dy, 0.0,
         cols.data());
    col2im(cols.data(), g, conv.kernel, conv.stride, conv.pad, oh, ow, dx.data());
  });
}

Var batch_norm(Tape& tape, const Var& x, const BatchNorm2d& bn, ParameterStore& store,
               bool training) {
  const Geometry4 g = dims(x->value);
  if (static_cast<int>(g.c) != bn.channels) {
    throw ShapeError(bn.path + ": expected " + std::to_string(bn.channels) + " channels, got " +
                     std::to_string(g.c));
  }
  const std::size_t m = g.n * g.h * g.w;
  const double* gamma = store[bn.gamma].value.data();
  const double* beta = store[bn.beta].value.data();
  double* rmean = store[bn.running_mean].value.data();
  double* rvar = store[bn.running_var].value.data();

  std::vector<double> mean(g.c), inv_std(g.c);
  for (std::size_t c = 0; c < g.c; ++c) {
    if (training) {
      const double* row = x->value.data() + c * m;
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i) s += row[i];
      const double mu = s / static_cast<double>(m);
      double v = 0.0;
      for (std::size_t i = 0; i < m; ++i) v += (row[i] - mu) * (row[i] - mu);
      const double var = v / static_cast<double>(m);
      mean[c] = mu;
      inv_std[c] = 1.0 / std::sqrt(var + bn.eps);
      const double unbiased = m > 1 ? v / static_cast<double>(m - 1) : var;
      rmean[c] = (1.0 - bn.momentum) * rmean[c] + bn.momentum * mu;
      rvar[c] = (1.0 - bn.momentum) * rvar[c] + bn.momentum * unbiased;
    } else {
      mean[c] = rmean[c];
      inv_std[c] = 1.0 / std::sqrt(rvar[c] + bn.eps);
    }
  }

  Tensor y(x->value.shape());
  for (std::size_t c = 0; c < g.c; ++c) {
    const double* in = x->value.data() + c * m;
    double* out = y.data() + c * m;
    const double scale = gamma[c] * inv_std[c];
    const double shift = beta[c] - mean[c] * scale;
    for (std::size_t i = 0; i < m; ++i) out[i] = in[i] * scale + shift;
  }
  if (!tape.recording()) return tape.record(std::move(y), {});

  ParameterStore* ps = &store;
  return tape.record(std::move(y), [x, bn, ps, m, training, mean = std::move(mean),
                                    inv_std = std::move(inv_std)](Node& self) {
    Parameter& gp = (*ps)[bn.gamma];
    Parameter& bp = (*ps)[bn.beta];
    if (gp.grad.size() != gp.value.size()) gp.grad = Tensor(gp.value.shape());
    if (bp.grad.size() != bp.value.size()) bp.grad = Tensor(bp.value.shape());
    Tensor& dx = x->grad_buffer();
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t c = 0; c < mean.size(); ++c) {
      const double* in = x->value.data() + c * m;
      const double* dy = self.grad.data() + c * m;
      double* dxc = dx.data() + c * m;
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double xhat = (in[i] - mean[c]) * inv_std[c];
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xhat;
      }
      gp.grad[c] += sum_dy_xhat;
      bp.grad[c] += sum_dy;
      const double gamma_c = gp.value[c];
      if (training) {
        const double k = gamma_c * inv_std[c];
        for (std::size_t i = 0; i < m; ++i) {
          const double xhat = (in[i] - mean[c]) * inv_std[c];
          dxc[i] += k * (dy[i] - inv_m * sum_dy - xhat * inv_m * sum_dy_xhat);
        }
      } else {
        const double k = gamma_c * inv_std[c];
        for (std::size_t i = 0; i < m; ++i) dxc[i] += k * dy[i];
      }
    }
  });
}

Var relu(Tape& tape, const Var& x) {
  Tensor y(x->value.shape());
  const std::size_t n = y.size();
  const double* in = x->value.data();
  double* out = y.data();
  // NaN passes through so a diverged forward pass still surfaces at the loss
  for (std::size_t i = 0; i < n; ++i) out[i] = in[i] <= 0.0 ? 0.0 : in[i];
  if (!tape.recording()) return tape.record(std::move(y), {});
  return tape.record(std::move(y), [x](Node& self) {
    Tensor& dx = x->grad_buffer();
    const std::size_t n = dx.size();
    const double* in = x->value.data();
    const double* dy = self.grad.data();
    for (std::size_t i = 0; i < n; ++i) {
      if (in[i] > 0.0) dx[i] += dy[i];
    }
  });
}

Var avg_pool(Tape& tape, const Var& x, const AvgPool2d& pool) {
  const Geometry4 g = dims(x->value);
  const int oh = pool.out_size(static_cast<int>(g.h));
  const int ow = pool.out_size(static_cast<int>(g.w));
  if (oh <= 0 || ow <= 0) throw ShapeError("avg_pool: input smaller than the pooling window");
  Tensor y({g.c, g.n, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});

  auto window = [pool](int o, int size) {
    const int lo = o * pool.stride;
    const int hi = std::min(lo + pool.kernel, size);
    return std::pair{lo, hi};
  };
  const std::size_t planes = g.c * g.n;
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = x->value.data() + p * g.h * g.w;
    double* out = y.data() + p * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const auto [y0, y1] = window(oy, static_cast<int>(g.h));
      for (int ox = 0; ox < ow; ++ox) {
        const auto [x0, x1] = window(ox, static_cast<int>(g.w));
        double s = 0.0;
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix) s += in[iy * g.w + ix];
        out[oy * ow + ox] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
    }
  }
  if (!tape.recording()) return tape.record(std::move(y), {});
  return tape.record(std::move(y), [x, g, oh, ow, window](Node& self) {
    Tensor& dx = x->grad_buffer();
    const std::size_t planes = g.c * g.n;
    for (std::size_t p = 0; p < planes; ++p) {
      double* din = dx.data() + p * g.h * g.w;
      const double* dout = self.grad.data() + p * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const auto [y0, y1] = window(oy, static_cast<int>(g.h));
        for (int ox = 0; ox < ow; ++ox) {
          const auto [x0, x1] = window(ox, static_cast<int>(g.w));
          const double share = dout[oy * ow + ox] / static_cast<double>((y1 - y0) * (x1 - x0));
          for (int iy = y0; iy < y1; ++iy)
            for (int ix = x0; ix < x1; ++ix) din[iy * g.w + ix] += share;
        }
      }
    }
  });
}

Var concat_channels(Tape& tape, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Geometry4 g0 = dims(parts.front()->value);
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Geometry4 g = dims(p->value);
    if (g.n != g0.n || g.h != g0.h || g.w != g0.w) {
      throw ShapeError("concat: spatial mismatch " + shape_string(p->value.shape()) + " vs " +
                       shape_string(parts.front()->value.shape()));
    }
    channels += g.c;
  }
  Tensor y({channels, g0.n, g0.h, g0.w});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p->value.data(), p->value.data() + p->value.size(), y.data() + offset);
    offset += p->value.size();
  }
  if (!tape.recording()) return tape.record(std::move(y), {});
  return tape.record(std::move(y), [parts](Node& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      Tensor& dp = p->grad_buffer();
      const double* src = self.grad.data() + offset;
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] += src[i];
      offset += dp.size();
    }
  });
}

}  // namespace vialguard::nn
