#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "vialguard/nn.hpp"

using namespace vialguard::nn;

namespace {

std::mt19937_64& rng() {
  static std::mt19937_64 r(1);
  return r;
}

Tensor random_tensor(std::vector<std::size_t> shape, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.values()) v = d(rng());
  return t;
}

void randomize(ParameterStore& store, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto& p : store.all()) {
    const bool var = p.path.find("running_var") != std::string::npos;
    for (auto& v : p.value.values()) v = var ? 1.0 + std::abs(d(rng())) : d(rng());
  }
}

// Largest relative error between dL/dx from backward() and central
// differences, with L = sum(op(x) * r) for a fixed random r. Entries near zero
// are measured against the gradient's RMS, since the differences carry
// roundoff of order eps * |L| / h regardless of the entry's size.
template <class Op>
double input_gradient_error(const Tensor& x0, Op op, int probes = 20) {
  Tape tape(true);
  Var x = tape.leaf(x0);
  Var y = op(tape, x);
  const Tensor r = random_tensor(y->value.shape());
  Tensor& seed = y->grad_buffer();
  for (std::size_t i = 0; i < r.size(); ++i) seed[i] = r[i];
  tape.backward();

  auto loss = [&](const Tensor& xv) {
    Tape t(false);
    Var out = op(t, t.leaf(xv));
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) s += out->value[i] * r[i];
    return s;
  };
  double sq = 0.0;
  for (std::size_t i = 0; i < x->grad.size(); ++i) sq += x->grad[i] * x->grad[i];
  const double floor = std::max(1e-6, std::sqrt(sq / static_cast<double>(x->grad.size())));
  double worst = 0.0;
  const double h = 1e-6;
  for (int k = 0; k < probes; ++k) {
    const std::size_t i = rng()() % x0.size();
    Tensor up = x0, down = x0;
    up[i] += h;
    down[i] -= h;
    const double numeric = (loss(up) - loss(down)) / (2 * h);
    const double analytic = x->grad[i];
    worst = std::max(worst, std::abs(numeric - analytic) / std::max(floor, std::abs(numeric) + std::abs(analytic)));
  }
  return worst;
}

}  // namespace

TEST(Gemm, MatchesNaiveProductForAllTransposes) {
  const int m = 7, n = 33, k = 19;
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      const Tensor a = random_tensor({static_cast<std::size_t>(m * k)});
      const Tensor b = random_tensor({static_cast<std::size_t>(k * n)});
      Tensor c = random_tensor({static_cast<std::size_t>(m * n)});
      const Tensor c0 = c;
      gemm(ta, tb, m, n, k, 1.5, a.data(), b.data(), 0.5, c.data());
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int p = 0; p < k; ++p) {
            const double av = ta ? a[p * m + i] : a[i * k + p];
            const double bv = tb ? b[j * k + p] : b[p * n + j];
            s += av * bv;
          }
          EXPECT_NEAR(c[i * n + j], 1.5 * s + 0.5 * c0[i * n + j], 1e-10) << ta << tb << " " << i << "," << j;
        }
      }
    }
  }
}

TEST(Gemm, SelfTestPassesOnTheSelectedKernel) { EXPECT_TRUE(blas_self_test()); }

TEST(OpGradients, WideToNarrowConvolution) {
  // 16 -> 4 channels over a 32x32 batch exercises the large-k GEMM path.
  ParameterStore store;
  const Conv2d conv = make_conv(store, "c", 16, 4, 3, 1, 1);
  randomize(store, 0.3);
  EXPECT_LT(input_gradient_error(random_tensor({16, 2, 32, 32}),
                                 [&](Tape& t, const Var& x) { return conv2d(t, x, conv, store); }),
            1e-6);
}

TEST(OpGradients, StridedStemConvolution) {
  ParameterStore store;
  const Conv2d conv = make_conv(store, "stem", 3, 8, 3, 2, 1);
  randomize(store, 0.3);
  EXPECT_LT(input_gradient_error(random_tensor({3, 2, 31, 31}),
                                 [&](Tape& t, const Var& x) { return conv2d(t, x, conv, store); }),
            1e-6);
}

TEST(OpGradients, ConvolutionShapes) {
  ParameterStore store;
  const Conv2d c1 = make_conv(store, "c1", 4, 3, 1, 1, 0);
  const Conv2d c3 = make_conv(store, "c3", 4, 3, 3, 1, 1);
  const Conv2d s2 = make_conv(store, "s2", 4, 3, 3, 2, 0);
  randomize(store, 0.5);
  const Tensor x = random_tensor({4, 2, 7, 7});
  for (const Conv2d* c : {&c1, &c3, &s2}) {
    EXPECT_LT(input_gradient_error(x, [&](Tape& t, const Var& v) { return conv2d(t, v, *c, store); }), 1e-6)
        << c->path;
  }
}

TEST(OpGradients, ConvolutionWeights) {
  ParameterStore store;
  const Conv2d conv = make_conv(store, "c", 3, 2, 3, 2, 1);
  randomize(store, 0.5);
  const Tensor x = random_tensor({3, 2, 6, 6});
  Tape tape(true);
  Var y = conv2d(tape, tape.leaf(x), conv, store);
  const Tensor r = random_tensor(y->value.shape());
  Tensor& seed = y->grad_buffer();
  for (std::size_t i = 0; i < r.size(); ++i) seed[i] = r[i];
  store.zero_grad();
  tape.backward();
  auto loss = [&] {
    Tape t(false);
    Var out = conv2d(t, t.leaf(x), conv, store);
    double s = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) s += out->value[i] * r[i];
    return s;
  };
  for (std::size_t idx : {conv.weight, conv.bias}) {
    auto& p = store[idx];
    for (std::size_t k = 0; k < p.value.size(); k += 3) {
      const double keep = p.value[k];
      p.value[k] = keep + 1e-6;
      const double up = loss();
      p.value[k] = keep - 1e-6;
      const double down = loss();
      p.value[k] = keep;
      EXPECT_NEAR(p.grad[k], (up - down) / 2e-6, 1e-6 * (1 + std::abs(p.grad[k]))) << p.path << "[" << k << "]";
    }
  }
}

TEST(OpGradients, TrainingBatchNorm) {
  ParameterStore store;
  const BatchNorm2d bn = make_batch_norm(store, "bn", 4);
  randomize(store, 0.5);
  EXPECT_LT(input_gradient_error(random_tensor({4, 3, 5, 5}),
                                 [&](Tape& t, const Var& x) { return batch_norm(t, x, bn, store, true); }),
            1e-5);
}

TEST(OpGradients, ConcatPoolRelu) {
  ParameterStore store;
  const Conv2d conv = make_conv(store, "c", 4, 3, 3, 1, 1);
  randomize(store, 0.5);
  const Tensor x = random_tensor({4, 2, 7, 7});
  EXPECT_LT(input_gradient_error(x, [&](Tape& t, const Var& v) { return concat_channels(t, {v, conv2d(t, v, conv, store)}); }),
            1e-6);
  EXPECT_LT(input_gradient_error(x, [&](Tape& t, const Var& v) { return avg_pool(t, v, AvgPool2d{}); }), 1e-6);
  EXPECT_LT(input_gradient_error(x, [&](Tape& t, const Var& v) { return relu(t, v); }), 1e-6);
}

TEST(AvgPool, CeilModeCoversTheRaggedEdge) {
  const AvgPool2d pool{};
  EXPECT_EQ(pool.out_size(75), 38);
  EXPECT_EQ(pool.out_size(38), 19);
  EXPECT_EQ(pool.out_size(19), 10);
  Tape t(false);
  Tensor x({1, 1, 3, 3});
  for (std::size_t i = 0; i < 9; ++i) x[i] = static_cast<double>(i);
  Var y = avg_pool(t, t.leaf(x), pool);
  ASSERT_EQ(y->value.shape(), (std::vector<std::size_t>{1, 1, 2, 2}));
  EXPECT_DOUBLE_EQ(y->value[0], (0 + 1 + 3 + 4) / 4.0);
  EXPECT_DOUBLE_EQ(y->value[3], 8.0);  // the lone corner cell averages over itself
}
