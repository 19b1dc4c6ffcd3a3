#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "ietp/autodiff.hpp"
#include "ietp/nn.hpp"
#include "test_support.hpp"

using namespace ietp;
using ietp::testing::check_gradients;
using ietp::testing::random_tensor;

namespace {

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Direct 6-loop valid cross-correlation, single image.
Tensor conv_oracle(const Tensor& x, const Tensor& k) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  Tensor out({co, h - kh + 1, w - kw + 1});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t i = 0; i + kh <= h; ++i)
      for (std::size_t j = 0; j + kw <= w; ++j)
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t u = 0; u < kh; ++u)
            for (std::size_t v = 0; v < kw; ++v)
              out[(o * (h - kh + 1) + i) * (w - kw + 1) + j] +=
                  x[(c * h + i + u) * w + j + v] * k[((o * ci + c) * kh + u) * kw + v];
  return out;
}

Tensor pool_oracle(const Tensor& x, std::size_t ph, std::size_t pw) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, h / ph, w / pw});
  for (std::size_t p = 0; p < c; ++p)
    for (std::size_t i = 0; i < h / ph; ++i)
      for (std::size_t j = 0; j < w / pw; ++j) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t u = 0; u < ph; ++u)
          for (std::size_t v = 0; v < pw; ++v) m = std::max(m, x[(p * h + i * ph + u) * w + j * pw + v]);
        out[(p * (h / ph) + i) * (w / pw) + j] = m;
      }
  return out;
}

}  // namespace

TEST(Tensor, ShapeDataInvariant) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_DOUBLE_EQ(t.sum(), 9.0);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
  EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Matmul, IdentityTimesIdentity) {
  Graph g;
  const Var i = g.constant(Tensor::identity(2));
  EXPECT_EQ(ad::matmul(i, i).value(), Tensor::identity(2));
}

TEST(Matmul, HandArithmetic) {
  Graph g;
  const Var a = g.constant(Tensor::matrix({{1, 2}, {3, 4}}));
  const Var b = g.constant(Tensor::matrix({{1}, {1}}));
  EXPECT_EQ(ad::matmul(a, b).value(), Tensor::matrix({{3}, {7}}));
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  std::mt19937_64 rng(1);
  const Tensor a = random_tensor({3, 4}, rng);
  const Tensor b = random_tensor({4, 2}, rng);
  Graph g;
  const Var av = g.variable(a);
  const Var bv = g.variable(b);
  g.backward(ad::sum(ad::matmul(av, bv)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p) EXPECT_NEAR(g.grad(av.id)(i, p), b(p, 0) + b(p, 1), 1e-14);
  const auto r = check_gradients([](Graph&, const std::vector<Var>& v) { return ad::sum(ad::matmul(v[0], v[1])); },
                                 {a, b});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Matmul, ShapeMismatchThrows) {
  Graph g;
  const Var a = g.constant(Tensor({2, 3}));
  const Var b = g.constant(Tensor({2, 3}));
  EXPECT_THROW(ad::matmul(a, b), DimensionError);
}

TEST(Lstm, ZeroWeightsGiveZeroState) {
  Graph g;
  const Var x = g.constant(Tensor::matrix({{0.7, -3.0}}));
  const LstmState prev{g.constant(Tensor({1, 3})), g.constant(Tensor({1, 3}))};
  const LstmState next = lstm_cell(x, prev, g.constant(Tensor({2, 12})), g.constant(Tensor({3, 12})),
                                   g.constant(Tensor({12})));
  for (double v : next.h.value().values()) EXPECT_EQ(v, 0.0);
  for (double v : next.c.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, SingleUnitMatchesScalarOracle) {
  // gate order i, f, g, o
  const double wi[4] = {0.5, -0.3, 0.8, 0.1};
  const double wh[4] = {-0.2, 0.4, 0.6, -0.7};
  const double b[4] = {0.1, 0.2, -0.1, 0.3};
  const double x = 0.9, h0 = -0.4, c0 = 0.25;
  const double i = sigmoid_ref(wi[0] * x + wh[0] * h0 + b[0]);
  const double f = sigmoid_ref(wi[1] * x + wh[1] * h0 + b[1]);
  const double gg = std::tanh(wi[2] * x + wh[2] * h0 + b[2]);
  const double o = sigmoid_ref(wi[3] * x + wh[3] * h0 + b[3]);
  const double c1 = f * c0 + i * gg;
  const double h1 = o * std::tanh(c1);

  Graph g;
  const LstmState next = lstm_cell(g.constant(Tensor::matrix({{x}})), {g.constant(Tensor::matrix({{h0}})), g.constant(Tensor::matrix({{c0}}))},
                                   g.constant(Tensor::matrix({{wi[0], wi[1], wi[2], wi[3]}})),
                                   g.constant(Tensor::matrix({{wh[0], wh[1], wh[2], wh[3]}})),
                                   g.constant(Tensor::vector({b[0], b[1], b[2], b[3]})));
  EXPECT_NEAR(next.c.value()[0], c1, 1e-15);
  EXPECT_NEAR(next.h.value()[0], h1, 1e-15);
}

TEST(Lstm, GradientCheckFourUnits) {
  std::mt19937_64 rng(2);
  const auto f = [](Graph&, const std::vector<Var>& v) {
    const LstmState s1 = lstm_cell(v[0], {v[1], v[2]}, v[3], v[4], v[5]);
    const LstmState s2 = lstm_cell(v[0], s1, v[3], v[4], v[5]);
    return ad::sum(ad::mul(ad::add(s2.h, s2.c), s2.h));
  };
  const auto r = check_gradients(f, {random_tensor({2, 3}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng),
                                     random_tensor({3, 16}, rng), random_tensor({4, 16}, rng), random_tensor({16}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Lstm, HiddenSizeMismatchThrows) {
  Graph g;
  const Var x = g.constant(Tensor({1, 2}));
  const LstmState prev{g.constant(Tensor({1, 3})), g.constant(Tensor({1, 3}))};
  EXPECT_THROW(lstm_cell(x, prev, g.constant(Tensor({2, 12})), g.constant(Tensor({4, 16})), g.constant(Tensor({12}))),
               DimensionError);
  EXPECT_THROW(lstm_cell(x, prev, g.constant(Tensor({3, 12})), g.constant(Tensor({3, 12})), g.constant(Tensor({12}))),
               DimensionError);
}

TEST(Conv2d, UnitKernelIsIdentity) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({1, 4, 3}, rng);
  Graph g;
  EXPECT_EQ(ad::conv2d(g.constant(x), g.constant(Tensor::ones({1, 1, 1, 1}))).value(), x);
}

TEST(Conv2d, OnesSumToNine) {
  Graph g;
  const Var y = ad::conv2d(g.constant(Tensor::ones({1, 3, 3})), g.constant(Tensor::ones({1, 1, 3, 3})));
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_DOUBLE_EQ(y.value()[0], 9.0);
}

TEST(Conv2d, RandomMatchesLoopOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = random_tensor({3, 13, 3}, rng);
    const Tensor k = random_tensor({5, 3, 3, 2}, rng);
    Graph g;
    const Tensor y = ad::conv2d(g.constant(x), g.constant(k)).value();
    const Tensor ref = conv_oracle(x, k);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, BatchedEqualsPerImageWithBias) {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({2, 3, 5, 3}, rng);
  const Tensor k = random_tensor({4, 3, 3, 3}, rng);
  const Tensor b = random_tensor({4}, rng);
  Graph g;
  const Var kv = g.constant(k);
  const Var bv = g.constant(b);
  const Tensor y = ad::conv2d(g.constant(x), kv, &bv).value();
  const std::size_t per_in = 3 * 5 * 3, per_out = 4 * 3 * 1;
  for (std::size_t n = 0; n < 2; ++n) {
    Tensor xi({3, 5, 3}, std::vector<double>(x.values().begin() + n * per_in, x.values().begin() + (n + 1) * per_in));
    const Tensor ref = conv_oracle(xi, k);
    for (std::size_t i = 0; i < per_out; ++i) EXPECT_NEAR(y[n * per_out + i], ref[i] + b[i / 3], 1e-12);
  }
}

TEST(Conv2d, GradientCheck) {
  std::mt19937_64 rng(6);
  const auto f = [](Graph&, const std::vector<Var>& v) {
    const Var y = ad::conv2d(v[0], v[1], &v[2]);
    return ad::sum(ad::mul(y, y));
  };
  const auto r = check_gradients(f, {random_tensor({2, 2, 5, 3}, rng), random_tensor({3, 2, 3, 2}, rng), random_tensor({3}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(Conv2d, KernelLargerThanInputThrows) {
  Graph g;
  EXPECT_THROW(ad::conv2d(g.constant(Tensor({1, 2, 2})), g.constant(Tensor({1, 1, 3, 1}))), DimensionError);
  EXPECT_THROW(ad::conv2d(g.constant(Tensor({2, 4, 4})), g.constant(Tensor({1, 1, 3, 1}))), DimensionError);
}

TEST(MaxPool, ConstantInput) {
  Graph g;
  const Tensor y = ad::maxpool2d(g.constant(Tensor({2, 6, 4}, 3.25)), 2, 2).value();
  EXPECT_EQ(y.shape(), (Shape{2, 3, 2}));
  for (double v : y.values()) EXPECT_EQ(v, 3.25);
}

TEST(MaxPool, ColumnMaxima) {
  Graph g;
  const Var x = g.constant(Tensor::matrix({{1, 5}, {3, 2}}));
  EXPECT_EQ(ad::maxpool2d(x, 2, 1).value(), Tensor::matrix({{3, 5}}));
}

TEST(MaxPool, RandomMatchesLoopOracleAndDropsRemainder) {
  std::mt19937_64 rng(7);
  const Tensor x = random_tensor({4, 9, 1}, rng);
  Graph g;
  const Tensor y = ad::maxpool2d(g.constant(x), 2, 1).value();
  const Tensor ref = pool_oracle(x, 2, 1);
  ASSERT_EQ(y.shape(), (Shape{4, 4, 1}));
  EXPECT_EQ(y, ref);
}

TEST(MaxPool, GradientGoesToFirstMaximum) {
  Graph g;
  const Var x = g.variable(Tensor::matrix({{2, 1}, {2, 4}}));
  g.backward(ad::sum(ad::maxpool2d(x, 2, 1)));
  EXPECT_EQ(g.grad(x.id), Tensor::matrix({{1, 0}, {0, 1}}));
}

TEST(MaxPool, GradientCheck) {
  std::mt19937_64 rng(8);
  const auto f = [](Graph&, const std::vector<Var>& v) {
    const Var y = ad::maxpool2d(v[0], 2, 1);
    return ad::sum(ad::mul(y, y));
  };
  EXPECT_LT(check_gradients(f, {random_tensor({3, 6, 2}, rng)}).max_rel_error, 1e-5);
}

TEST(MaxPool, WindowLargerThanInputThrows) {
  Graph g;
  EXPECT_THROW(ad::maxpool2d(g.constant(Tensor({1, 1, 1})), 2, 1), DimensionError);
}

TEST(LeakyRelu, ValuesAndSlope) {
  Graph g;
  const Var x = g.variable(Tensor::vector({2.0, -2.0, -1.0}));
  const Var y = ad::leaky_relu(x, 0.1);
  EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(y.value()[1], -0.2);
  g.backward(ad::sum(y));
  EXPECT_DOUBLE_EQ(g.grad(x.id)[2], 0.1);
  EXPECT_DOUBLE_EQ(g.grad(x.id)[0], 1.0);
}

TEST(Softmax, UniformAndStable) {
  Graph g;
  const Tensor u = ad::softmax(g.constant(Tensor::matrix({{0, 0, 0}}))).value();
  for (double v : u.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
  const Tensor big = ad::softmax(g.constant(Tensor::matrix({{1000, 0}}))).value();
  EXPECT_NEAR(big[0], 1.0, 1e-15);
  EXPECT_GE(big[1], 0.0);
  EXPECT_LT(big[1], 1e-300 + 1e-15);
}

TEST(Softmax, SumsToOneAndGradientCheck) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    Graph g;
    const Tensor p = ad::softmax(g.constant(random_tensor({1, 6}, rng, -30, 30))).value();
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    for (double v : p.values()) EXPECT_GT(v, 0.0);
  }
  const Tensor w = random_tensor({1, 6}, rng);
  const auto f = [w](Graph& g, const std::vector<Var>& v) { return ad::sum(ad::mul(ad::softmax(v[0]), g.constant(w))); };
  EXPECT_LT(check_gradients(f, {random_tensor({1, 6}, rng)}).max_rel_error, 1e-5);
}

TEST(ElementwiseOps, GradientCheck) {
  std::mt19937_64 rng(10);
  const auto f = [](Graph&, const std::vector<Var>& v) {
    Var a = ad::add_row_bias(ad::mul(v[0], ad::sigmoid(v[1])), v[2]);
    a = ad::concat_cols({ad::tanh(a), ad::exp(ad::scale(v[0], 0.5)), ad::slice_cols(v[1], 1, 3)});
    a = ad::slice_rows(a, 1, 3);
    return ad::sum(ad::mul(ad::reshape(a, {a.value().size()}), ad::reshape(a, {a.value().size()})));
  };
  const auto r = check_gradients(f, {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng), random_tensor({4}, rng)});
  EXPECT_LT(r.max_rel_error, 1e-5);
}

TEST(ScatterToGrid, PlacesRowsAndRoutesGradient) {
  Graph g;
  const Var src = g.variable(Tensor::matrix({{1, 2}, {3, 4}, {5, 6}}));
  const Var grid = ad::scatter_to_grid(src, {{0, {0, 1, 2}}, {2, {1, 0, 0}}}, 2, 3, 3);
  EXPECT_EQ(grid.shape(), (Shape{2, 2, 3, 3}));
  EXPECT_DOUBLE_EQ(grid.value()[0 * 18 + 0 * 9 + 1 * 3 + 2], 1.0);
  EXPECT_DOUBLE_EQ(grid.value()[0 * 18 + 1 * 9 + 1 * 3 + 2], 2.0);
  EXPECT_DOUBLE_EQ(grid.value()[1 * 18 + 0 * 9], 5.0);
  EXPECT_DOUBLE_EQ(grid.value().sum(), 14.0);
  g.backward(ad::sum(grid));
  EXPECT_EQ(g.grad(src.id), Tensor::matrix({{1, 1}, {0, 0}, {1, 1}}));
  EXPECT_THROW(ad::scatter_to_grid(src, {{0, {0, 3, 0}}}, 1, 3, 3), DimensionError);
}

TEST(NegLogProb, ValueGradientAndClamp) {
  std::mt19937_64 rng(11);
  const auto f = [](Graph&, const std::vector<Var>& v) { return ad::sum(ad::neg_log_prob(v[0], {2, 0, 5})); };
  EXPECT_LT(check_gradients(f, {random_tensor({3, 6}, rng, -3, 3)}).max_rel_error, 1e-5);
  Graph g;
  EXPECT_NEAR(ad::neg_log_prob(g.constant(Tensor({1, 6})), {4}).value()[0], std::log(6.0), 1e-14);
  const Var far = g.variable(Tensor::matrix({{0, 100, 0, 0, 0, 0}}));
  const Var l = ad::neg_log_prob(far, {0});
  EXPECT_NEAR(l.value()[0], -std::log(1e-12), 1e-9);
  g.backward(ad::sum(l));
  EXPECT_EQ(g.grad(far.id).squared_norm(), 0.0);
}

TEST(GaussianNll, MatchesClosedFormAndGradient) {
  Graph g;
  // raw all zero, unit 1, truth at the mean: log(2 pi)
  EXPECT_NEAR(ad::gaussian_nll(g.constant(Tensor({1, 5})), Tensor({1, 2})).value()[0], std::log(2.0 * std::numbers::pi), 1e-14);
  std::mt19937_64 rng(12);
  for (double unit : {1.0, 7.5}) {
    const Tensor truth = random_tensor({4, 2}, rng, -10, 10);
    const auto f = [truth, unit](Graph&, const std::vector<Var>& v) { return ad::sum(ad::gaussian_nll(v[0], truth, unit)); };
    EXPECT_LT(check_gradients(f, {random_tensor({4, 5}, rng)}).max_rel_error, 1e-5) << "unit " << unit;
  }
}

TEST(Graph, NonFiniteForwardIsAnError) {
  Graph g;
  const Var x = g.constant(Tensor::vector({800.0}));
  EXPECT_THROW(ad::exp(x), std::domain_error);
}

TEST(Graph, ForwardIsBitDeterministic) {
  std::mt19937_64 rng(13);
  const Tensor a = random_tensor({5, 7}, rng), b = random_tensor({7, 3}, rng);
  Graph g1, g2;
  const Tensor y1 = ad::softmax(ad::tanh(ad::matmul(g1.constant(a), g1.constant(b)))).value();
  const Tensor y2 = ad::softmax(ad::tanh(ad::matmul(g2.constant(a), g2.constant(b)))).value();
  EXPECT_EQ(y1, y2);
}

TEST(Graph, ComposedScalarChainMatchesOracleJacobians) {
  // y = tanh(sigmoid(w x) * v)
  const double w = 0.7, x = -1.3, v = 2.1;
  Graph g;
  const Var wv = g.variable(Tensor::vector({w}));
  const Var vv = g.variable(Tensor::vector({v}));
  const Var y = ad::tanh(ad::mul(ad::sigmoid(ad::mul(wv, g.constant(Tensor::vector({x})))), vv));
  g.backward(ad::sum(y));
  const double s = sigmoid_ref(w * x);
  const double dy = 1.0 - std::pow(std::tanh(s * v), 2);
  EXPECT_NEAR(g.grad(wv.id)[0], dy * v * s * (1.0 - s) * x, 1e-15);
  EXPECT_NEAR(g.grad(vv.id)[0], dy * s, 1e-15);
}

TEST(Graph, ParameterGradientsAccumulate) {
  Parameter p("w", Tensor::vector({1.0, 2.0}));
  p.zero_grad();
  for (int pass = 0; pass < 2; ++pass) {
    Graph g;
    g.backward(ad::sum(ad::mul(g.param(p), g.param(p))));
  }
  EXPECT_EQ(p.grad, Tensor::vector({4.0, 8.0}));
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  std::vector<Parameter> ps{Parameter("w", Tensor::vector({0.3, -0.2}))};
  AdamState st(ps);
  ps[0].zero_grad();
  adam_step(ps, st);
  EXPECT_EQ(ps[0].value, Tensor::vector({0.3, -0.2}));
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepIsMinusLearningRate) {
  std::vector<Parameter> ps{Parameter("w", Tensor::vector({1.0}))};
  AdamState st(ps);
  ps[0].grad = Tensor::vector({1.0});
  adam_step(ps, st);
  EXPECT_NEAR(ps[0].value[0] - 1.0, -0.001, 1e-10);
}

TEST(Adam, TwoStepsMatchScalarOracle) {
  const double lr = 0.01, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double grads[2] = {0.5, -2.0};
  double p = 0.2, m = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double gr = grads[t - 1];
    m = b1 * m + (1 - b1) * gr;
    v = b2 * v + (1 - b2) * gr * gr;
    p -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }
  std::vector<Parameter> ps{Parameter("w", Tensor::vector({0.2}))};
  AdamState st(ps);
  for (double gr : grads) {
    ps[0].grad = Tensor::vector({gr});
    adam_step(ps, st, {lr, b1, b2, eps});
  }
  EXPECT_NEAR(ps[0].value[0], p, 1e-15);
}

TEST(Adam, ShapeMismatchThrows) {
  std::vector<Parameter> ps{Parameter("w", Tensor::vector({1.0, 2.0}))};
  AdamState st(ps);
  ps[0].grad = Tensor::vector({1.0});
  EXPECT_THROW(adam_step(ps, st), DimensionError);
  std::vector<Parameter> more{Parameter("a", Tensor::vector({1.0})), Parameter("b", Tensor::vector({1.0}))};
  EXPECT_THROW(adam_step(more, st), DimensionError);
}

TEST(ClipGradNorm, RescalesAboveThreshold) {
  std::vector<Parameter> ps{Parameter("a", Tensor::vector({3.0})), Parameter("b", Tensor::vector({4.0}))};
  ps[0].grad = Tensor::vector({3.0});
  ps[1].grad = Tensor::vector({4.0});
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 1.0), 5.0);
  EXPECT_NEAR(ps[0].grad[0], 0.6, 1e-15);
  EXPECT_NEAR(ps[1].grad[0], 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(clip_grad_norm(ps, 10.0), 1.0);
  EXPECT_NEAR(ps[1].grad[0], 0.8, 1e-15);
}

TEST(UniformInit, WithinFanInBound) {
  std::mt19937_64 rng(14);
  const Tensor t = uniform_init({50, 40}, 16, rng);
  for (double v : t.values()) EXPECT_LE(std::abs(v), 0.25);
  std::mt19937_64 again(14);
  EXPECT_EQ(uniform_init({50, 40}, 16, again), t);
}
