#include <gtest/gtest.h>

#include "cac/nn.hpp"
#include "cac/tensor.hpp"
#include "oracles.hpp"

using cac::Tensor;
using T = Tensor<double>;
using Inputs = std::vector<T>;

namespace {

constexpr double kGradTol = 1e-6;

class AutogradTest : public ::testing::Test {
 protected:
  std::mt19937_64 rng{1234};
  T rand(int r, int c, double s = 1.0) { return oracle::random_tensor(r, c, rng, s); }
};

TEST_F(AutogradTest, Matmul) {
  auto e = oracle::autograd_check([](const Inputs& x) { return cac::matmul(x[0], x[1]); }, {rand(3, 4), rand(4, 2)}, rng);
  EXPECT_LT(e, kGradTol);
}

TEST_F(AutogradTest, MatmulTransposed) {
  auto e = oracle::autograd_check([](const Inputs& x) { return cac::matmul_nt(x[0], x[1]); }, {rand(3, 4), rand(5, 4)}, rng);
  EXPECT_LT(e, kGradTol);
}

TEST_F(AutogradTest, Linear) {
  auto e = oracle::autograd_check([](const Inputs& x) { return cac::linear(x[0], x[1], x[2]); },
                                  {rand(3, 4), rand(4, 5), rand(1, 5)}, rng);
  EXPECT_LT(e, kGradTol);
}

TEST_F(AutogradTest, ElementwiseAndBroadcast) {
  EXPECT_LT(oracle::autograd_check([](const Inputs& x) { return cac::add(x[0], x[1]); }, {rand(3, 4), rand(3, 4)}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& x) { return cac::add_row(x[0], x[1]); }, {rand(3, 4), rand(1, 4)}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& x) { return cac::mul_row(x[0], x[1]); }, {rand(3, 4), rand(1, 4)}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& x) { return cac::scale(x[0], 0.37); }, {rand(3, 4)}, rng), kGradTol);
}

TEST_F(AutogradTest, Activations) {
  // Keep relu inputs away from the kink.
  auto x = rand(4, 5);
  for (auto& v : x.data()) v += v > 0 ? 0.1 : -0.1;
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::relu(a[0]); }, {x}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::sigmoid(a[0]); }, {rand(4, 5, 3.0)}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::softplus(a[0]); }, {rand(4, 5, 3.0)}, rng), kGradTol);
}

TEST_F(AutogradTest, SoftmaxAndLayerNorm) {
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::softmax_rows(a[0]); }, {rand(3, 6, 2.0)}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::layer_norm(a[0], a[1], a[2]); },
                                   {rand(3, 6), rand(1, 6), rand(1, 6)}, rng),
            1e-5);
}

TEST_F(AutogradTest, Reshaping) {
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::slice_cols(a[0], 1, 4); }, {rand(3, 6)}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::concat_cols<double>({a[0], a[1]}); },
                                   {rand(3, 2), rand(3, 4)}, rng),
            kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::concat_rows<double>({a[0], a[1]}); },
                                   {rand(2, 3), rand(4, 3)}, rng),
            kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::gather_rows(a[0], {2, 0, 2, 1}); }, {rand(4, 3)}, rng),
            kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::mean_rows(a[0]); }, {rand(5, 3)}, rng), kGradTol);
  EXPECT_LT(oracle::autograd_check([](const Inputs& a) { return cac::sum_all(a[0]); }, {rand(5, 3)}, rng), kGradTol);
}

TEST_F(AutogradTest, Conv2dAllGeometries) {
  for (auto [k, s, p] : {std::tuple{3, 1, 1}, {3, 2, 1}, {7, 4, 3}, {1, 1, 0}}) {
    cac::ConvGeometry geo{6, 5, k, s, p};
    auto e = oracle::autograd_check([&](const Inputs& a) { return cac::conv2d(a[0], a[1], a[2], geo); },
                                    {rand(30, 3), rand(k * k * 3, 4), rand(1, 4)}, rng);
    EXPECT_LT(e, kGradTol) << "k=" << k << " s=" << s;
  }
}

TEST_F(AutogradTest, RegionMean) {
  auto e = oracle::autograd_check([](const Inputs& a) { return cac::region_mean(a[0], 5, 1, 3, 2, 5); }, {rand(20, 3)}, rng);
  EXPECT_LT(e, kGradTol);
}

TEST(Conv2d, MatchesDirectLoop) {
  std::mt19937_64 rng(3);
  const int h = 5, w = 7, c = 2, o = 3, k = 3, s = 2, p = 1;
  auto x = oracle::random_tensor(h * w, c, rng);
  auto wt = oracle::random_tensor(k * k * c, o, rng);
  auto b = oracle::random_tensor(1, o, rng);
  cac::ConvGeometry geo{h, w, k, s, p};
  auto y = cac::conv2d(x, wt, b, geo);
  ASSERT_EQ(y.rows(), geo.out_height() * geo.out_width());
  for (int oy = 0; oy < geo.out_height(); ++oy)
    for (int ox = 0; ox < geo.out_width(); ++ox)
      for (int oc = 0; oc < o; ++oc) {
        double acc = b(0, oc);
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int iy = oy * s - p + ky, ix = ox * s - p + kx;
            if (iy < 0 || ix < 0 || iy >= h || ix >= w) continue;
            for (int ch = 0; ch < c; ++ch) acc += x(iy * w + ix, ch) * wt((ky * k + kx) * c + ch, oc);
          }
        EXPECT_NEAR(y(oy * geo.out_width() + ox, oc), acc, 1e-12);
      }
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  auto a = Tensor<double>::from(1, 2, {1.5, -2.0}, true);
  auto y = cac::sum_all(cac::add(a, a));
  y.backward();
  EXPECT_DOUBLE_EQ(a.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(a.grad()[1], 2.0);
}

TEST(Autograd, NoGradGuardStopsRecording) {
  auto a = Tensor<double>::from(1, 2, {1.0, 2.0}, true);
  {
    cac::NoGradGuard guard;
    EXPECT_FALSE(cac::scale(a, 2.0).requires_grad());
  }
  EXPECT_TRUE(cac::scale(a, 2.0).requires_grad());
}

TEST(Autograd, BackwardRequiresScalar) {
  auto a = Tensor<double>::from(1, 2, {1.0, 2.0}, true);
  EXPECT_THROW(cac::scale(a, 2.0).backward(), std::logic_error);
}

TEST(Ops, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(5);
  auto s = cac::softmax_rows(oracle::random_tensor(10, 7, rng, 20.0));
  for (int r = 0; r < 10; ++r) {
    double sum = 0;
    for (int c = 0; c < 7; ++c) {
      EXPECT_GE(s(r, c), 0.0);
      sum += s(r, c);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Ops, DropoutEvalIsIdentityAndTrainingIsInverted) {
  std::mt19937_64 rng(9);
  auto x = Tensor<double>::from(1, 10000, std::vector<double>(10000, 1.0));
  auto same = cac::dropout(x, 0.5, false, rng);
  EXPECT_EQ(oracle::max_abs_diff(same, x), 0.0);
  auto train = cac::dropout(x, 0.25, true, rng);
  double mean = 0;
  int zeros = 0;
  for (double v : train.data()) {
    mean += v;
    zeros += v == 0.0;
    if (v != 0.0) {
      EXPECT_NEAR(v, 1.0 / 0.75, 1e-12);
    }
  }
  EXPECT_NEAR(mean / 10000, 1.0, 0.05);
  EXPECT_NEAR(zeros / 10000.0, 0.25, 0.03);
}

TEST(Ops, ShapeMismatchThrows) {
  auto a = Tensor<double>::zeros(2, 3), b = Tensor<double>::zeros(3, 2);
  EXPECT_THROW(cac::add(a, b), cac::ConfigError);
  EXPECT_THROW(cac::matmul(a, a), cac::ConfigError);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  auto p = Tensor<double>::from(1, 2, {1.0, -1.0}, true);
  cac::Adam<double> opt({{"p", p}}, cac::AdamOptions{0.1});
  cac::sum_all(cac::mul_row(p, Tensor<double>::from(1, 2, {3.0, -5.0}))).backward();
  opt.step();
  // Bias-corrected first step is lr * sign(grad).
  EXPECT_NEAR(p(0, 0), 0.9, 1e-6);
  EXPECT_NEAR(p(0, 1), -0.9, 1e-6);
}

TEST(Adam, MinimizesQuadratic) {
  auto p = Tensor<double>::from(1, 3, {4.0, -3.0, 2.0}, true);
  cac::Adam<double> opt({{"p", p}}, cac::AdamOptions{0.05});
  for (int i = 0; i < 2000; ++i) {
    opt.zero_grad();
    cac::sum_all(cac::mul_row(p, p.detach())).backward();  // grad = p
    opt.step();
  }
  for (double v : p.data()) EXPECT_NEAR(v, 0.0, 1e-2);
}

}  // namespace
