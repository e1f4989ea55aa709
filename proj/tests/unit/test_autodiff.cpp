#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "sfe/autodiff.hpp"
#include "sfe/errors.hpp"
#include "sfe/nn.hpp"
#include "sfe/semask.hpp"
#include "toy.hpp"

using namespace sfe;
using ad::Matrix;
using ad::Var;
using sfe::testing::numeric_gradient;
using sfe::testing::random_matrix;
using sfe::testing::relative_error;

namespace {

using UnaryOp = std::function<Var(const Var&)>;

// Checks d sum(w * op(x)) / dx against central differences.
void check_unary(const UnaryOp& op, Matrix x, double tol = 1e-6) {
  std::mt19937_64 rng(17);
  const Matrix probe = random_matrix(rng, op(Var(x)).rows(), op(Var(x)).cols());
  Var xv = Var::parameter(x);
  const Var loss = ad::sum(ad::mul(op(xv), Var(probe)));
  const Matrix analytic = ad::gradients(loss, {xv})[0].value();
  const Matrix numeric = numeric_gradient(
      [&](const Matrix& m) { return (op(Var(m)).value().array() * probe.array()).sum(); }, x);
  EXPECT_LT(relative_error(analytic, numeric), tol);
}

}  // namespace

class UnaryOps : public ::testing::Test {
 protected:
  std::mt19937_64 rng{3};
  Matrix x = random_matrix(rng, 4, 5);
  Matrix positive = x.array().abs() + 0.5;
};

TEST_F(UnaryOps, Elementwise) {
  check_unary([](const Var& a) { return ad::sin(a); }, x);
  check_unary([](const Var& a) { return ad::cos(a); }, x);
  check_unary([](const Var& a) { return ad::exp(a); }, x);
  check_unary([](const Var& a) { return ad::log(a); }, positive);
  check_unary([](const Var& a) { return ad::sqrt(a); }, positive);
  check_unary([](const Var& a) { return ad::square(a); }, x);
  check_unary([](const Var& a) { return ad::sigmoid(a); }, x);
  check_unary([](const Var& a) { return ad::softplus(a); }, x);
  check_unary([](const Var& a) { return ad::leaky_relu(a, 0.2); }, x);
  check_unary([](const Var& a) { return ad::neg(a); }, x);
  check_unary([](const Var& a) { return ad::scale(a, -2.5); }, x);
  check_unary([](const Var& a) { return ad::add_scalar(a, 3.0); }, x);
}

TEST_F(UnaryOps, ShapeAndReductions) {
  check_unary([](const Var& a) { return ad::transpose(a); }, x);
  check_unary([](const Var& a) { return ad::reshape(a, 2, 10); }, x);
  check_unary([](const Var& a) { return ad::slice_cols(a, 1, 3); }, x);
  check_unary([](const Var& a) { return ad::sum(a); }, x);
  check_unary([](const Var& a) { return ad::mean(a); }, x);
  check_unary([](const Var& a) { return ad::sum_rows(a); }, x);
  check_unary([](const Var& a) { return ad::sum_cols(a); }, x);
  check_unary([](const Var& a) { return ad::softmax_rows(a); }, x);
  check_unary([](const Var& a) { return ad::concat_cols({a, ad::square(a)}); }, x);
  check_unary([](const Var& a) { return ad::expand(ad::sum_rows(a), 3, 5); }, x);
}

TEST_F(UnaryOps, GatherAndScatter) {
  const auto idx = ad::make_index({3, 0, -1, 2, 2, 1}, 2);
  check_unary([idx](const Var& a) { return ad::gather(a, idx); }, x);
  const Matrix y = random_matrix(rng, 3, 10);
  check_unary([idx](const Var& a) { return ad::scatter_add(a, idx, 4); }, y);
}

TEST(Autodiff, GatherIsAdjointOfScatter) {
  std::mt19937_64 rng(5);
  const auto idx = ad::make_index({1, 0, 2, 2, -1, 1}, 2);
  const Matrix a = random_matrix(rng, 3, 4);
  const Matrix b = random_matrix(rng, 3, 8);
  const double lhs = (ad::gather(Var(a), idx).value().array() * b.array()).sum();
  const double rhs = (a.array() * ad::scatter_add(Var(b), idx, 3).value().array()).sum();
  EXPECT_NEAR(lhs, rhs, 1e-12);
}

TEST(Autodiff, BinaryOpsWithBroadcasting) {
  std::mt19937_64 rng(7);
  const Matrix full = random_matrix(rng, 3, 4);
  const std::vector<Matrix> others = {random_matrix(rng, 3, 4), random_matrix(rng, 1, 4),
                                      random_matrix(rng, 3, 1), random_matrix(rng, 1, 1)};
  using Bin = std::function<Var(const Var&, const Var&)>;
  const std::vector<Bin> ops = {ad::add, ad::sub, ad::mul, ad::div};
  for (const auto& op : ops) {
    for (const auto& o : others) {
      const Matrix safe = o.array().abs() + 0.5;
      check_unary([&](const Var& a) { return op(a, Var(safe)); }, full);
      check_unary([&](const Var& b) { return op(Var(full), b); }, safe);
    }
  }
}

TEST(Autodiff, Matmul) {
  std::mt19937_64 rng(9);
  const Matrix a = random_matrix(rng, 3, 4);
  const Matrix b = random_matrix(rng, 4, 2);
  check_unary([&](const Var& x) { return ad::matmul(x, Var(b)); }, a);
  check_unary([&](const Var& x) { return ad::matmul(Var(a), x); }, b);
  const Matrix at = a.transpose();
  check_unary([&](const Var& x) { return ad::matmul(x, Var(b), true); }, at);
  const Matrix bt = b.transpose();
  check_unary([&](const Var& x) { return ad::matmul(Var(a), x, false, true); }, bt);
}

TEST(Autodiff, SecondOrderGradient) {
  // f(x) = sum(x^3) -> g = 3x^2 -> h = sum(g^2) = 9 sum(x^4) -> dh/dx = 36 x^3
  std::mt19937_64 rng(11);
  const Matrix x0 = random_matrix(rng, 2, 3);
  Var x = Var::parameter(x0);
  const Var f = ad::sum(ad::mul(ad::square(x), x));
  const Var g = ad::gradients(f, {x}, true)[0];
  const Var h = ad::sum(ad::square(g));
  const Matrix dh = ad::gradients(h, {x})[0].value();
  const Matrix expected = 36.0 * x0.array().cube();
  EXPECT_LT(relative_error(dh, expected), 1e-12);
}

TEST(Autodiff, SecondOrderThroughNonlinearities) {
  std::mt19937_64 rng(13);
  const Matrix x0 = random_matrix(rng, 2, 3);
  const Matrix w = random_matrix(rng, 3, 2);
  auto grad_norm = [&](const Matrix& m) {
    Var x = Var::parameter(m);
    const Var f = ad::sum(ad::softplus(ad::matmul(ad::leaky_relu(ad::sin(x), 0.2), Var(w))));
    const Var g = ad::gradients(f, {x}, true)[0];
    return ad::sum(ad::square(g));
  };
  Var x = Var::parameter(x0);
  {
    const Var f = ad::sum(ad::softplus(ad::matmul(ad::leaky_relu(ad::sin(x), 0.2), Var(w))));
    const Var g = ad::gradients(f, {x}, true)[0];
    const Matrix analytic = ad::gradients(ad::sum(ad::square(g)), {x})[0].value();
    const Matrix numeric = numeric_gradient([&](const Matrix& m) { return grad_norm(m).item(); }, x0);
    EXPECT_LT(relative_error(analytic, numeric), 1e-6);
  }
}

TEST(Autodiff, UnreachableInputGetsZeros) {
  Var a = Var::parameter(Matrix::Ones(2, 3));
  Var b = Var::parameter(Matrix::Ones(4, 1));
  const auto g = ad::gradients(ad::sum(a), {a, b});
  EXPECT_EQ(g[1].value(), Matrix::Zero(4, 1));
}

TEST(Autodiff, NoGradBuildsConstants) {
  Var a = Var::parameter(Matrix::Ones(2, 2));
  ad::NoGradGuard guard;
  EXPECT_FALSE(ad::grad_enabled());
  EXPECT_FALSE(ad::sin(a).requires_grad());
}

TEST(Autodiff, GradModeIsRestored) {
  EXPECT_TRUE(ad::grad_enabled());
  {
    ad::NoGradGuard off;
    {
      ad::EnableGradGuard on;
      EXPECT_TRUE(ad::grad_enabled());
    }
    EXPECT_FALSE(ad::grad_enabled());
  }
  EXPECT_TRUE(ad::grad_enabled());
}

TEST(Autodiff, FrozenLeafIsConstant) {
  Var a = Var::parameter(Matrix::Ones(2, 2));
  a.set_requires_grad(false);
  EXPECT_FALSE(ad::square(a).requires_grad());
  a.set_requires_grad(true);
  EXPECT_TRUE(ad::square(a).requires_grad());
}

TEST(Autodiff, FirstOrderOnlyOpsRefuseDoubleBackward) {
  Rng rng(1);
  nn::Linear layer(rng, 3, 4, 1.0, 1.0);
  nn::FilmParams film{Var::parameter(Matrix::Ones(2, 8)), 1, 4, nullptr};
  Var x = Var::parameter(Matrix::Ones(2, 3));
  const Var y = ad::sum(nn::film_sine(layer, x, film, 0));
  EXPECT_THROW(ad::gradients(y, {x}, true), std::logic_error);

  auto seg = std::make_shared<const semask::Segments>(semask::Segments{0, 2});
  Var sigma = Var::parameter(Matrix::Constant(2, 1, 0.5));
  EXPECT_THROW(ad::gradients(ad::sum(semask::composite(sigma, Var(Matrix::Ones(2, 1)), seg)), {sigma}, true),
               std::logic_error);
  EXPECT_THROW(ad::gradients(ad::sum(semask::residual_transmittance(sigma, seg)), {sigma}, true),
               std::logic_error);
}

TEST(Autodiff, ShapeMismatchThrows) {
  EXPECT_THROW(ad::add(Var(Matrix::Ones(2, 3)), Var(Matrix::Ones(3, 2))), ShapeError);
  EXPECT_THROW(ad::matmul(Var(Matrix::Ones(2, 3)), Var(Matrix::Ones(2, 3))), ShapeError);
}

TEST(Autodiff, MseValue) {
  Matrix a(1, 2);
  a << 1.0, 3.0;
  EXPECT_DOUBLE_EQ(ad::mse(Var(a), Var(Matrix::Zero(1, 2))).item(), 5.0);
}
