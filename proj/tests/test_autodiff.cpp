#include "doctest.h"
#include "p3d/ops.hpp"
#include "reference_ops.hpp"

using p3d::Shape;
using p3d::Tensor;
using p3d::Var;

TEST_CASE("backward: sum gives ones, sum of squares gives 2x") {
  p3d::Rng rng(1);
  auto x = p3d::make_param(ref::random_tensor<double>(Shape{3, 5}, rng));

  auto loss = p3d::weighted_sum(x, Tensor<double>(Shape{3, 5}, 1.0));
  p3d::backward(loss);
  for (std::int64_t i = 0; i < x->grad.numel(); ++i) CHECK(x->grad[i] == 1.0);

  p3d::zero_grad<double>({x});
  auto sq = p3d::mul(x, x);
  auto loss2 = p3d::weighted_sum(sq, Tensor<double>(Shape{3, 5}, 1.0));
  p3d::backward(loss2);
  for (std::int64_t i = 0; i < x->grad.numel(); ++i)
    CHECK(x->grad[i] == doctest::Approx(2.0 * x->value[i]).epsilon(1e-12));
}

TEST_CASE("backward twice doubles parameter gradients; zero_grad resets") {
  p3d::Rng rng(2);
  auto x = p3d::make_param(ref::random_tensor<double>(Shape{4}, rng));
  auto loss = p3d::weighted_sum(p3d::mul(x, x), Tensor<double>(Shape{4}, 1.0));
  p3d::backward(loss);
  auto once = x->grad;
  p3d::backward(loss);
  for (std::int64_t i = 0; i < 4; ++i)
    CHECK(x->grad[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-15));
  p3d::zero_grad<double>({x});
  for (std::int64_t i = 0; i < 4; ++i) CHECK(x->grad[i] == 0.0);
}

TEST_CASE("backward rejects non-scalar loss") {
  auto x = p3d::make_param(Tensor<double>(Shape{2, 2}, 1.0));
  auto y = p3d::add(x, x);
  CHECK_THROWS_AS(p3d::backward(y), p3d::ShapeError);
}

TEST_CASE("node reused twice accumulates both contributions") {
  auto x = p3d::make_param(Tensor<double>(Shape{3}, 2.0));
  auto y = p3d::add(x, x);  // dy/dx = 2
  auto loss = p3d::weighted_sum(y, Tensor<double>(Shape{3}, 1.0));
  p3d::backward(loss);
  for (std::int64_t i = 0; i < 3; ++i) CHECK(x->grad[i] == 2.0);
}

TEST_CASE("NoGradGuard builds constant results") {
  auto x = p3d::make_param(Tensor<double>(Shape{2}, 3.0));
  p3d::Var<double> y;
  {
    p3d::NoGradGuard guard;
    y = p3d::mul(x, x);
  }
  CHECK_FALSE(y->requires_grad);
  CHECK(y->parents.empty());
  CHECK(y->value[0] == 9.0);
}

TEST_CASE("deep chains do not overflow the stack") {
  auto x = p3d::make_param(Tensor<double>(Shape{1}, 1.0));
  auto ones = Tensor<double>(Shape{1}, 1.0);
  Var<double> cur = x;
  const int depth = 20000;
  auto one = p3d::make_constant(Tensor<double>(Shape{1}, 1.0));
  for (int i = 0; i < depth; ++i) cur = p3d::add(cur, one);
  auto loss = p3d::weighted_sum(cur, ones);
  p3d::backward(loss);
  CHECK(cur->value[0] == 1.0 + depth);
  CHECK(x->grad[0] == 1.0);
}

TEST_CASE("interior gradients are reset between backward calls") {
  auto x = p3d::make_param(Tensor<double>(Shape{2}, 1.5));
  auto y = p3d::mul(x, x);
  auto loss = p3d::weighted_sum(y, Tensor<double>(Shape{2}, 1.0));
  p3d::backward(loss);
  auto interior_first = y->grad;
  p3d::backward(loss);
  CHECK(y->grad.bit_equal(interior_first));  // interior stays 1x, params doubled
  CHECK(x->grad[0] == doctest::Approx(2.0 * 2.0 * 1.5));
}
