#include <doctest.h>

#include <cmath>

#include "mlomae/optim.hpp"

using namespace mlomae;

namespace {

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

}  // namespace

TEST_CASE("first AdamW step from fresh state") {
  Matrix p = scalar(0.0);
  Moments<double> mom;
  adamw_step(p, scalar(1.0), mom, 1, 0.1, AdamWParams<double>{0.9, 0.95, 0.0, 1e-8});
  // m̂ = v̂ = 1, so the step is lr/(1 + eps).
  CHECK(p(0, 0) == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(mom.m(0, 0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(mom.v(0, 0) == doctest::Approx(0.05).epsilon(1e-15));
}

TEST_CASE("zero gradient is pure decoupled decay") {
  Matrix p = scalar(1.0);
  Moments<double> mom;
  adamw_step(p, scalar(0.0), mom, 1, 0.1, AdamWParams<double>{0.9, 0.95, 0.05, 1e-8});
  CHECK(p(0, 0) == doctest::Approx(0.995).epsilon(1e-15));
}

TEST_CASE("constant gradient: step magnitude tends to lr") {
  Matrix p = scalar(0.0);
  Moments<double> mom;
  const AdamWParams<double> hp{0.9, 0.95, 0.0, 1e-8};
  double last = 0.0;
  for (long t = 1; t <= 1000; ++t) {
    const double before = p(0, 0);
    adamw_step(p, scalar(0.37), mom, t, 0.01, hp);
    last = before - p(0, 0);
  }
  CHECK(std::abs(last - 0.01) <= 1e-3 * 0.01);
}

TEST_CASE("no decay and zero betas reduce to sign-normalized SGD") {
  const Matrix g = (Matrix(1, 4) << 0.5, -2.0, 1e-3, 0.0).finished();
  Matrix p = Matrix::Zero(1, 4);
  Moments<double> mom;
  adamw_step(p, g, mom, 1, 0.1, AdamWParams<double>{0.0, 0.0, 0.0, 1e-8});
  for (Index i = 0; i < 4; ++i) {
    const double expect = -0.1 * g(0, i) / (std::abs(g(0, i)) + 1e-8);
    CHECK(p(0, i) == doctest::Approx(expect).epsilon(1e-14));
  }
  // β = 0 is only meaningful as a reduction; the moments still track g.
  CHECK((mom.v.array() >= 0.0).all());
}

TEST_CASE("AdamW rejects mismatched gradient shapes") {
  Matrix p = Matrix::Zero(2, 2);
  Moments<double> mom;
  CHECK_THROWS_AS(adamw_step(p, Matrix(Matrix::Zero(2, 3)), mom, 1, 0.1, AdamWParams<double>{}), DimensionError);
}

TEST_CASE("the template also instantiates in single precision") {
  MatrixT<float> p = MatrixT<float>::Zero(1, 1);
  Moments<float> mom;
  adamw_step<float>(p, MatrixT<float>::Constant(1, 1, 1.0f), mom, 1, 0.1f, AdamWParams<float>{});
  CHECK(p(0, 0) == doctest::Approx(-0.1f).epsilon(1e-6));
}

TEST_CASE("adamw_update shares one step counter across tensors") {
  TensorMap params{{"a", scalar(1.0)}, {"b", Matrix::Ones(2, 2)}};
  const GradMap grads{{"a", scalar(1.0)}, {"b", Matrix::Ones(2, 2)}};
  OptState st;
  adamw_update(params, grads, st, 0.1, AdamWParams<double>{0.9, 0.95, 0.0, 1e-8});
  adamw_update(params, grads, st, 0.1, AdamWParams<double>{0.9, 0.95, 0.0, 1e-8});
  CHECK(st.step == 2);
  CHECK(params["a"](0, 0) == doctest::Approx(params["b"](1, 1)).epsilon(1e-15));
  CHECK(params["a"](0, 0) == doctest::Approx(1.0 - 0.2 / (1.0 + 1e-8)).epsilon(1e-12));
}

TEST_CASE("sgd_update is a plain step") {
  TensorMap params{{"w", scalar(2.0)}};
  sgd_update(params, GradMap{{"w", scalar(4.0)}}, 0.25);
  CHECK(params["w"](0, 0) == 1.0);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0L, 100L, 1.0, 0.1) == 1.0);
  CHECK(cosine_lr(100L, 100L, 1.0, 0.1) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(cosine_lr(50L, 100L, 1.0, 0.1) == doctest::Approx(0.55).epsilon(1e-15));
  // Monotone non-increasing.
  double prev = 2.0;
  for (long s = 0; s <= 100; ++s) {
    const double lr = cosine_lr(s, 100L, 1.0, 0.0);
    CHECK(lr <= prev);
    prev = lr;
  }
}
