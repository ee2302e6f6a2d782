#include <catch2/catch_amalgamated.hpp>

#include "dvc/optim.hpp"

using namespace dvc;

TEST_CASE("learning rate schedule frozen values") {
  LrSchedule s;  // defaults: base 1e-3, warmup 15, halve every 100
  REQUIRE(s.lr(0) == Catch::Approx(1e-3 / 15.0).epsilon(1e-12));
  REQUIRE(s.lr(7) == Catch::Approx(1e-3 * 8.0 / 15.0).epsilon(1e-12));
  REQUIRE(s.lr(14) == Catch::Approx(1e-3).epsilon(1e-12));
  REQUIRE(s.lr(15) == Catch::Approx(1e-3).epsilon(1e-12));
  REQUIRE(s.lr(99) == Catch::Approx(1e-3).epsilon(1e-12));
  REQUIRE(s.lr(100) == Catch::Approx(5e-4).epsilon(1e-12));
  REQUIRE(s.lr(250) == Catch::Approx(2.5e-4).epsilon(1e-12));
  REQUIRE(s.lr(499) == Catch::Approx(1e-3 * 0.0625).epsilon(1e-12));
  REQUIRE(s.in_warmup(14));
  REQUIRE_FALSE(s.in_warmup(15));
}

TEST_CASE("first adam step moves by about -lr times sign of gradient") {
  Tensor w = Tensor::zeros({3}, true);
  ParamList params{{"w", w}};
  Adam opt(params);
  GradMap grads;
  grads[w.node().get()] = {3.0, -0.5, 1e-3};
  opt.step(params, grads, 0.1);
  // mhat = g, vhat = g*g, update = -lr * g / (|g| + eps)
  REQUIRE(w.at(0) == Catch::Approx(-0.1).epsilon(1e-7));
  REQUIRE(w.at(1) == Catch::Approx(0.1).epsilon(1e-7));
  REQUIRE(w.at(2) == Catch::Approx(-0.1).epsilon(1e-4));  // eps matters at small |g|
}

TEST_CASE("adam trajectory matches a scalar reference loop") {
  // minimize f(x) = (x-2)^2 from x=0; reference is plain doubles
  double x_ref = 0.0, m = 0.0, v = 0.0;
  Tensor x = Tensor::scalar(0.0, true);
  ParamList params{{"x", x}};
  Adam opt(params);
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  for (int t = 1; t <= 50; ++t) {
    double g_ref = 2.0 * (x_ref - 2.0);
    m = b1 * m + (1 - b1) * g_ref;
    v = b2 * v + (1 - b2) * g_ref * g_ref;
    x_ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);

    Tensor loss = square(add_scalar(x, -2.0));
    GradMap grads = backward(loss);
    opt.step(params, grads, lr);
    REQUIRE(x.item() == Catch::Approx(x_ref).margin(1e-14));
  }
  REQUIRE(std::abs(x.item() - 2.0) < 1.0);  // headed the right way
}

TEST_CASE("adam with zero gradient decays momentum but keeps moving") {
  Tensor w = Tensor::scalar(1.0, true);
  ParamList params{{"w", w}};
  Adam opt(params);
  GradMap g1;
  g1[w.node().get()] = {1.0};
  opt.step(params, g1, 0.1);
  double after_first = w.item();
  opt.step(params, GradMap{}, 0.1);  // no gradient entry this step
  REQUIRE(w.item() != after_first);  // momentum still pushes
  REQUIRE(opt.step_count() == 2);
}

TEST_CASE("adam state round-trips through the flat blob") {
  Rng rng(5);
  Tensor a = Tensor::zeros({4}, true);
  Tensor b = Tensor::zeros({2, 3}, true);
  ParamList params{{"a", a}, {"b", b}};
  Adam opt(params);
  for (int t = 0; t < 3; ++t) {
    GradMap g;
    std::vector<double> ga(4), gb(6);
    for (auto& x : ga) x = rng.uniform(-1, 1);
    for (auto& x : gb) x = rng.uniform(-1, 1);
    g[a.node().get()] = ga;
    g[b.node().get()] = gb;
    opt.step(params, g, 0.01);
  }
  std::vector<double> blob = opt.save_state();
  REQUIRE(blob.size() == 1 + 2 * (4 + 6));

  Adam opt2(params);
  opt2.load_state(blob);
  REQUIRE(opt2.save_state() == blob);
  REQUIRE(opt2.step_count() == 3);

  REQUIRE_THROWS_AS(opt2.load_state(std::vector<double>(5, 0.0)), DataError);
}
