#include <cmath>
#include <random>

#include "doctest.h"
#include "s2l/error.hpp"
#include "s2l/ops.hpp"
#include "s2l/optim.hpp"

using namespace s2l::ad;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

// Scalarize any output with fixed random weights so every output element
// contributes a distinct coefficient.
Var project(const Var& y, std::uint64_t seed = 99) {
  return sum(y * constant(random_tensor(y.shape(), seed)));
}

void check_op(const char* name, const std::function<Var(const Var&)>& f, const Tensor& point,
              double step = 1e-6) {
  CAPTURE(name);
  GradCheckOptions opts;
  opts.step = step;
  opts.tolerance = 1e-3;
  auto rep = grad_check(f, point, opts);
  CHECK(rep.kinks == 0);
  CHECK(rep.checked > 0);
  CHECK(rep.max_rel_error < 1e-3);
}

}  // namespace

TEST_CASE("backward of the identity is one") {
  Var p = parameter(Tensor::scalar(3.0));
  backward(p);
  CHECK(p.grad()[0] == 1.0);
}

TEST_CASE("backward of sum of squares") {
  Var p = parameter(Tensor({3}, {1, 2, 3}));
  backward(sum(square(p)));
  CHECK(p.grad()[0] == 2.0);
  CHECK(p.grad()[1] == 4.0);
  CHECK(p.grad()[2] == 6.0);
}

TEST_CASE("repeated backward accumulates into leaves") {
  Var p = parameter(Tensor({2}, {1, -2}));
  Var loss = sum(p * p * 0.5);
  backward(loss);
  backward(loss);
  CHECK(p.grad()[0] == doctest::Approx(2.0));
  CHECK(p.grad()[1] == doctest::Approx(-4.0));
}

TEST_CASE("backward rejects non-scalar losses") {
  Var p = parameter(Tensor({2}, {1, 2}));
  CHECK_THROWS_AS(backward(p * 2.0), s2l::ConfigError);
}

TEST_CASE("constants receive no gradient") {
  Var c = constant(Tensor({2}, {1, 2}));
  Var p = parameter(Tensor({2}, {3, 4}));
  Var loss = sum(c * p);
  CHECK_FALSE(c.requires_grad());
  backward(loss);
  CHECK(p.grad()[1] == 2.0);
}

TEST_CASE("broadcasting follows shapes and reduces gradients") {
  Var a = parameter(random_tensor({3, 4}, 1));
  Var row = parameter(random_tensor({1, 4}, 2));
  Var col = parameter(random_tensor({3, 1}, 3));
  Var y = (a + row) * col;
  CHECK(y.shape() == Shape{3, 4});
  backward(sum(y));
  for (int j = 0; j < 4; ++j) {
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) expect += col.value()[static_cast<std::size_t>(i)];
    CHECK(row.grad()[static_cast<std::size_t>(j)] == doctest::Approx(expect));
  }
  CHECK_THROWS_AS(add(parameter(Tensor({2, 3})), parameter(Tensor({3, 2}))), s2l::ConfigError);
}

TEST_CASE("grad_check on every differentiable op") {
  const Tensor p34 = random_tensor({3, 4}, 7);
  const Tensor pos34 = random_tensor({3, 4}, 8, 0.5, 2.0);

  check_op("add", [&](const Var& x) { return project(x + constant(p34)); }, p34);
  check_op("add-broadcast", [&](const Var& x) { return project(constant(p34) + x); },
           random_tensor({1, 4}, 9));
  check_op("sub", [&](const Var& x) { return project(constant(p34) - x); }, p34);
  check_op("mul", [&](const Var& x) { return project(x * x * constant(p34)); }, pos34);
  check_op("div", [&](const Var& x) { return project(constant(p34) / x); }, pos34);
  check_op("div-numerator", [&](const Var& x) { return project(x / constant(pos34)); }, p34);
  check_op("matmul-left",
           [&](const Var& x) { return project(matmul(x, constant(random_tensor({4, 5}, 10)))); },
           p34);
  check_op("matmul-right",
           [&](const Var& x) { return project(matmul(constant(random_tensor({2, 3}, 11)), x)); },
           p34);
  {
    const Tensor w45 = random_tensor({4, 5}, 12), b5 = random_tensor({5}, 13);
    check_op("linear-x", [&](const Var& x) { return project(linear(x, constant(w45), constant(b5))); }, p34);
    check_op("linear-w", [&](const Var& w) { return project(linear(constant(p34), w, constant(b5))); }, w45);
    check_op("linear-b", [&](const Var& b) { return project(linear(constant(p34), constant(w45), b)); }, b5);
  }
  check_op("sigmoid", [](const Var& x) { return project(sigmoid(x)); }, p34);
  check_op("relu", [](const Var& x) { return project(relu(x)); }, p34);
  check_op("tanh", [](const Var& x) { return project(tanh(x)); }, p34);
  check_op("sin", [](const Var& x) { return project(sin(x * 3.0)); }, p34);
  check_op("cos", [](const Var& x) { return project(cos(x * 3.0)); }, p34);
  check_op("exp", [](const Var& x) { return project(exp(x)); }, p34);
  check_op("log", [](const Var& x) { return project(log(x)); }, pos34);
  check_op("square", [](const Var& x) { return project(square(x)); }, p34);
  check_op("sqrt", [](const Var& x) { return project(sqrt(x)); }, pos34);
  check_op("clamp", [](const Var& x) { return project(clamp(x, -0.5, 0.5)); }, p34);
  check_op("sum", [](const Var& x) { return square(sum(x)); }, p34);
  check_op("mean", [](const Var& x) { return square(mean(x)); }, p34);
  check_op("reshape", [](const Var& x) { return project(reshape(x, {4, 3})); }, p34);
  check_op("concat-axis1",
           [&](const Var& x) { return project(concat({x, constant(p34), square(x)}, 1)); }, p34);
  check_op("concat-axis0", [&](const Var& x) { return project(concat({constant(p34), x}, 0)); },
           p34);
  check_op("slice_rows", [](const Var& x) { return project(slice_rows(x, 1, 2)); }, p34);

  const Tensor img = random_tensor({2, 6, 7}, 12);
  check_op("crop2d", [](const Var& x) { return project(crop2d(x, 1, 2, 3, 4)); }, img);
  check_op("embed2d", [](const Var& x) { return project(embed2d(x, 9, 10, 2, 1)); }, img);
  check_op("upsample2x", [](const Var& x) { return project(upsample2x(x)); }, img);
  check_op("spatial_mean",
           [](const Var& x) { return project(spatial_mean(reshape(x, {1, 2, 6, 7}))); }, img);

  const Tensor xin = random_tensor({2, 3, 7, 6}, 13);
  const Tensor w = random_tensor({4, 3, 3, 3}, 14);
  const Tensor b = random_tensor({4}, 15);
  for (int stride : {1, 2}) {
    Conv2dSpec spec{stride, 1};
    check_op("conv2d-input",
             [&](const Var& x) { return project(conv2d(x, constant(w), constant(b), spec)); }, xin);
    check_op("conv2d-weight",
             [&](const Var& x) { return project(conv2d(constant(xin), x, constant(b), spec)); }, w);
    check_op("conv2d-bias",
             [&](const Var& x) { return project(conv2d(constant(xin), constant(w), x, spec)); }, b);
  }
}

TEST_CASE("grad_check on bilinear sampling") {
  const Tensor src = random_tensor({3, 8, 9}, 21, 0.0, 1.0);
  // Coordinates away from integer cell edges so the sampled surface is smooth.
  Tensor u({4, 5}), v({4, 5});
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> frac(0.2, 0.8);
  std::uniform_int_distribution<int> cx(0, 7), cy(0, 6);
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = cx(rng) + frac(rng);
    v[i] = cy(rng) + frac(rng);
  }
  std::vector<std::uint8_t> mask(u.size(), 1);
  check_op("bilinear-src",
           [&](const Var& x) { return project(bilinear_sample(x, constant(u), constant(v), mask)); },
           src);
  check_op("bilinear-u",
           [&](const Var& x) { return project(bilinear_sample(constant(src), x, constant(v), mask)); },
           u);
  check_op("bilinear-v",
           [&](const Var& x) { return project(bilinear_sample(constant(src), constant(u), x, mask)); },
           v);
}

TEST_CASE("bilinear sampling at integer coordinates reproduces the source") {
  const Tensor src = random_tensor({1, 4, 5}, 31);
  Tensor u({4, 5}), v({4, 5});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 5; ++x) {
      u[static_cast<std::size_t>(y * 5 + x)] = x;
      v[static_cast<std::size_t>(y * 5 + x)] = y;
    }
  std::vector<std::uint8_t> mask(20, 1), out_mask;
  Var out = bilinear_sample(constant(src), constant(u), constant(v), mask, &out_mask);
  for (std::size_t i = 0; i < 20; ++i) {
    CHECK(out.value()[i] == src[i]);
    CHECK(out_mask[i] == 1);
  }
}

TEST_CASE("random three-layer composite matches finite differences") {
  const Tensor x = random_tensor({5, 6}, 41);
  const Tensor w1 = random_tensor({6, 8}, 42);
  const Tensor w2 = random_tensor({8, 8}, 43);
  const Tensor w3 = random_tensor({8, 2}, 44);
  auto net = [&](const Var& first) {
    Var h = tanh(matmul(constant(x), first));
    h = sigmoid(matmul(h, constant(w2)));
    return mean(square(matmul(h, constant(w3))));
  };
  auto rep = grad_check(net, w1);
  CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("grad_check reports") {
  SUBCASE("linear functions are exact") {
    GradCheckOptions opts;
    opts.step = 1e-2;
    auto rep = grad_check([](const Var& x) { return sum(x * 3.0 + 1.0); }, random_tensor({6}, 51), opts);
    CHECK(rep.max_rel_error < 1e-10);
    CHECK(rep.passed);
  }
  SUBCASE("sigmoid composite at zero") {
    Var x = parameter(Tensor::scalar(0.0));
    backward(sigmoid(x));
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
    GradCheckOptions opts;
    opts.tolerance = 1e-6;
    auto rep = grad_check([](const Var& v) { return sum(sigmoid(v * 2.0) * 0.5); },
                          Tensor::scalar(0.0), opts);
    CHECK(rep.passed);
  }
  SUBCASE("a kink at the point is unreliable, not a failure") {
    auto rep = grad_check([](const Var& x) { return sum(relu(x)); }, Tensor({1}, {0.0}));
    CHECK(rep.unreliable);
    CHECK(rep.kinks == 1);
    CHECK(rep.passed);
  }
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  Tensor p({3}, {1, 2, 3});
  Tensor g({3}, 0.0);
  OptimizerState st;
  adam_step({&p}, {&g}, st);
  CHECK(p[0] == 1.0);
  CHECK(p[2] == 3.0);
  CHECK(st.step == 1);
}

TEST_CASE("adam rejects shape mismatches") {
  Tensor p({3});
  Tensor g({2});
  OptimizerState st;
  CHECK_THROWS_AS(adam_step({&p}, {&g}, st), s2l::ConfigError);
}

TEST_CASE("adam descends x^2") {
  Var x = parameter(Tensor::scalar(1.0));
  Adam opt({x}, AdamHyper{0.1});
  for (int i = 0; i < 200; ++i) {
    backward(square(x));
    opt.step();
  }
  CHECK(std::abs(x.item()) < 0.05);
}

TEST_CASE("adam runs are bitwise reproducible") {
  auto run = [] {
    Var w = parameter(random_tensor({4, 3}, 61));
    const Tensor data = random_tensor({10, 4}, 62);
    Adam opt({w}, AdamHyper{0.01});
    for (int i = 0; i < 50; ++i) {
      backward(mean(square(tanh(matmul(constant(data), w)) - 0.3)));
      opt.step();
    }
    return w.value().storage();
  };
  CHECK(run() == run());
}
