#include <cmath>
#include <random>

#include "doctest.h"
#include "s2l/error.hpp"
#include "s2l/field.hpp"
#include "s2l/ops.hpp"
#include "s2l/optim.hpp"

using namespace s2l;
using namespace s2l::field;

namespace {

FieldConfig small_config() {
  FieldConfig c;
  c.hidden_layers = 2;
  c.hidden_units = 8;
  c.coord_bands = 3;
  c.time_bands = 2;
  return c;
}

std::vector<float> random_feature(std::uint64_t seed, int dim = 64) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::vector<float> f(static_cast<std::size_t>(dim));
  for (float& v : f) v = u(rng);
  return f;
}

// Gives the zero-initialized output layer random weights so the field is
// spatially varying.
void randomize_output(FieldParams& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  ad::Var w = p.weights().back();
  for (double& v : w.mutable_value().values()) v = u(rng);
  ad::Var b = p.biases().back();
  for (double& v : b.mutable_value().values()) v = 0.2 * u(rng);
}

}  // namespace

TEST_CASE("positional_encode examples") {
  const std::vector<double> x{0.3, -0.7};
  CHECK(positional_encode(x, 0) == x);

  const std::vector<double> zero{0.0};
  const auto z = positional_encode(zero, 4);
  REQUIRE(z.size() == 9);
  CHECK(z[0] == 0.0);
  for (int l = 0; l < 4; ++l) {
    CHECK(z[static_cast<std::size_t>(1 + 2 * l)] == 0.0);
    CHECK(z[static_cast<std::size_t>(2 + 2 * l)] == 1.0);
  }

  const std::vector<double> half{0.5};
  const auto h = positional_encode(half, 1);
  CHECK(h[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(h[2]) < 1e-15);

  // Encoding width matches 2 + 4L for a 2D coordinate.
  CHECK(positional_encode(std::vector<double>{0.1, 0.2}, 10).size() == 2 + 4 * 10);
}

TEST_CASE("batched positional encoding agrees with the scalar form and has correct gradients") {
  const ad::Tensor x({3, 2}, {0.1, -0.4, 0.9, 0.25, -1.0, 0.6});
  const ad::Var enc = positional_encode(ad::constant(x), 3);
  for (int r = 0; r < 3; ++r) {
    const std::vector<double> row{x[static_cast<std::size_t>(2 * r)], x[static_cast<std::size_t>(2 * r + 1)]};
    const auto ref = positional_encode(row, 3);
    for (std::size_t k = 0; k < ref.size(); ++k) CHECK(enc.value()[static_cast<std::size_t>(r) * ref.size() + k] == ref[k]);
  }
  const ad::Tensor proj = [] {
    ad::Tensor t({3, 14});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::sin(1.0 + 0.37 * static_cast<double>(i));
    return t;
  }();
  const auto rep = ad::grad_check(
      [&](const ad::Var& v) { return ad::sum(positional_encode(v, 3) * ad::constant(proj)); }, x);
  CHECK(rep.kinks == 0);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("zero-initialized output layer gives 0.5 everywhere") {
  const FieldParams p(small_config(), 1);
  const auto a = random_feature(2);
  for (double x : {-1.0, 0.0, 0.7})
    for (double t : {0.0, 0.5, 1.0}) {
      const auto rgb = eval_field(p, {x, -x}, a, t);
      for (double c : rgb) CHECK(c == 0.5);
    }
  const MouthRender r = render_canonical_mouth(p, Box{3, 4, 7, 5}, a, 0.3, false, 0);
  CHECK(r.image.shape() == ad::Shape{3, 5, 7});
  for (double v : r.image.value().values()) CHECK(v == 0.5);
}

TEST_CASE("field evaluation is deterministic and bounded") {
  FieldParams p(small_config(), 3);
  randomize_output(p, 4);
  const auto a = random_feature(5);
  const auto x = eval_field(p, {0.2, -0.3}, a, 0.4), y = eval_field(p, {0.2, -0.3}, a, 0.4);
  CHECK(x == y);
  for (double c : x) {
    CHECK(c > 0.0);
    CHECK(c < 1.0);
  }
  FieldParams q(small_config(), 3);
  randomize_output(q, 4);
  CHECK(eval_field(q, {0.2, -0.3}, a, 0.4) == x);
}

TEST_CASE("corner weights are a partition of unity") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const Rect r{-u(rng), u(rng) + 1e-3, -u(rng), u(rng) + 1e-3};
    const std::array<double, 2> c{r.x_lo + u(rng) * (r.x_hi - r.x_lo), r.y_lo + u(rng) * (r.y_hi - r.y_lo)};
    const auto w = corner_weights(c, r);
    double s = 0.0;
    for (double v : w) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  CHECK_THROWS_AS(corner_weights({0, 0}, Rect{0, 0, -1, 1}), ConfigError);
  CHECK_THROWS_AS(corner_weights({2, 0}, Rect{-1, 1, -1, 1}), ConfigError);
}

TEST_CASE("sample_continuous examples") {
  FieldParams p(small_config(), 7);
  randomize_output(p, 8);
  const auto a = random_feature(9);
  const Rect r{-0.4, 0.3, -0.2, 0.5};

  // Centre at a corner returns that corner's value.
  const auto at_corner = sample_continuous(p, {r.x_hi, r.y_lo}, r, a, 0.1);
  const auto corner = eval_field(p, {r.x_hi, r.y_lo}, a, 0.1);
  for (int c = 0; c < 3; ++c) CHECK(at_corner[static_cast<std::size_t>(c)] == doctest::Approx(corner[static_cast<std::size_t>(c)]).epsilon(1e-12));

  // Constant field: any centre gives the constant.
  const FieldParams flat(small_config(), 10);
  for (double v : sample_continuous(flat, {0.0, 0.1}, r, a, 0.1)) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));

  // Independent bilinear interpolation of the four corner outputs.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 20; ++i) {
    const Rect q{-1.0 + u(rng), u(rng) + 0.05, -1.0 + u(rng), u(rng) + 0.05};
    const double tx = u(rng), ty = u(rng);
    const std::array<double, 2> centre{q.x_lo + tx * (q.x_hi - q.x_lo), q.y_lo + ty * (q.y_hi - q.y_lo)};
    const auto f00 = eval_field(p, {q.x_lo, q.y_lo}, a, 0.6), f10 = eval_field(p, {q.x_hi, q.y_lo}, a, 0.6);
    const auto f01 = eval_field(p, {q.x_lo, q.y_hi}, a, 0.6), f11 = eval_field(p, {q.x_hi, q.y_hi}, a, 0.6);
    const auto got = sample_continuous(p, centre, q, a, 0.6);
    for (std::size_t c = 0; c < 3; ++c) {
      const double want = (1 - tx) * (1 - ty) * f00[c] + tx * (1 - ty) * f10[c] + (1 - tx) * ty * f01[c] + tx * ty * f11[c];
      CHECK(got[c] == doctest::Approx(want).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(sample_continuous(p, {0, 0}, Rect{0, 0, 0, 1}, a, 0.0), ConfigError);
}

TEST_CASE("render_canonical_mouth train and eval modes") {
  FieldParams p(small_config(), 12);
  randomize_output(p, 13);
  const auto a = random_feature(14);
  const Box region{10, 20, 9, 6};
  const auto eval = render_canonical_mouth(p, region, a, 0.2, false, 0);
  const auto t1 = render_canonical_mouth(p, region, a, 0.2, true, 99);
  const auto t2 = render_canonical_mouth(p, region, a, 0.2, true, 99);
  CHECK(t1.image.value().storage() == t2.image.value().storage());
  CHECK(render_canonical_mouth(p, region, a, 0.2, true, 100).image.value().storage() != t1.image.value().storage());
  const auto tiny = render_canonical_mouth(p, region, a, 0.2, true, 99, 1e-7);
  double worst = 0.0, spread = 0.0;
  for (std::size_t i = 0; i < eval.image.size(); ++i) {
    worst = std::max(worst, std::abs(tiny.image.value()[i] - eval.image.value()[i]));
    spread = std::max(spread, std::abs(t1.image.value()[i] - eval.image.value()[i]));
  }
  CHECK(worst < 1e-6);
  CHECK(spread > worst);
  // Eval mode matches pointwise evaluation at normalized pixel centres.
  const auto c = normalize_pixel(region, region.x0 + 4, region.y0 + 5);
  CHECK(c[1] == doctest::Approx(1.0));
  const auto rgb = eval_field(p, c, a, 0.2);
  for (int ch = 0; ch < 3; ++ch)
    CHECK(eval.image.value()[static_cast<std::size_t>(ch * 54 + 5 * 9 + 4)] == doctest::Approx(rgb[static_cast<std::size_t>(ch)]).epsilon(1e-12));
}

TEST_CASE("field parameter gradients match central differences on a 2-layer, 8-unit net") {
  FieldParams p(small_config(), 15);
  randomize_output(p, 16);
  const auto a = random_feature(17);
  const Box region{0, 0, 5, 4};
  const ad::Tensor target = [] {
    ad::Tensor t({3, 4, 5});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.5 + 0.4 * std::sin(0.7 * static_cast<double>(i));
    return t;
  }();
  auto loss = [&] {
    const auto r = render_canonical_mouth(p, region, a, 0.35, true, 5);
    return ad::mean(ad::square(r.image - ad::constant(target)));
  };
  const auto params = p.parameters();
  for (const ad::Var& v : params) ad::Var(v).zero_grad();
  ad::backward(loss());
  const double h = 1e-4;
  double worst = 0.0;
  std::size_t checked = 0;
  for (const ad::Var& v : params) {
    ad::Var param = v;
    const ad::Tensor analytic = param.grad();
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double keep = param.value()[i];
      param.mutable_value()[i] = keep + h;
      const double fp = loss().item();
      param.mutable_value()[i] = keep - h;
      const double fm = loss().item();
      param.mutable_value()[i] = keep;
      const double fd = (fp - fm) / (2 * h);
      if (std::abs(fd) < 1e-9 && std::abs(analytic[i]) < 1e-9) continue;  // dead unit
      worst = std::max(worst, std::abs(fd - analytic[i]) / std::max(std::abs(fd), std::abs(analytic[i])));
      ++checked;
    }
  }
  CHECK(checked > 100);
  CHECK(worst < 1e-3);
}

TEST_CASE("field is differentiable in coordinates and speech features") {
  FieldParams p(small_config(), 18);
  randomize_output(p, 19);
  const ad::Tensor coords({2, 2}, {0.13, -0.42, 0.61, 0.27});
  ad::Tensor feats({2, 64});
  for (std::size_t i = 0; i < feats.size(); ++i) feats[i] = std::cos(0.3 * static_cast<double>(i));
  const ad::Tensor times({2, 1}, {0.2, 0.8});
  const ad::Tensor proj({2, 3}, {0.3, -0.8, 0.5, 1.1, 0.2, -0.4});
  const auto rc = ad::grad_check(
      [&](const ad::Var& x) {
        return ad::sum(eval_field(p, x, ad::constant(feats), ad::constant(times)) * ad::constant(proj));
      },
      coords);
  CHECK(rc.max_rel_error < 1e-3);
  const auto ra = ad::grad_check(
      [&](const ad::Var& f) {
        return ad::sum(eval_field(p, ad::constant(coords), f, ad::constant(times)) * ad::constant(proj));
      },
      feats);
  CHECK(ra.max_rel_error < 1e-3);
  CHECK(ra.kinks == 0);
}

TEST_CASE("field configuration validation") {
  FieldConfig c = small_config();
  CHECK(c.input_dim() == 2 + 4 * 3 + 64 + 1 + 2 * 2);
  c.r_max = 0.0;
  CHECK_THROWS_AS(FieldParams(c, 1), ConfigError);
  c = small_config();
  c.hidden_layers = 0;
  CHECK_THROWS_AS(FieldParams(c, 1), ConfigError);
  const nlohmann::json j = small_config();
  CHECK(j.get<FieldConfig>().hidden_units == 8);
}
