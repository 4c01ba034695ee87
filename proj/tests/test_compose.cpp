#include <random>

#include "doctest.h"
#include "s2l/compose.hpp"
#include "s2l/error.hpp"
#include "s2l/losses.hpp"
#include "s2l/ops.hpp"
#include "s2l/optim.hpp"

using namespace s2l;
using namespace s2l::compose;
using ad::Tensor;
using ad::Var;

namespace {

Image solid(int h, int w, float v) { return Image(h, w, v); }

Image noise_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (float& p : img.pixels) p = u(rng);
  return img;
}

MouthPlacement placement(Box b) {
  MouthPlacement p;
  p.box = b;
  const double cx = b.x0 + (b.width - 1) / 2.0, cy = b.y0 + (b.height - 1) / 2.0;
  p.keypoints.left = {b.x0, cy};
  p.keypoints.right = {b.x0 + b.width - 1, cy};
  p.keypoints.top = {cx, b.y0};
  p.keypoints.bottom = {cx, b.y0 + b.height - 1};
  return p;
}

}  // namespace

TEST_CASE("paste_mouth examples") {
  const Image frame = noise_image(20, 24, 1);
  const Box box{5, 7, 10, 6};
  const auto pl = placement(box);
  pl.validate(24, 20);

  const Image own = frame.crop(box);
  CHECK(paste_mouth(frame, own, pl, {}).pixels == frame.pixels);

  const Image other = noise_image(6, 10, 2);
  CHECK(paste_mouth(frame, other, pl, Mask(60, 0)).pixels == frame.pixels);

  Image checker(6, 10);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 10; ++x)
      for (int c = 0; c < 3; ++c) checker.at(c, y, x) = ((x + y) % 2) ? 1.0f : 0.0f;
  const Image out = paste_mouth(solid(20, 24, 0.3f), checker, pl, {});
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 24; ++x)
      for (int c = 0; c < 3; ++c) {
        const float want = box.contains(x, y) ? checker.at(c, y - box.y0, x - box.x0) : 0.3f;
        REQUIRE(out.at(c, y, x) == want);
      }

  // Partial validity and the differentiable form agree with the image form.
  Mask valid(60);
  for (std::size_t i = 0; i < valid.size(); ++i) valid[i] = (i % 3) != 0;
  const Image img_form = paste_mouth(frame, other, pl, valid);
  const Var var_form = paste_mouth(ad::constant(to_tensor(frame)), ad::constant(to_tensor(other)), box, valid);
  for (std::size_t i = 0; i < img_form.pixels.size(); ++i)
    REQUIRE(var_form.value()[i] == doctest::Approx(img_form.pixels[i]).epsilon(1e-7));

  CHECK_THROWS_AS(paste_mouth(frame, noise_image(6, 10, 3), placement(Box{20, 7, 10, 6}), {}), ConfigError);
  CHECK_THROWS_AS(paste_mouth(frame, noise_image(5, 10, 3), pl, {}), ConfigError);
  MouthPlacement bad = pl;
  bad.keypoints.top = {0.0, 0.0};
  CHECK_THROWS_AS(bad.validate(24, 20), ConfigError);
}

TEST_CASE("paste_mouth gradient reaches only pasted pixels") {
  const Box box{2, 3, 4, 5};
  Mask valid(20, 1);
  valid[0] = 0;
  Var frame = ad::parameter(to_tensor(noise_image(10, 9, 4)));
  Var mouth = ad::parameter(to_tensor(noise_image(5, 4, 5)));
  ad::backward(ad::sum(paste_mouth(frame, mouth, box, valid)));
  CHECK(mouth.grad()[0] == 0.0);
  CHECK(mouth.grad()[1] == 1.0);
  CHECK(frame.grad()[static_cast<std::size_t>(3 * 9 + 2)] == 1.0);  // invalid mouth pixel keeps the frame
  CHECK(frame.grad()[static_cast<std::size_t>(3 * 9 + 3)] == 0.0);
  CHECK(frame.grad()[0] == 1.0);
}

TEST_CASE("hole_augment examples") {
  const Image img = noise_image(64, 64, 6);
  HoleConfig cfg;
  cfg.probability = 0.0;
  auto r = hole_augment(img, cfg, 1);
  CHECK(r.image.pixels == img.pixels);
  CHECK(std::none_of(r.mask.begin(), r.mask.end(), [](auto m) { return m != 0; }));

  cfg.probability = 1.0;
  const auto a = hole_augment(img, cfg, 42), b = hole_augment(img, cfg, 42);
  CHECK(a.mask == b.mask);
  CHECK(a.image.pixels == b.image.pixels);
  for (std::size_t i = 0; i < a.mask.size(); ++i) {
    if (a.mask[i]) REQUIRE(a.image.pixels[i] == 0.0f);
    else REQUIRE(a.image.pixels[i] == img.pixels[i]);
  }

  // Union coverage lies between one smallest and max_holes largest
  // rectangles; the slack covers rounding rectangle sides to whole pixels.
  const int n = 128;
  const double slack = 2.0 * (n + 1) / (n * n);
  double mean = 0.0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Mask m = draw_holes(n, n, cfg, s);
    const double frac = static_cast<double>(std::count(m.begin(), m.end(), 1)) / (n * n);
    REQUIRE(frac >= cfg.min_area - slack);
    REQUIRE(frac <= cfg.max_holes * cfg.max_area + slack);
    mean += frac / 1000;
  }
  CHECK(mean > cfg.min_area * cfg.min_holes * 0.5);

  cfg.probability = 0.5;
  int augmented = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const Mask m = draw_holes(16, 16, cfg, s);
    augmented += std::any_of(m.begin(), m.end(), [](auto v) { return v != 0; });
  }
  CHECK(augmented > 450);
  CHECK(augmented < 550);

  cfg.max_area = 1.5;
  CHECK_THROWS_AS(draw_holes(8, 8, cfg, 0), ConfigError);
}

TEST_CASE("blend examples") {
  const BlendParams p(BlendConfig{}, 3);
  const Image img = noise_image(32, 48, 7);
  const Image out = blend(p, img);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) REQUIRE(out.pixels[i] == img.pixels[i]);
  CHECK(blend(p, img).pixels == out.pixels);
  CHECK_THROWS_AS(blend(p, noise_image(24, 48, 1)), ConfigError);

  BlendConfig mcfg;
  mcfg.mask_input = true;
  const BlendParams pm(mcfg, 3);
  CHECK_THROWS_AS(blend(pm, img), ConfigError);
  CHECK(blend(pm, img, Mask(32 * 48, 1)).pixels == img.pixels);

  // A large random head keeps outputs in range.
  BlendParams loud(BlendConfig{}, 4);
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 3.0);
  for (double& v : loud.head_w.mutable_value().values()) v = g(rng);
  const Image wild = blend(loud, img);
  for (float v : wild.pixels) REQUIRE((v >= 0.0f && v <= 1.0f));
  double residual = 0.0;
  for (std::size_t i = 0; i < img.pixels.size(); ++i) residual += std::abs(wild.pixels[i] - img.pixels[i]);
  CHECK(residual > 0.0);
}

TEST_CASE("blend gradients") {
  BlendConfig cfg;
  cfg.levels = 2;
  cfg.base_channels = 3;
  BlendParams p(cfg, 8);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g(0.0, 0.05);
  for (double& v : p.head_w.mutable_value().values()) v = g(rng);
  Tensor x({3, 8, 8});
  std::uniform_real_distribution<double> u(0.3, 0.7);
  for (double& v : x.values()) v = u(rng);
  const auto rep = ad::grad_check([&](const Var& in) { return ad::sum(ad::square(blend(p, in))); }, x);
  CHECK(rep.kinks < rep.checked / 10);
  CHECK(rep.max_rel_error < 1e-3);
  const Tensor w0 = p.enc_w[0].value();
  const auto rep_w = ad::grad_check(
      [&](const Var& w) {
        BlendParams q = p;
        q.enc_w[0] = w;
        return ad::sum(ad::square(blend(q, ad::constant(x))));
      },
      w0);
  CHECK(rep_w.max_rel_error < 1e-3);
}

TEST_CASE("blend learns to fill holes") {
  // Smooth gradients with sinusoidal texture; holes punched at random.
  auto scene = [](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double a = u(rng), b = u(rng), ph = 6.28 * u(rng);
    Image img(32, 32);
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x)
        for (int c = 0; c < 3; ++c)
          img.at(c, y, x) = static_cast<float>(0.3 + 0.2 * a * x / 31 + 0.2 * b * y / 31 + 0.1 * std::sin(0.4 * x + ph + c));
    return img;
  };
  BlendConfig cfg;
  cfg.levels = 3;
  cfg.base_channels = 12;
  BlendParams p(cfg, 11);
  ad::Adam opt(p.parameters(), {3e-3});
  HoleConfig holes;
  holes.probability = 1.0;
  for (int step = 0; step < 150; ++step) {
    const Image gt = scene(static_cast<std::uint64_t>(step));
    const auto aug = hole_augment(gt, holes, 1000 + static_cast<std::uint64_t>(step));
    ad::backward(losses::l2_image(blend(p, ad::constant(to_tensor(aug.image))), ad::constant(to_tensor(gt))));
    opt.step();
  }
  double blended = 0.0, raw = 0.0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Image gt = scene(5000 + s);
    const auto aug = hole_augment(gt, holes, 9000 + s);
    const Var t = ad::constant(to_tensor(gt));
    blended += losses::l2_image(ad::constant(to_tensor(blend(p, aug.image))), t, aug.mask).item();
    raw += losses::l2_image(ad::constant(to_tensor(aug.image)), t, aug.mask).item();
  }
  CHECK(blended < 0.5 * raw);
}
