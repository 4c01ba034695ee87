#include "s2l/compose.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "s2l/error.hpp"
#include "s2l/ops.hpp"

namespace s2l::compose {

using ad::Tensor;
using ad::Var;

void MouthPlacement::validate(int frame_width, int frame_height) const {
  if (!box.inside(frame_width, frame_height)) throw ConfigError("mouth placement box lies outside the frame");
  for (const Eigen::Vector2d& k : {keypoints.left, keypoints.right, keypoints.top, keypoints.bottom}) {
    if (k.x() < box.x0 - 0.5 || k.x() > box.x0 + box.width - 0.5 || k.y() < box.y0 - 0.5 ||
        k.y() > box.y0 + box.height - 0.5)
      throw ConfigError("mouth keypoint lies outside the placement box");
  }
}

Image paste_mouth(const Image& frame, const Image& mouth, const MouthPlacement& placement, const Mask& validity) {
  const Box& b = placement.box;
  if (!b.inside(frame.width, frame.height)) throw ConfigError("paste_mouth: box out of bounds");
  if (mouth.width != b.width || mouth.height != b.height) throw ConfigError("paste_mouth: mouth size differs from box");
  if (!validity.empty() && validity.size() != mouth.plane()) throw ConfigError("paste_mouth: validity size differs from box");
  Image out = frame;
  for (int y = 0; y < b.height; ++y)
    for (int x = 0; x < b.width; ++x) {
      if (!validity.empty() && !validity[static_cast<std::size_t>(y * b.width + x)]) continue;
      for (int c = 0; c < 3; ++c) out.at(c, b.y0 + y, b.x0 + x) = mouth.at(c, y, x);
    }
  return out;
}

Var paste_mouth(const Var& frame, const Var& mouth, const Box& box, const Mask& validity) {
  const auto& fs = frame.shape();
  if (fs.size() != 3 || fs[0] != 3) throw ConfigError("paste_mouth: frame must be [3,H,W]");
  if (!box.inside(fs[2], fs[1])) throw ConfigError("paste_mouth: box out of bounds");
  if (mouth.shape() != ad::Shape{3, box.height, box.width}) throw ConfigError("paste_mouth: mouth size differs from box");
  if (!validity.empty() && validity.size() != static_cast<std::size_t>(box.area()))
    throw ConfigError("paste_mouth: validity size differs from box");
  Tensor keep({1, fs[1], fs[2]}, 1.0), take({1, box.height, box.width}, 1.0);
  for (int y = 0; y < box.height; ++y)
    for (int x = 0; x < box.width; ++x) {
      const bool v = validity.empty() || validity[static_cast<std::size_t>(y * box.width + x)];
      take[static_cast<std::size_t>(y * box.width + x)] = v ? 1.0 : 0.0;
      keep[static_cast<std::size_t>((box.y0 + y) * fs[2] + box.x0 + x)] = v ? 0.0 : 1.0;
    }
  Var placed = ad::embed2d(mouth * ad::constant(take), fs[1], fs[2], box.y0, box.x0);
  return frame * ad::constant(keep) + placed;
}

void HoleConfig::validate() const {
  if (!(probability >= 0.0 && probability <= 1.0)) throw ConfigError("hole probability must lie in [0,1]");
  if (min_holes < 1 || max_holes < min_holes) throw ConfigError("hole counts need 1 <= min_holes <= max_holes");
  if (!(min_area > 0.0) || max_area < min_area || max_area > 1.0)
    throw ConfigError("hole areas need 0 < min_area <= max_area <= 1");
}

void to_json(nlohmann::json& j, const HoleConfig& c) {
  j = {{"probability", c.probability}, {"min_holes", c.min_holes}, {"max_holes", c.max_holes},
       {"min_area", c.min_area},       {"max_area", c.max_area}};
}

void from_json(const nlohmann::json& j, HoleConfig& c) {
  c = HoleConfig{};
  c.probability = j.value("probability", c.probability);
  c.min_holes = j.value("min_holes", c.min_holes);
  c.max_holes = j.value("max_holes", c.max_holes);
  c.min_area = j.value("min_area", c.min_area);
  c.max_area = j.value("max_area", c.max_area);
}

Mask draw_holes(int height, int width, const HoleConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (height < 1 || width < 1) throw ConfigError("draw_holes: empty image");
  Mask mask(static_cast<std::size_t>(height) * static_cast<std::size_t>(width), 0);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (!(unit(rng) < cfg.probability)) return mask;
  std::uniform_int_distribution<int> count(cfg.min_holes, cfg.max_holes);
  std::uniform_real_distribution<double> area(cfg.min_area, cfg.max_area), log_aspect(std::log(0.5), std::log(2.0));
  const int n = count(rng);
  const double total = static_cast<double>(height) * width;
  for (int i = 0; i < n; ++i) {
    const double a = area(rng) * total, r = std::exp(log_aspect(rng));
    const int w = std::clamp(static_cast<int>(std::lround(std::sqrt(a * r))), 1, width);
    const int h = std::clamp(static_cast<int>(std::lround(a / w)), 1, height);
    const int x0 = std::uniform_int_distribution<int>(0, width - w)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, height - h)(rng);
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) mask[static_cast<std::size_t>(y * width + x)] = 1;
  }
  return mask;
}

HoleResult hole_augment(const Image& image, const HoleConfig& cfg, std::uint64_t seed) {
  HoleResult r{image, draw_holes(image.height, image.width, cfg, seed)};
  for (std::size_t i = 0; i < r.mask.size(); ++i) {
    if (!r.mask[i]) continue;
    for (int c = 0; c < 3; ++c) r.image.pixels[static_cast<std::size_t>(c) * image.plane() + i] = 0.0f;
  }
  return r;
}

Var apply_holes(const Var& image, const Mask& mask) {
  const auto& s = image.shape();
  if (s.size() != 3) throw ConfigError("apply_holes: image must be [C,H,W]");
  if (mask.size() != static_cast<std::size_t>(s[1]) * static_cast<std::size_t>(s[2]))
    throw ConfigError("apply_holes: mask size differs from image");
  if (std::none_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; })) return image;
  Tensor keep({1, s[1], s[2]});
  for (std::size_t i = 0; i < mask.size(); ++i) keep[i] = mask[i] ? 0.0 : 1.0;
  return image * ad::constant(std::move(keep));
}

void BlendConfig::validate() const {
  if (levels < 1 || levels > 8) throw ConfigError("blend levels must lie in [1,8]");
  if (base_channels < 1) throw ConfigError("blend base_channels must be positive");
}

void to_json(nlohmann::json& j, const BlendConfig& c) {
  j = {{"levels", c.levels}, {"base_channels", c.base_channels}, {"mask_input", c.mask_input}};
}

void from_json(const nlohmann::json& j, BlendConfig& c) {
  c = BlendConfig{};
  c.levels = j.value("levels", c.levels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.mask_input = j.value("mask_input", c.mask_input);
}

namespace {

Var conv_weight(int out, int in, std::mt19937_64& rng) {
  Tensor w({out, in, 3, 3});
  const double bound = std::sqrt(6.0 / (in * 9));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : w.values()) v = u(rng);
  return ad::parameter(std::move(w));
}

}  // namespace

BlendParams::BlendParams(const BlendConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const int in = cfg.mask_input ? 4 : 3, c = cfg.base_channels;
  for (int l = 0; l < cfg.levels; ++l) {
    enc_w.push_back(conv_weight(c, l == 0 ? in : c, rng));
    enc_b.push_back(ad::parameter(Tensor({c})));
  }
  // Decoder level l consumes the upsampled features plus encoder level l-1
  // (the input itself for l = 0).
  for (int l = cfg.levels - 1; l >= 0; --l) {
    dec_w.push_back(conv_weight(c, c + (l == 0 ? in : c), rng));
    dec_b.push_back(ad::parameter(Tensor({c})));
  }
  head_w = ad::parameter(Tensor({3, c, 3, 3}));
  head_b = ad::parameter(Tensor({3}));
}

std::vector<Var> BlendParams::parameters() const {
  std::vector<Var> out;
  for (std::size_t i = 0; i < enc_w.size(); ++i) {
    out.push_back(enc_w[i]);
    out.push_back(enc_b[i]);
  }
  for (std::size_t i = 0; i < dec_w.size(); ++i) {
    out.push_back(dec_w[i]);
    out.push_back(dec_b[i]);
  }
  out.push_back(head_w);
  out.push_back(head_b);
  return out;
}

Var blend(const BlendParams& p, const Var& pasted, const Mask& holes) {
  const auto& s = pasted.shape();
  if (s.size() != 3 || s[0] != 3) throw ConfigError("blend: input must be [3,H,W]");
  const int h = s[1], w = s[2], levels = p.config().levels;
  if (h % (1 << levels) != 0 || w % (1 << levels) != 0)
    throw ConfigError("blend: image size " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by " +
                      std::to_string(1 << levels));
  Var x = pasted - 0.5;
  if (p.config().mask_input) {
    if (holes.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
      throw ConfigError("blend: hole mask required by the config");
    Tensor m({1, h, w});
    for (std::size_t i = 0; i < holes.size(); ++i) m[i] = holes[i] ? 1.0 : 0.0;
    x = ad::concat({x, ad::constant(std::move(m))}, 0);
  }
  x = ad::reshape(x, {1, x.shape()[0], h, w});
  std::vector<Var> skips{x};
  for (int l = 0; l < levels; ++l) skips.push_back(ad::relu(ad::conv2d(skips.back(), p.enc_w[static_cast<std::size_t>(l)],
                                                                      p.enc_b[static_cast<std::size_t>(l)], {2, 1})));
  Var y = skips.back();
  for (int k = 0; k < levels; ++k) {
    const int l = levels - 1 - k;
    y = ad::concat({ad::upsample2x(y), skips[static_cast<std::size_t>(l)]}, 1);
    y = ad::relu(ad::conv2d(y, p.dec_w[static_cast<std::size_t>(k)], p.dec_b[static_cast<std::size_t>(k)], {1, 1}));
  }
  Var residual = ad::reshape(ad::tanh(ad::conv2d(y, p.head_w, p.head_b, {1, 1})), {3, h, w});
  return ad::clamp(pasted + residual, 0.0, 1.0);
}

Image blend(const BlendParams& p, const Image& pasted, const Mask& holes) {
  return from_tensor(blend(p, ad::constant(to_tensor(pasted)), holes).value());
}

}  // namespace s2l::compose
