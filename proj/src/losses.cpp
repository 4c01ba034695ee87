#include "s2l/losses.hpp"

#include <cmath>
#include <random>

#include "s2l/error.hpp"
#include "s2l/ops.hpp"

namespace s2l::losses {

using ad::Tensor;
using ad::Var;

void LossWeights::validate() const {
  if (m < 0 || w < 0 || d < 0 || s < 0) throw ConfigError("loss weights must be nonnegative");
  if (m + w + d + s <= 0) throw ConfigError("at least one loss weight must be positive");
}

void to_json(nlohmann::json& j, const LossWeights& w) { j = {{"m", w.m}, {"w", w.w}, {"d", w.d}, {"s", w.s}}; }

void from_json(const nlohmann::json& j, LossWeights& w) {
  w = LossWeights{};
  w.m = j.value("m", w.m);
  w.w = j.value("w", w.w);
  w.d = j.value("d", w.d);
  w.s = j.value("s", w.s);
}

namespace {

void check_image_pair(const Var& a, const Var& b, const char* who) {
  if (a.shape() != b.shape() || a.value().rank() != 3)
    throw ConfigError(std::string(who) + ": images must share a [C,H,W] shape, got " + ad::shape_str(a.shape()) +
                      " and " + ad::shape_str(b.shape()));
}

std::size_t plane_of(const Var& a) { return static_cast<std::size_t>(a.shape()[1]) * static_cast<std::size_t>(a.shape()[2]); }

struct Extractor {
  std::vector<Var> w, b;
  std::vector<int> stride;
};

const Extractor& extractor() {
  static const Extractor e = [] {
    Extractor x;
    std::mt19937_64 rng(0x9e3779b97f4a7c15ull);
    const int chans[4] = {3, 8, 16, 16};
    for (int l = 0; l < 3; ++l) {
      const int in = chans[l], out = chans[l + 1];
      Tensor w({out, in, 3, 3}), b({out});
      std::normal_distribution<double> g(0.0, std::sqrt(2.0 / (in * 9)));
      for (double& v : w.values()) v = g(rng);
      x.w.push_back(ad::constant(std::move(w)));
      x.b.push_back(ad::constant(std::move(b)));
      x.stride.push_back(l == 0 ? 1 : 2);
    }
    return x;
  }();
  return e;
}

}  // namespace

Var apply_mask(const Var& img, const Mask& mask) {
  if (mask.empty()) return img;
  const std::size_t plane = plane_of(img);
  if (mask.size() != plane) throw ConfigError("mask size does not match image");
  Tensor m({1, img.shape()[1], img.shape()[2]});
  for (std::size_t i = 0; i < plane; ++i) m[i] = mask[i] ? 1.0 : 0.0;
  return img * ad::constant(std::move(m));
}

Var l2_image(const Var& a, const Var& b, const Mask& mask) {
  check_image_pair(a, b, "l2_image");
  const std::size_t plane = plane_of(a);
  if (!mask.empty() && mask.size() != plane) throw ConfigError("l2_image: mask size does not match image");
  const int channels = a.shape()[0];
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!mask.empty() && !mask[i]) continue;
    ++count;
    for (int c = 0; c < channels; ++c) {
      const std::size_t k = static_cast<std::size_t>(c) * plane + i;
      const double d = a.value()[k] - b.value()[k];
      acc += d * d;
    }
  }
  if (count == 0) throw ConfigError("l2_image: empty mask");
  const double n = static_cast<double>(count * static_cast<std::size_t>(channels));
  const double rms = std::sqrt(acc / n);
  return ad::make_node(Tensor::scalar(rms), {a, b}, [mask, plane, channels, n, rms](ad::Node& self) {
    if (rms == 0.0) return;  // subgradient 0 at identical inputs
    ad::Node& pa = *self.parents[0];
    ad::Node& pb = *self.parents[1];
    const double s = self.grad[0] / (n * rms);
    for (std::size_t i = 0; i < plane; ++i) {
      if (!mask.empty() && !mask[i]) continue;
      for (int c = 0; c < channels; ++c) {
        const std::size_t k = static_cast<std::size_t>(c) * plane + i;
        const double g = s * (pa.value[k] - pb.value[k]);
        if (pa.requires_grad) pa.grad_buffer()[k] += g;
        if (pb.requires_grad) pb.grad_buffer()[k] -= g;
      }
    }
  });
}

Var perceptual_proxy(const Var& a, const Var& b) {
  check_image_pair(a, b, "perceptual_proxy");
  if (a.shape()[0] != 3 || a.shape()[1] < 16 || a.shape()[2] < 16)
    throw ConfigError("perceptual_proxy needs [3,H,W] with H,W >= 16, got " + ad::shape_str(a.shape()));
  const Extractor& e = extractor();
  const ad::Shape batched{1, 3, a.shape()[1], a.shape()[2]};
  Var fa = ad::reshape(a, batched), fb = ad::reshape(b, batched);
  Var total;
  for (std::size_t l = 0; l < e.w.size(); ++l) {
    fa = ad::relu(ad::conv2d(fa, e.w[l], e.b[l], {e.stride[l], 1}));
    fb = ad::relu(ad::conv2d(fb, e.w[l], e.b[l], {e.stride[l], 1}));
    Var term = ad::mean(ad::square(fa - fb));
    total = total.valid() ? total + term : term;
  }
  return total * (1.0 / static_cast<double>(e.w.size()));
}

Var loss_m(const Var& pred_mouth, const Var& warped_gt_mouth, const Mask& mask) {
  return perceptual_proxy(apply_mask(pred_mouth, mask), apply_mask(warped_gt_mouth, mask)) +
         l2_image(pred_mouth, warped_gt_mouth, mask);
}

Var loss_w(const Var& pred_frame, const Var& gt_frame) { return loss_m(pred_frame, gt_frame, {}); }

Var loss_d(const Var& warped_pred, const Var& canonical_gt, const Mask& mask) {
  return l2_image(warped_pred, canonical_gt, mask);
}

Var total_loss(const Var& l_m, const Var& l_w, const Var& l_d, const Var& l_s, const LossWeights& w) {
  w.validate();
  Var total;
  for (const auto& [part, weight] : {std::pair{l_m, w.m}, {l_w, w.w}, {l_d, w.d}, {l_s, w.s}}) {
    if (weight == 0.0) continue;  // no gradient path for disabled terms
    if (!part.valid()) throw ConfigError("total_loss: missing term with nonzero weight");
    Var term = part * weight;
    total = total.valid() ? total + term : term;
  }
  return total;
}

double total_loss(const std::array<double, 4>& parts, const LossWeights& w) {
  w.validate();
  return w.m * parts[0] + w.w * parts[1] + w.d * parts[2] + w.s * parts[3];
}

}  // namespace s2l::losses
