#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "s2l/autodiff.hpp"

namespace s2l::losses {

using Mask = std::vector<std::uint8_t>;

struct LossWeights {
  double m = 1.0;
  double w = 1.0;
  double d = 0.5;
  double s = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);

/// Root mean squared difference of [C,H,W] images over pixels where mask is
/// set (empty mask = all pixels). The gradient at zero difference is zero.
ad::Var l2_image(const ad::Var& a, const ad::Var& b, const Mask& mask = {});

/// Mean squared distance between the activations of a frozen, seeded
/// three-layer conv net, averaged over its layers. Inputs are [3,H,W] with
/// H, W >= 16.
ad::Var perceptual_proxy(const ad::Var& a, const ad::Var& b);

/// perceptual_proxy of the masked images plus masked l2_image.
ad::Var loss_m(const ad::Var& pred_mouth, const ad::Var& warped_gt_mouth, const Mask& mask);
/// loss_m over the whole frame.
ad::Var loss_w(const ad::Var& pred_frame, const ad::Var& gt_frame);
/// Masked l2_image between the canonical-warped frame and the canonical frame.
ad::Var loss_d(const ad::Var& warped_pred, const ad::Var& canonical_gt, const Mask& mask);

ad::Var total_loss(const ad::Var& l_m, const ad::Var& l_w, const ad::Var& l_d, const ad::Var& l_s,
                   const LossWeights& w);
double total_loss(const std::array<double, 4>& parts, const LossWeights& w);

/// Applies the mask to every channel: [C,H,W] * mask.
ad::Var apply_mask(const ad::Var& img, const Mask& mask);

}  // namespace s2l::losses
