#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "s2l/autodiff.hpp"
#include "s2l/image.hpp"
#include "s2l/synthdata.hpp"

namespace s2l::compose {

using Mask = std::vector<std::uint8_t>;

struct MouthPlacement {
  Box box;
  synth::Keypoints keypoints;

  /// Throws ConfigError unless the box lies in the frame and every keypoint
  /// lies in the box.
  void validate(int frame_width, int frame_height) const;
};

/// Copies valid mouth pixels into the placement box. Pixels outside the box
/// and invalid pixels keep the frame's values. `validity` is box-sized
/// (empty means all valid).
Image paste_mouth(const Image& frame, const Image& mouth, const MouthPlacement& placement, const Mask& validity);
/// Differentiable form over [3,H,W] frame and [3,h,w] mouth.
ad::Var paste_mouth(const ad::Var& frame, const ad::Var& mouth, const Box& box, const Mask& validity);

struct HoleConfig {
  double probability = 0.5;
  int min_holes = 3;
  int max_holes = 8;
  /// Area of each rectangle as a fraction of the image.
  double min_area = 0.02;
  double max_area = 0.10;

  void validate() const;
};

void to_json(nlohmann::json& j, const HoleConfig& c);
void from_json(const nlohmann::json& j, HoleConfig& c);

/// Seeded union of black rectangles, or all zeros when the sample is not
/// augmented.
Mask draw_holes(int height, int width, const HoleConfig& cfg, std::uint64_t seed);

struct HoleResult {
  Image image;
  Mask mask;
};

HoleResult hole_augment(const Image& image, const HoleConfig& cfg, std::uint64_t seed);
/// Zeroes every channel where mask is set.
ad::Var apply_holes(const ad::Var& image, const Mask& mask);

struct BlendConfig {
  int levels = 4;
  int base_channels = 32;
  /// Feed the hole mask as a fourth input channel.
  bool mask_input = false;

  void validate() const;
};

void to_json(nlohmann::json& j, const BlendConfig& c);
void from_json(const nlohmann::json& j, BlendConfig& c);

/// Convolutional encoder-decoder with skip connections. Each encoder level
/// halves the resolution; each decoder level doubles it and concatenates the
/// matching encoder activation. The residual head starts at zero.
class BlendParams {
 public:
  BlendParams() = default;
  BlendParams(const BlendConfig& cfg, std::uint64_t seed);

  const BlendConfig& config() const { return cfg_; }
  std::vector<ad::Var> parameters() const;

  std::vector<ad::Var> enc_w, enc_b, dec_w, dec_b;
  ad::Var head_w, head_b;

 private:
  BlendConfig cfg_;
};

/// clamp(pasted + tanh(residual(pasted)), 0, 1) for [3,H,W] input. H and W
/// must be divisible by 2^levels. `holes` is required when the config
/// feeds the mask and ignored otherwise.
ad::Var blend(const BlendParams& p, const ad::Var& pasted, const Mask& holes = {});
Image blend(const BlendParams& p, const Image& pasted, const Mask& holes = {});

}  // namespace s2l::compose
