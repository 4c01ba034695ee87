#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "s2l/image.hpp"
#include "s2l/synthdata.hpp"

namespace s2l::metrics {

using Mask = std::vector<std::uint8_t>;

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over masked pixels and all channels, capped at 99 dB
/// when MSE < 1e-10. Throws ConfigError on a size mismatch or empty mask.
double psnr(const Image& a, const Image& b, const Mask& mask = {});

/// Mean local SSIM of the channel-mean gray images over every full 11x11
/// Gaussian window (sigma 1.5, K1 0.01, K2 0.03, L 1). Throws ConfigError
/// for images smaller than the window.
double ssim(const Image& a, const Image& b);

/// Metric crop: the mouth box grown by 25% on every side.
Box mouth_crop(const Box& mouth_box, int width, int height);

struct ApertureEstimate {
  bool found = false;
  double top_y = 0.0;
  double bottom_y = 0.0;
  double x = 0.0;
};

/// Column-wise dark-aperture extent over the central third of the box: in
/// each column the dark run holding the darkest pixel, with boundaries
/// placed at the interpolated threshold crossing, averaged over columns.
/// The band is centred on `centre_x` when given (clamped into the box), else
/// on the box; x is the band centre.
ApertureEstimate estimate_aperture(const Image& img, const Box& mouth_box, std::optional<double> centre_x = {});

/// Mean distance between estimated and true top/bottom lip keypoints, with
/// the column band centred on the true lip midline: a yawed head moves the
/// midline off the box centre. Returns the box height when no aperture is
/// found.
double lmd_aperture(const Image& pred, const Box& mouth_box, const synth::Keypoints& truth);

/// Per-pixel temporal standard deviation of gray intensity divided by its
/// maximum. Pixels count only in frames where they are valid; pixels valid
/// in fewer than two frames get 0. An all-static input stays all zero.
std::vector<double> motion_heatmap(const std::vector<Image>& frames);

}  // namespace s2l::metrics
