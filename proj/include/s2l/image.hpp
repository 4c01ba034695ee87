#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "s2l/tensor.hpp"

namespace s2l {

/// Axis-aligned pixel box, half-open: [x0, x0+width) x [y0, y0+height).
struct Box {
  int x0 = 0;
  int y0 = 0;
  int width = 0;
  int height = 0;

  bool contains(int x, int y) const { return x >= x0 && x < x0 + width && y >= y0 && y < y0 + height; }
  bool inside(int image_width, int image_height) const {
    return x0 >= 0 && y0 >= 0 && width > 0 && height > 0 && x0 + width <= image_width &&
           y0 + height <= image_height;
  }
  int area() const { return width * height; }
  /// Grown by `fraction` of its size on every side, clipped to the image.
  Box dilated(double fraction, int image_width, int image_height) const;
  bool operator==(const Box&) const = default;
};

/// Three-channel image, channel-major (CHW), values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;
  /// Optional per-pixel validity (H*W); empty means all valid.
  std::vector<std::uint8_t> mask;

  Image() = default;
  Image(int h, int w, float fill = 0.0f);

  static constexpr int kChannels = 3;
  std::size_t plane() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  float& at(int c, int y, int x) {
    return pixels[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  float at(int c, int y, int x) const {
    return pixels[static_cast<std::size_t>(c) * plane() + static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
                  static_cast<std::size_t>(x)];
  }
  bool valid(int y, int x) const {
    return mask.empty() || mask[static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)];
  }
  float gray(int y, int x) const { return (at(0, y, x) + at(1, y, x) + at(2, y, x)) / 3.0f; }

  Image crop(const Box& box) const;
};

ad::Tensor to_tensor(const Image& img);
/// Expects [3,H,W]; values are stored as float without clamping.
Image from_tensor(const ad::Tensor& t);

/// 8-bit RGB PNG; values are clamped and rounded.
void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

/// 16-bit grayscale PNG.
void write_png16(const std::filesystem::path& path, int height, int width,
                 const std::vector<std::uint16_t>& values);
std::vector<std::uint16_t> read_png16(const std::filesystem::path& path, int& height, int& width);

/// Image quantized exactly as write_png would store it.
Image quantize8(const Image& img);

}  // namespace s2l
