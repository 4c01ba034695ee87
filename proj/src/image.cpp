#include "s2l/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "s2l/error.hpp"

namespace s2l {

Box Box::dilated(double fraction, int image_width, int image_height) const {
  const int dx = static_cast<int>(std::lround(fraction * width));
  const int dy = static_cast<int>(std::lround(fraction * height));
  Box b{std::max(0, x0 - dx), std::max(0, y0 - dy), 0, 0};
  b.width = std::min(image_width, x0 + width + dx) - b.x0;
  b.height = std::min(image_height, y0 + height + dy) - b.y0;
  return b;
}

Image::Image(int h, int w, float fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(kChannels) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

Image Image::crop(const Box& box) const {
  if (!box.inside(width, height)) throw ConfigError("crop box outside image");
  Image out(box.height, box.width);
  for (int c = 0; c < kChannels; ++c)
    for (int y = 0; y < box.height; ++y)
      for (int x = 0; x < box.width; ++x) out.at(c, y, x) = at(c, box.y0 + y, box.x0 + x);
  if (!mask.empty()) {
    out.mask.resize(out.plane());
    for (int y = 0; y < box.height; ++y)
      for (int x = 0; x < box.width; ++x)
        out.mask[static_cast<std::size_t>(y * box.width + x)] =
            mask[static_cast<std::size_t>((box.y0 + y) * width + box.x0 + x)];
  }
  return out;
}

ad::Tensor to_tensor(const Image& img) {
  ad::Tensor t({Image::kChannels, img.height, img.width});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) t[i] = img.pixels[i];
  return t;
}

Image from_tensor(const ad::Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != Image::kChannels)
    throw ConfigError("from_tensor expects [3,H,W], got " + ad::shape_str(t.shape()));
  Image img(t.dim(1), t.dim(2));
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = static_cast<float>(t[i]);
  return img;
}

namespace {

std::uint8_t to_u8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

void write_png_rows(const std::filesystem::path& path, int height, int width, int color_type,
                    int bit_depth, const std::vector<std::uint8_t>& bytes, std::size_t row_bytes) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng write failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * row_bytes));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png_rows(const std::filesystem::path& path, int& height, int& width,
                                        int want_color, int want_depth) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng init failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng read failed for " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color != want_color || depth != want_depth) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unexpected PNG format in " + path.string());
  }
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  std::vector<std::uint8_t> bytes(row_bytes * static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) png_read_row(png, bytes.data() + static_cast<std::size_t>(y) * row_bytes, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return bytes;
}

}  // namespace

void write_png(const std::filesystem::path& path, const Image& img) {
  std::vector<std::uint8_t> bytes(img.plane() * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        bytes[(static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width) + static_cast<std::size_t>(x)) * 3 +
              static_cast<std::size_t>(c)] = to_u8(img.at(c, y, x));
  write_png_rows(path, img.height, img.width, PNG_COLOR_TYPE_RGB, 8, bytes,
                 static_cast<std::size_t>(img.width) * 3);
}

Image read_png(const std::filesystem::path& path) {
  int h = 0, w = 0;
  auto bytes = read_png_rows(path, h, w, PNG_COLOR_TYPE_RGB, 8);
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) =
            static_cast<float>(bytes[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) * 3 +
                                     static_cast<std::size_t>(c)]) /
            255.0f;
  return img;
}

void write_png16(const std::filesystem::path& path, int height, int width,
                 const std::vector<std::uint16_t>& values) {
  if (values.size() != static_cast<std::size_t>(height) * static_cast<std::size_t>(width))
    throw ConfigError("write_png16: size mismatch");
  std::vector<std::uint8_t> bytes(values.size() * 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    bytes[2 * i] = static_cast<std::uint8_t>(values[i] >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<std::uint8_t>(values[i] & 0xff);
  }
  write_png_rows(path, height, width, PNG_COLOR_TYPE_GRAY, 16, bytes, static_cast<std::size_t>(width) * 2);
}

std::vector<std::uint16_t> read_png16(const std::filesystem::path& path, int& height, int& width) {
  auto bytes = read_png_rows(path, height, width, PNG_COLOR_TYPE_GRAY, 16);
  std::vector<std::uint16_t> values(bytes.size() / 2);
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = static_cast<std::uint16_t>((bytes[2 * i] << 8) | bytes[2 * i + 1]);
  return values;
}

Image quantize8(const Image& img) {
  Image out = img;
  for (float& v : out.pixels) v = static_cast<float>(to_u8(v)) / 255.0f;
  return out;
}

}  // namespace s2l
