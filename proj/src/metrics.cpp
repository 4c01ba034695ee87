#include "s2l/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "s2l/error.hpp"

namespace s2l::metrics {

double psnr(const Image& a, const Image& b, const Mask& mask) {
  if (a.height != b.height || a.width != b.width) throw ConfigError("psnr: image sizes differ");
  if (!mask.empty() && mask.size() != a.plane()) throw ConfigError("psnr: mask size differs from image");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.plane(); ++i) {
    if (!mask.empty() && !mask[i]) continue;
    for (int c = 0; c < 3; ++c) {
      const std::size_t k = static_cast<std::size_t>(c) * a.plane() + i;
      const double d = static_cast<double>(a.pixels[k]) - b.pixels[k];
      acc += d * d;
    }
    n += 3;
  }
  if (n == 0) throw ConfigError("psnr: empty mask");
  const double mse = acc / static_cast<double>(n);
  if (mse < 1e-10) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
  constexpr int kSize = 11;
  constexpr double kSigma = 1.5, c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  if (a.height != b.height || a.width != b.width) throw ConfigError("ssim: image sizes differ");
  if (a.height < kSize || a.width < kSize) throw ConfigError("ssim: image smaller than the 11x11 window");
  double g[kSize], gsum = 0.0;
  for (int i = 0; i < kSize; ++i) {
    const double d = i - kSize / 2;
    g[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    gsum += g[i];
  }
  for (double& v : g) v /= gsum;
  const int h = a.height, w = a.width;
  std::vector<double> x(a.plane()), y(a.plane());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      x[static_cast<std::size_t>(r * w + c)] = a.gray(r, c);
      y[static_cast<std::size_t>(r * w + c)] = b.gray(r, c);
    }
  double total = 0.0;
  int count = 0;
  for (int r = 0; r + kSize <= h; ++r)
    for (int c = 0; c + kSize <= w; ++c) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < kSize; ++i)
        for (int j = 0; j < kSize; ++j) {
          const double wt = g[i] * g[j];
          const std::size_t k = static_cast<std::size_t>((r + i) * w + c + j);
          mx += wt * x[k];
          my += wt * y[k];
          sxx += wt * x[k] * x[k];
          syy += wt * y[k] * y[k];
          sxy += wt * (x[k] * y[k]);
        }
      const double vx = sxx - mx * mx, vy = syy - my * my, cov = sxy - mx * my;
      // Operands ordered so fused multiply-adds keep ssim(a,b) == ssim(b,a).
      const double lo = std::min(mx, my), hi = std::max(mx, my);
      const double v_lo = mx <= my ? vx : vy, v_hi = mx <= my ? vy : vx;
      total += ((2 * mx * my + c1) * (2 * cov + c2)) / ((lo * lo + hi * hi + c1) * (v_lo + v_hi + c2));
      ++count;
    }
  return total / count;
}

Box mouth_crop(const Box& mouth_box, int width, int height) { return mouth_box.dilated(0.25, width, height); }

ApertureEstimate estimate_aperture(const Image& img, const Box& box, std::optional<double> centre_x) {
  if (!box.inside(img.width, img.height)) throw ConfigError("estimate_aperture: box outside the image");
  const double thr = synth::kApertureThreshold;
  const int third = std::max(1, box.width / 3);
  int c0 = box.x0 + (box.width - third) / 2;
  if (centre_x) c0 = std::clamp(static_cast<int>(std::lround(*centre_x - (third - 1) / 2.0)), box.x0, box.x0 + box.width - third);
  ApertureEstimate est;
  double top = 0.0, bottom = 0.0;
  int cols = 0;
  for (int x = c0; x < c0 + third; ++x) {
    int darkest = -1;
    double darkest_v = thr;
    for (int y = box.y0; y < box.y0 + box.height; ++y) {
      const double v = img.gray(y, x);
      if (v < darkest_v) {
        darkest_v = v;
        darkest = y;
      }
    }
    if (darkest < 0) continue;
    int r0 = darkest, r1 = darkest;
    while (r0 > box.y0 && img.gray(r0 - 1, x) < thr) --r0;
    while (r1 < box.y0 + box.height - 1 && img.gray(r1 + 1, x) < thr) ++r1;
    // Sub-pixel boundaries at the linear threshold crossing between the last
    // bright and first dark sample; the run edge itself at the box border.
    double t = r0, b = r1;
    if (r0 > box.y0) {
      const double above = img.gray(r0 - 1, x), in = img.gray(r0, x);
      t = r0 - 1 + (above - thr) / (above - in);
    }
    if (r1 < box.y0 + box.height - 1) {
      const double below = img.gray(r1 + 1, x), in = img.gray(r1, x);
      b = r1 + 1 - (below - thr) / (below - in);
    }
    top += t;
    bottom += b;
    ++cols;
  }
  if (cols == 0) return est;
  est.found = true;
  est.top_y = top / cols;
  est.bottom_y = bottom / cols;
  est.x = c0 + (third - 1) / 2.0;
  return est;
}

double lmd_aperture(const Image& pred, const Box& mouth_box, const synth::Keypoints& truth) {
  const ApertureEstimate e = estimate_aperture(pred, mouth_box, 0.5 * (truth.top.x() + truth.bottom.x()));
  if (!e.found) return mouth_box.height;
  const double dt = std::hypot(e.x - truth.top.x(), e.top_y - truth.top.y());
  const double db = std::hypot(e.x - truth.bottom.x(), e.bottom_y - truth.bottom.y());
  return 0.5 * (dt + db);
}

std::vector<double> motion_heatmap(const std::vector<Image>& frames) {
  if (frames.size() < 2) throw ConfigError("motion_heatmap: need at least two frames");
  const int h = frames[0].height, w = frames[0].width;
  for (const Image& f : frames)
    if (f.height != h || f.width != w) throw ConfigError("motion_heatmap: frame sizes differ");
  const std::size_t plane = frames[0].plane();
  std::vector<double> mean(plane, 0.0), heat(plane, 0.0);
  std::vector<int> count(plane, 0);
  std::vector<std::uint8_t> varies(plane, 0);
  std::vector<float> first(plane, 0.0f);
  // Static pixels are exactly zero so max-normalization cannot amplify
  // rounding residue.
  for (const Image& f : frames)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (!f.valid(y, x)) continue;
        const std::size_t i = static_cast<std::size_t>(y * w + x);
        const float v = f.gray(y, x);
        if (count[i] == 0) first[i] = v;
        else if (v != first[i]) varies[i] = 1;
        mean[i] += v;
        ++count[i];
      }
  for (std::size_t i = 0; i < plane; ++i)
    if (count[i] > 0) mean[i] /= count[i];
  for (const Image& f : frames)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y * w + x);
        if (!f.valid(y, x) || !varies[i]) continue;
        const double d = f.gray(y, x) - mean[i];
        heat[i] += d * d;
      }
  double peak = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    if (!varies[i]) continue;
    heat[i] = std::sqrt(heat[i] / count[i]);
    peak = std::max(peak, heat[i]);
  }
  if (peak > 0.0)
    for (double& v : heat) v /= peak;
  return heat;
}

}  // namespace s2l::metrics
