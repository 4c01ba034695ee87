#include "s2l/geometry.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <limits>

#include "s2l/error.hpp"
#include "s2l/ops.hpp"

namespace s2l::geometry {

Pose::Pose(const Eigen::Matrix4d& m) : m_(m) {
  if (!m.allFinite()) throw ConfigError("pose has non-finite entries");
  if (m(3, 0) != 0.0 || m(3, 1) != 0.0 || m(3, 2) != 0.0 || m(3, 3) != 1.0)
    throw ConfigError("pose bottom row must be [0,0,0,1]");
  const Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).norm() >= 1e-6 || r.determinant() <= 0.0)
    throw ConfigError("pose rotation block is not a proper rotation");
}

Pose Pose::from_rt(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = r;
  m.topRightCorner<3, 1>() = t;
  return Pose(m);
}

Pose Pose::from_euler(double yaw, double pitch, double roll, const Eigen::Vector3d& t) {
  const Eigen::Matrix3d r = (Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()) *
                             Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX()) *
                             Eigen::AngleAxisd(roll, Eigen::Vector3d::UnitZ()))
                                .toRotationMatrix();
  return from_rt(r, t);
}

Pose Pose::operator*(const Pose& other) const {
  Pose out;
  out.m_ = m_ * other.m_;
  out.m_.row(3) << 0.0, 0.0, 0.0, 1.0;
  return out;
}

std::vector<double> Pose::row_major() const {
  std::vector<double> v(16);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) v[static_cast<std::size_t>(r * 4 + c)] = m_(r, c);
  return v;
}

Pose Pose::from_row_major(const std::vector<double>& v) {
  if (v.size() != 16) throw ConfigError("pose needs 16 values");
  Eigen::Matrix4d m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = v[static_cast<std::size_t>(r * 4 + c)];
  return Pose(m);
}

Pose invert_pose(const Pose& t) {
  const Eigen::Matrix3d rt = t.rotation().transpose();
  return Pose::from_rt(rt, -rt * t.translation());
}

Pose relative_pose(const Pose& observed, const Pose& canonical) { return observed * invert_pose(canonical); }

double rotation_angle(const Pose& t) {
  const double c = std::clamp((t.rotation().trace() - 1.0) / 2.0, -1.0, 1.0);
  return std::acos(c);
}

void Intrinsics::validate(int width, int height) const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("focal lengths must be positive");
  if (!(cx >= 0.0 && cx <= width - 1 && cy >= 0.0 && cy <= height - 1))
    throw ConfigError("principal point outside the image");
}

bool DepthMap::any_valid() const { return std::any_of(valid.begin(), valid.end(), [](auto v) { return v != 0; }); }

std::size_t DepthMap::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](auto v) { return v != 0; }));
}

MappedPoint map_point(const Pose& rel, const Intrinsics& k, double depth, const Eigen::Vector2d& p, double eps_z) {
  const Eigen::Vector3d x = depth * k.unproject(p.x(), p.y());
  const Eigen::Vector3d xt = rel.apply(x);
  MappedPoint out;
  out.depth = xt.z();
  if (!(xt.z() > eps_z)) return out;
  out.pixel = {k.fx * xt.x() / xt.z() + k.cx, k.fy * xt.y() / xt.z() + k.cy};
  out.valid = std::isfinite(out.pixel.x()) && std::isfinite(out.pixel.y());
  return out;
}

CorrespondenceField build_correspondence(const Pose& rel, const Intrinsics& k, const DepthMap& source_depth,
                                         int grid_height, int grid_width, double eps_z) {
  if (source_depth.height != grid_height || source_depth.width != grid_width ||
      source_depth.values.size() != static_cast<std::size_t>(grid_height) * static_cast<std::size_t>(grid_width))
    throw ConfigError("depth map " + std::to_string(source_depth.width) + "x" + std::to_string(source_depth.height) +
                      " does not match grid " + std::to_string(grid_width) + "x" + std::to_string(grid_height));
  CorrespondenceField corr;
  corr.height = grid_height;
  corr.width = grid_width;
  const std::size_t n = source_depth.values.size();
  corr.u.assign(n, 0.0);
  corr.v.assign(n, 0.0);
  corr.depth.assign(n, 0.0);
  corr.valid.assign(n, 0);
  for (int y = 0; y < grid_height; ++y)
    for (int x = 0; x < grid_width; ++x) {
      const std::size_t i = source_depth.index(y, x);
      if (!source_depth.valid[i]) continue;
      const MappedPoint m = map_point(rel, k, source_depth.values[i], {x, y}, eps_z);
      corr.u[i] = m.pixel.x();
      corr.v[i] = m.pixel.y();
      corr.depth[i] = m.depth;
      corr.valid[i] = m.valid && m.pixel.x() >= 0.0 && m.pixel.x() <= grid_width - 1 && m.pixel.y() >= 0.0 &&
                      m.pixel.y() <= grid_height - 1;
    }
  return corr;
}

Image backward_warp(const Image& src, const CorrespondenceField& corr) {
  Image out(corr.height, corr.width);
  out.mask.assign(out.plane(), 0);
  const int w = src.width;
  for (std::size_t i = 0; i < out.plane(); ++i) {
    if (!corr.valid[i]) continue;
    ad::BilinearTaps t;
    if (!ad::bilinear_taps(corr.u[i], corr.v[i], src.width, src.height, t)) continue;
    out.mask[i] = 1;
    for (int c = 0; c < Image::kChannels; ++c) {
      const float* p = src.pixels.data() + static_cast<std::size_t>(c) * src.plane() +
                       static_cast<std::size_t>(t.y0) * static_cast<std::size_t>(w) + static_cast<std::size_t>(t.x0);
      const double val = (1 - t.fy) * ((1 - t.fx) * p[0] + t.fx * p[1]) + t.fy * ((1 - t.fx) * p[w] + t.fx * p[w + 1]);
      out.pixels[static_cast<std::size_t>(c) * out.plane() + i] = static_cast<float>(val);
    }
  }
  return out;
}

ForwardWarp forward_warp(const Image& src, const DepthMap& source_depth, const Pose& rel, const Intrinsics& k,
                         double eps_z) {
  if (src.height != source_depth.height || src.width != source_depth.width)
    throw ConfigError("forward_warp: image and depth sizes differ");
  const int h = src.height, w = src.width;
  ForwardWarp out;
  out.image = Image(h, w);
  out.depth = DepthMap(h, w);
  std::vector<double> zbuf(static_cast<std::size_t>(h * w), std::numeric_limits<double>::infinity());
  std::vector<std::size_t> owner(static_cast<std::size_t>(h * w), 0);
  std::vector<std::uint8_t> hit(static_cast<std::size_t>(h * w), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = source_depth.index(y, x);
      if (!source_depth.valid[i] || !src.valid(y, x)) continue;
      const MappedPoint m = map_point(rel, k, source_depth.values[i], {x, y}, eps_z);
      if (!m.valid) continue;
      const int tx = static_cast<int>(std::floor(m.pixel.x() + 0.5));
      const int ty = static_cast<int>(std::floor(m.pixel.y() + 0.5));
      if (tx < 0 || ty < 0 || tx >= w || ty >= h) continue;
      const std::size_t j = source_depth.index(ty, tx);
      if (m.depth < zbuf[j]) {
        zbuf[j] = m.depth;
        owner[j] = i;
        hit[j] = 1;
      }
    }
  out.hole_mask.assign(static_cast<std::size_t>(h * w), 1);
  out.image.mask.assign(static_cast<std::size_t>(h * w), 0);
  for (std::size_t j = 0; j < hit.size(); ++j) {
    if (!hit[j]) continue;
    out.hole_mask[j] = 0;
    out.image.mask[j] = 1;
    out.depth.values[j] = zbuf[j];
    out.depth.valid[j] = 1;
    for (int c = 0; c < Image::kChannels; ++c)
      out.image.pixels[static_cast<std::size_t>(c) * out.image.plane() + j] =
          src.pixels[static_cast<std::size_t>(c) * src.plane() + owner[j]];
  }
  return out;
}

DepthMap complete_depth(const DepthMap& partial, const CompletionOptions& opts) {
  if (!partial.any_valid()) throw ConfigError("complete_depth: no valid depth to diffuse from");
  DepthMap out = partial;
  const int h = partial.height, w = partial.width;
  double mean = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < partial.values.size(); ++i)
    if (partial.valid[i]) {
      mean += partial.values[i];
      ++count;
    }
  mean /= static_cast<double>(count);
  std::vector<std::size_t> unknown;
  for (std::size_t i = 0; i < partial.values.size(); ++i)
    if (!partial.valid[i]) {
      unknown.push_back(i);
      out.values[i] = mean;
    }
  std::fill(out.valid.begin(), out.valid.end(), 1);
  if (unknown.empty()) return out;

  // Successive over-relaxation in a fixed raster order. The border reflects
  // (missing neighbours are dropped from the average).
  const double omega = 2.0 / (1.0 + std::sin(M_PI / std::max(h, w)));
  auto neighbour_mean = [&](std::size_t i) {
    const int y = static_cast<int>(i / static_cast<std::size_t>(w));
    const int x = static_cast<int>(i % static_cast<std::size_t>(w));
    double s = 0.0;
    int n = 0;
    if (x > 0) s += out.values[i - 1], ++n;
    if (x + 1 < w) s += out.values[i + 1], ++n;
    if (y > 0) s += out.values[i - static_cast<std::size_t>(w)], ++n;
    if (y + 1 < h) s += out.values[i + static_cast<std::size_t>(w)], ++n;
    return s / n;
  };
  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    for (std::size_t i : unknown) out.values[i] += omega * (neighbour_mean(i) - out.values[i]);
    if (sweep % 16 == 15) {
      double residual = 0.0;
      for (std::size_t i : unknown) residual = std::max(residual, std::abs(neighbour_mean(i) - out.values[i]));
      if (residual < opts.tolerance) return out;
    }
  }
  throw NumericalError("complete_depth did not converge");
}

std::vector<std::uint8_t> visibility_mask(const CorrespondenceField& corr, const DepthMap& target_depth,
                                          double rel_tol) {
  std::vector<std::uint8_t> vis(corr.valid.size(), 0);
  for (std::size_t i = 0; i < vis.size(); ++i) {
    if (!corr.valid[i]) continue;
    const int tx = static_cast<int>(std::floor(corr.u[i] + 0.5));
    const int ty = static_cast<int>(std::floor(corr.v[i] + 0.5));
    if (tx < 0 || ty < 0 || tx >= target_depth.width || ty >= target_depth.height) continue;
    const std::size_t j = target_depth.index(ty, tx);
    if (!target_depth.valid[j]) continue;
    vis[i] = std::abs(corr.depth[i] - target_depth.values[j]) <= rel_tol * target_depth.values[j];
  }
  return vis;
}

DiffWarp warp_by_log_depth(const ad::Var& src, const ad::Var& log_depth, const std::vector<std::uint8_t>& depth_valid,
                           const Box& box, const Pose& rel, const Intrinsics& k, double eps_z) {
  if (log_depth.shape() != ad::Shape{box.height, box.width} || depth_valid.size() != log_depth.size())
    throw ConfigError("warp_by_log_depth: depth does not match box");
  const int src_h = src.shape()[1], src_w = src.shape()[2];
  // Per-pixel ray direction R K^-1 p; the transformed point is depth * dir + t.
  ad::Tensor dx({box.height, box.width}), dy({box.height, box.width}), dz({box.height, box.width});
  const Eigen::Matrix3d r = rel.rotation();
  const Eigen::Vector3d t = rel.translation();
  for (int y = 0; y < box.height; ++y)
    for (int x = 0; x < box.width; ++x) {
      const Eigen::Vector3d d = r * k.unproject(box.x0 + x, box.y0 + y);
      const std::size_t i = static_cast<std::size_t>(y * box.width + x);
      dx[i] = d.x();
      dy[i] = d.y();
      dz[i] = d.z();
    }
  ad::Var depth = ad::exp(log_depth);
  ad::Var z = depth * ad::constant(dz) + t.z();
  // Points behind the guard are masked; clamping keeps their division finite.
  ad::Var zs = ad::clamp(z, eps_z, std::numeric_limits<double>::max());
  ad::Var u = (depth * ad::constant(dx) + t.x()) / zs * k.fx + k.cx;
  ad::Var v = (depth * ad::constant(dy) + t.y()) / zs * k.fy + k.cy;

  std::vector<std::uint8_t> mask(depth_valid.size(), 0);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double uu = u.value()[i], vv = v.value()[i];
    mask[i] = depth_valid[i] && z.value()[i] > eps_z && uu >= 0.0 && uu <= src_w - 1 && vv >= 0.0 && vv <= src_h - 1;
  }
  DiffWarp out;
  out.image = ad::bilinear_sample(src, u, v, mask, &out.mask);
  out.u = u;
  out.v = v;
  out.depth = z;
  return out;
}

}  // namespace s2l::geometry
