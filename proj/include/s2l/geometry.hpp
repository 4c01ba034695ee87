#pragma once

// Explicit mapping between canonical and observed head poses: rigid pose
// algebra, pinhole lifting/projection, dense correspondences, backward
// (bilinear) and forward (z-buffered) warping, and depth completion.
//
// Pixel coordinates put pixel centers on integers: column u, row v.
// A Pose maps head-frame points into camera coordinates; the camera looks
// down +z.

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <vector>

#include "s2l/autodiff.hpp"
#include "s2l/image.hpp"

namespace s2l::geometry {

inline constexpr double kDefaultEpsZ = 1e-6;

class Pose {
 public:
  Pose() : m_(Eigen::Matrix4d::Identity()) {}
  /// Validates the rigid-transform invariants.
  explicit Pose(const Eigen::Matrix4d& m);

  static Pose identity() { return Pose(); }
  static Pose from_rt(const Eigen::Matrix3d& r, const Eigen::Vector3d& t);
  static Pose translation(const Eigen::Vector3d& t) { return from_rt(Eigen::Matrix3d::Identity(), t); }
  /// Intrinsic Z-Y-X (yaw about y, pitch about x, roll about z) in radians.
  static Pose from_euler(double yaw, double pitch, double roll, const Eigen::Vector3d& t);

  const Eigen::Matrix4d& matrix() const { return m_; }
  Eigen::Matrix3d rotation() const { return m_.topLeftCorner<3, 3>(); }
  Eigen::Vector3d translation() const { return m_.topRightCorner<3, 1>(); }
  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return rotation() * x + translation(); }

  Pose operator*(const Pose& other) const;

  /// Row-major 16 values.
  std::vector<double> row_major() const;
  static Pose from_row_major(const std::vector<double>& v);

 private:
  Eigen::Matrix4d m_;
};

Pose invert_pose(const Pose& t);
/// T_{c->o} = T_o * T_c^-1.
Pose relative_pose(const Pose& observed, const Pose& canonical);
/// Rotation angle (radians) and translation norm of a relative pose.
double rotation_angle(const Pose& t);

struct Intrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  /// Throws ConfigError unless fx, fy > 0 and the principal point lies in the image.
  void validate(int width, int height) const;
  Eigen::Vector3d unproject(double u, double v) const {  // K^-1 [u v 1]
    return {(u - cx) / fx, (v - cy) / fy, 1.0};
  }
};

struct DepthMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> valid;

  DepthMap() = default;
  DepthMap(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h * w), 0.0), valid(static_cast<std::size_t>(h * w), 0) {}

  std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x); }
  bool any_valid() const;
  std::size_t valid_count() const;
};

struct CorrespondenceField {
  int height = 0;
  int width = 0;
  std::vector<double> u, v, depth;
  std::vector<std::uint8_t> valid;
};

struct MappedPoint {
  Eigen::Vector2d pixel;
  double depth = 0.0;
  bool valid = false;
};

/// Lifts pixel p at `depth`, applies `rel`, projects back. Invalid when the
/// transformed point has z <= eps_z.
MappedPoint map_point(const Pose& rel, const Intrinsics& k, double depth, const Eigen::Vector2d& p,
                      double eps_z = kDefaultEpsZ);

/// Dense map_point over every pixel of `source_depth`, whose size must equal
/// (grid_height, grid_width). Targets must land inside the same grid.
CorrespondenceField build_correspondence(const Pose& rel, const Intrinsics& k, const DepthMap& source_depth,
                                         int grid_height, int grid_width, double eps_z = kDefaultEpsZ);

/// Samples `src` at the correspondence targets. Output mask is the
/// correspondence validity and all bilinear taps in bounds; invalid pixels are 0.
Image backward_warp(const Image& src, const CorrespondenceField& corr);

struct ForwardWarp {
  Image image;
  /// True where no source pixel landed.
  std::vector<std::uint8_t> hole_mask;
  /// Z-buffer of the splatted depths (valid where a splat landed).
  DepthMap depth;
};

/// Nearest-pixel splatting with a z-buffer: the nearer depth wins, equal
/// depths keep the earlier source pixel in row-major order.
ForwardWarp forward_warp(const Image& src, const DepthMap& source_depth, const Pose& rel, const Intrinsics& k,
                         double eps_z = kDefaultEpsZ);

struct CompletionOptions {
  double tolerance = 1e-4;
  int max_sweeps = 200000;
};

/// Fills invalid pixels by harmonic (Laplacian) diffusion from the valid
/// region, reflecting at the image border. Valid pixels are kept exactly.
DepthMap complete_depth(const DepthMap& partial, const CompletionOptions& opts = {});

/// True where the correspondence target is not hidden behind the target
/// view's surface: |target_depth - D_target(target)| <= rel_tol * D_target.
std::vector<std::uint8_t> visibility_mask(const CorrespondenceField& corr, const DepthMap& target_depth,
                                          double rel_tol = 0.02);

/// Differentiable counterpart of build_correspondence + backward_warp for a
/// box of the source grid. `log_depth` is [box.height, box.width].
struct DiffWarp {
  ad::Var image;  // [3, box.height, box.width]
  ad::Var u, v, depth;
  std::vector<std::uint8_t> mask;
};

DiffWarp warp_by_log_depth(const ad::Var& src, const ad::Var& log_depth,
                           const std::vector<std::uint8_t>& depth_valid, const Box& box, const Pose& rel,
                           const Intrinsics& k, double eps_z = kDefaultEpsZ);

}  // namespace s2l::geometry
