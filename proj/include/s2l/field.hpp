#pragma once

// Speech-conditioned implicit appearance field over the canonical mouth
// region: an MLP from (encoded coordinate, speech feature, encoded time) to
// RGB in [0,1].

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "json.hpp"
#include "s2l/autodiff.hpp"
#include "s2l/image.hpp"

namespace s2l::field {

struct FieldConfig {
  int hidden_layers = 6;
  int hidden_units = 128;
  int coord_bands = 10;
  int time_bands = 4;
  int feature_dim = 64;
  /// Largest corner offset of a training rectangle, in pixels.
  double r_max = 1.0;

  int input_dim() const { return 2 + 4 * coord_bands + feature_dim + 1 + 2 * time_bands; }
  void validate() const;
};

void to_json(nlohmann::json& j, const FieldConfig& c);
void from_json(const nlohmann::json& j, FieldConfig& c);

/// [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]
/// per component, components concatenated.
std::vector<double> positional_encode(std::span<const double> x, int bands);

/// Differentiable form: x [N,D] -> [N, D * (1 + 2 * bands)], same layout per row.
ad::Var positional_encode(const ad::Var& x, int bands);

class FieldParams {
 public:
  FieldParams() = default;
  /// He-uniform hidden layers, zero output layer (the field starts at 0.5 gray).
  FieldParams(const FieldConfig& cfg, std::uint64_t seed);

  const FieldConfig& config() const { return cfg_; }
  std::vector<ad::Var> parameters() const;
  const std::vector<ad::Var>& weights() const { return weights_; }
  const std::vector<ad::Var>& biases() const { return biases_; }

 private:
  FieldConfig cfg_;
  std::vector<ad::Var> weights_;  // [in, out]
  std::vector<ad::Var> biases_;   // [out]
};

/// Batched field: coords [N,2] in normalized region units, features [N,F]
/// and times [N,1] -> rgb [N,3].
ad::Var eval_field(const FieldParams& p, const ad::Var& coords, const ad::Var& features, const ad::Var& times);

/// Single-point convenience wrapper.
std::array<double, 3> eval_field(const FieldParams& p, const std::array<double, 2>& x, std::span<const float> feature,
                                 double t);

/// Axis-aligned rectangle in normalized coordinates.
struct Rect {
  double x_lo, x_hi, y_lo, y_hi;
};

/// Corner weights S_n / S in corner order (lo,lo), (hi,lo), (lo,hi), (hi,hi)
/// using the area diagonally opposite each corner. Throws ConfigError for a
/// zero-area rectangle or a centre outside it.
std::array<double, 4> corner_weights(const std::array<double, 2>& centre, const Rect& rect);

/// Area-weighted average of the field at the four corners of `rect`.
std::array<double, 3> sample_continuous(const FieldParams& p, const std::array<double, 2>& centre, const Rect& rect,
                                        std::span<const float> feature, double t);

/// Maps pixel coordinates of `region` to [-1,1] per axis (pixel centres of
/// the first and last row/column land on -1 and 1).
std::array<double, 2> normalize_pixel(const Box& region, double px, double py);

struct MouthRender {
  ad::Var image;  // [3, region.height, region.width]
};

/// Renders the canonical mouth over `region`. Eval mode samples pixel
/// centres; train mode averages the four corners of a random rectangle per
/// pixel (corner offsets uniform in (0, r_max] pixels, seeded).
MouthRender render_canonical_mouth(const FieldParams& p, const Box& region, std::span<const float> feature, double t,
                                   bool train_mode, std::uint64_t seed);

/// Same as above with an explicit r_max override.
MouthRender render_canonical_mouth(const FieldParams& p, const Box& region, std::span<const float> feature, double t,
                                   bool train_mode, std::uint64_t seed, double r_max);

}  // namespace s2l::field
