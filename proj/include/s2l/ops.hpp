#pragma once

// Differentiable operations. Elementwise binaries broadcast between operands
// of equal rank whose dims are equal or 1; a one-element operand broadcasts
// against anything. All reductions run in a fixed sequential order.

#include <cstdint>
#include <vector>

#include "s2l/autodiff.hpp"

namespace s2l::ad {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator-(const Var& a) { return neg(a); }

/// [M,K] x [K,N] -> [M,N].
Var matmul(const Var& a, const Var& b);
/// x [M,K] * w [K,N] + b [N] broadcast over rows.
Var linear(const Var& x, const Var& w, const Var& b);

Var sigmoid(const Var& a);
/// Subgradient 0 at the kink.
Var relu(const Var& a);
Var tanh(const Var& a);
Var sin(const Var& a);
Var cos(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);
Var sqrt(const Var& a);
/// Gradient passes where lo <= x <= hi.
Var clamp(const Var& a, double lo, double hi);

Var sum(const Var& a);
Var mean(const Var& a);

Var reshape(const Var& a, Shape shape);
Var concat(const std::vector<Var>& parts, int axis);

/// Rows [begin, begin+count) of the leading axis.
Var slice_rows(const Var& a, int begin, int count);

/// Crop of the two trailing axes: [..., H, W] -> [..., h, w] at (y0, x0).
Var crop2d(const Var& a, int y0, int x0, int h, int w);
/// Inverse of crop2d: places [..., h, w] at (y0, x0) inside zeros [..., H, W].
Var embed2d(const Var& a, int height, int width, int y0, int x0);

struct Conv2dSpec {
  int stride = 1;
  int pad = 0;
};

/// x [N,C,H,W], w [O,C,k,k], b [O] -> [N,O,Ho,Wo].
Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dSpec spec);
/// Nearest-neighbour 2x upsampling of the two trailing axes.
Var upsample2x(const Var& x);
/// [N,C,H,W] -> [N,C] averaged over H and W.
Var spatial_mean(const Var& x);

/// Bilinear sampling of src [C,H,W] at continuous pixel coordinates
/// (u = column, v = row) given per output pixel as [Ho,Wo] arrays.
/// Output [C,Ho,Wo]; pixels with mask == 0 are 0 and receive no gradient.
/// Differentiable with respect to src, u and v.
/// `out_mask`, when given, receives mask && all four taps in bounds.
Var bilinear_sample(const Var& src, const Var& u, const Var& v,
                    const std::vector<std::uint8_t>& mask,
                    std::vector<std::uint8_t>* out_mask = nullptr);

/// Bilinear tap setup shared with the non-differentiable warps. Returns false
/// when a tap with nonzero weight leaves [0,W-1]x[0,H-1].
struct BilinearTaps {
  int x0 = 0, y0 = 0;
  double fx = 0.0, fy = 0.0;
};
bool bilinear_taps(double u, double v, int width, int height, BilinearTaps& taps);

}  // namespace s2l::ad
