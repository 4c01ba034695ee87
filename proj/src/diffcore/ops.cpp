#include "s2l/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

#include "s2l/error.hpp"

namespace s2l::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// How the operands of an elementwise binary line up with the output.
struct Broadcast {
  enum Mode { kSame, kRightScalar, kLeftScalar, kGeneral } mode = kSame;
  Shape out;
  std::shared_ptr<std::vector<std::size_t>> ia, ib;
};

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] *
                                      static_cast<std::size_t>(s[static_cast<std::size_t>(i) + 1]);
  return st;
}

Broadcast plan_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast p;
  if (a.shape() == b.shape()) {
    p.mode = Broadcast::kSame;
    p.out = a.shape();
    return p;
  }
  if (b.size() == 1) {
    p.mode = Broadcast::kRightScalar;
    p.out = a.shape();
    return p;
  }
  if (a.size() == 1) {
    p.mode = Broadcast::kLeftScalar;
    p.out = b.shape();
    return p;
  }
  if (a.rank() != b.rank())
    throw ConfigError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) + " with " +
                      shape_str(b.shape()));
  p.mode = Broadcast::kGeneral;
  const std::size_t r = a.shape().size();
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    int da = a.shape()[i], db = b.shape()[i];
    if (da != db && da != 1 && db != 1)
      throw ConfigError(std::string(op) + ": cannot broadcast " + shape_str(a.shape()) +
                        " with " + shape_str(b.shape()));
    p.out[i] = std::max(da, db);
  }
  auto sa = strides_of(a.shape()), sb = strides_of(b.shape());
  for (std::size_t i = 0; i < r; ++i) {
    if (a.shape()[i] == 1) sa[i] = 0;
    if (b.shape()[i] == 1) sb[i] = 0;
  }
  const std::size_t n = shape_numel(p.out);
  p.ia = std::make_shared<std::vector<std::size_t>>(n);
  p.ib = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<int> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t k = 0; k < n; ++k) {
    (*p.ia)[k] = oa;
    (*p.ib)[k] = ob;
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      auto ud = static_cast<std::size_t>(d);
      if (++idx[ud] < p.out[ud]) {
        oa += sa[ud];
        ob += sb[ud];
        break;
      }
      oa -= sa[ud] * static_cast<std::size_t>(idx[ud] - 1);
      ob -= sb[ud] * static_cast<std::size_t>(idx[ud] - 1);
      idx[ud] = 0;
    }
  }
  return p;
}

inline std::size_t index_a(const Broadcast& p, std::size_t k) {
  switch (p.mode) {
    case Broadcast::kSame:
    case Broadcast::kRightScalar: return k;
    case Broadcast::kLeftScalar: return 0;
    default: return (*p.ia)[k];
  }
}

inline std::size_t index_b(const Broadcast& p, std::size_t k) {
  switch (p.mode) {
    case Broadcast::kSame:
    case Broadcast::kLeftScalar: return k;
    case Broadcast::kRightScalar: return 0;
    default: return (*p.ib)[k];
  }
}

// f(x, y) -> out; ga(x, y, out) = d out / dx; gb likewise.
template <class F, class GA, class GB>
Var binary(const Var& a, const Var& b, const char* name, F f, GA ga, GB gb) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Broadcast plan = plan_broadcast(av, bv, name);
  Tensor out(plan.out);
  const std::size_t n = out.size();
  if (plan.mode == Broadcast::kSame) {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(av[k], bv[k]);
  } else {
    for (std::size_t k = 0; k < n; ++k) out[k] = f(av[index_a(plan, k)], bv[index_b(plan, k)]);
  }
  return make_node(std::move(out), {a, b}, [plan, ga, gb](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const Tensor& g = self.grad;
    const Tensor& o = self.value;
    const std::size_t n = g.size();
    if (pa.requires_grad) {
      Tensor& da = pa.grad_buffer();
      for (std::size_t k = 0; k < n; ++k) {
        std::size_t ia = index_a(plan, k), ib = index_b(plan, k);
        da[ia] += g[k] * ga(pa.value[ia], pb.value[ib], o[k]);
      }
    }
    if (pb.requires_grad) {
      Tensor& db = pb.grad_buffer();
      for (std::size_t k = 0; k < n; ++k) {
        std::size_t ia = index_a(plan, k), ib = index_b(plan, k);
        db[ib] += g[k] * gb(pa.value[ia], pb.value[ib], o[k]);
      }
    }
  });
}

// f(x) -> out; df(x, out) = d out / dx.
template <class F, class DF>
Var unary(const Var& a, F f, DF df) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = f(av[k]);
  return make_node(std::move(out), {a}, [df](Node& self) {
    Node& p = *self.parents[0];
    Tensor& dp = p.grad_buffer();
    for (std::size_t k = 0; k < self.grad.size(); ++k)
      dp[k] += self.grad[k] * df(p.value[k], self.value[k]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Var scale(const Var& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.shape()[1] != b.shape()[0])
    throw ConfigError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                      shape_str(b.shape()));
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor out({m, n});
  MapMat(out.data(), m, n).noalias() =
      ConstMapMat(a.value().data(), m, k) * ConstMapMat(b.value().data(), k, n);
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    ConstMapMat g(self.grad.data(), m, n);
    if (pa.requires_grad)
      MapMat(pa.grad_buffer().data(), m, k).noalias() +=
          g * ConstMapMat(pb.value.data(), k, n).transpose();
    if (pb.requires_grad)
      MapMat(pb.grad_buffer().data(), k, n).noalias() +=
          ConstMapMat(pa.value.data(), m, k).transpose() * g;
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.shape()[1] != w.shape()[0] ||
      b.shape() != Shape{w.shape()[1]})
    throw ConfigError("linear: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()) +
                      " + " + shape_str(b.shape()));
  const int m = x.shape()[0], k = x.shape()[1], n = w.shape()[1];
  Tensor out({m, n});
  MapMat o(out.data(), m, n);
  o.noalias() = ConstMapMat(x.value().data(), m, k) * ConstMapMat(w.value().data(), k, n);
  o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), n);
  return make_node(std::move(out), {x, w, b}, [m, k, n](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    ConstMapMat g(self.grad.data(), m, n);
    if (px.requires_grad)
      MapMat(px.grad_buffer().data(), m, k).noalias() += g * ConstMapMat(pw.value.data(), k, n).transpose();
    if (pw.requires_grad)
      MapMat(pw.grad_buffer().data(), k, n).noalias() += ConstMapMat(px.value.data(), m, k).transpose() * g;
    if (pb.requires_grad) Eigen::Map<Eigen::RowVectorXd>(pb.grad_buffer().data(), n) += g.colwise().sum();
  });
}

Var sigmoid(const Var& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double o) { return o * (1.0 - o); });
}

Var relu(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double o) { return 1.0 - o * o; });
}

Var sin(const Var& a) {
  return unary(
      a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Var cos(const Var& a) {
  return unary(
      a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double o) { return o; });
}

Var log(const Var& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var square(const Var& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt(const Var& a) {
  return unary(
      a, [](double x) { return std::sqrt(x); }, [](double, double o) { return 0.5 / o; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().values()) s += x;
  return make_node(Tensor::scalar(s), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    Tensor& dp = p.grad_buffer();
    const double g = self.grad[0];
    for (std::size_t k = 0; k < dp.size(); ++k) dp[k] += g;
  });
}

Var mean(const Var& a) {
  const std::size_t n = a.size();
  if (n == 0) throw ConfigError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make_node(std::move(out), {a}, [](Node& self) {
    Tensor& dp = self.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < dp.size(); ++k) dp[k] += self.grad[k];
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ConfigError("concat of nothing");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) throw ConfigError("concat: bad axis");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s0[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(s0[static_cast<std::size_t>(i)]);
  Shape out_shape = s0;
  int total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != rank) throw ConfigError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && s[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)])
        throw ConfigError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(s0));
    total += s[static_cast<std::size_t>(axis)];
    widths.push_back(static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]) * inner);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  Tensor out(out_shape);
  const std::size_t row = static_cast<std::size_t>(total) * inner;
  std::size_t offset = 0;
  for (std::size_t j = 0; j < parts.size(); ++j) {
    const double* src = parts[j].value().data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy(src + o * widths[j], src + (o + 1) * widths[j], out.data() + o * row + offset);
    offset += widths[j];
  }
  return make_node(std::move(out), parts, [widths, outer, row](Node& self) {
    std::size_t offset = 0;
    for (std::size_t j = 0; j < self.parents.size(); ++j) {
      Node& p = *self.parents[j];
      if (p.requires_grad) {
        Tensor& dp = p.grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[j]; ++i)
            dp[o * widths[j] + i] += self.grad[o * row + offset + i];
      }
      offset += widths[j];
    }
  });
}

Var slice_rows(const Var& a, int begin, int count) {
  const Shape& s = a.shape();
  if (s.empty() || begin < 0 || count < 0 || begin + count > s[0])
    throw ConfigError("slice_rows: range out of bounds for " + shape_str(s));
  const std::size_t inner = a.size() / static_cast<std::size_t>(s[0]);
  Shape out_shape = s;
  out_shape[0] = count;
  Tensor out(out_shape);
  const std::size_t off = static_cast<std::size_t>(begin) * inner;
  std::copy(a.value().data() + off, a.value().data() + off + out.size(), out.data());
  return make_node(std::move(out), {a}, [off](Node& self) {
    Tensor& dp = self.parents[0]->grad_buffer();
    for (std::size_t k = 0; k < self.grad.size(); ++k) dp[off + k] += self.grad[k];
  });
}

Var crop2d(const Var& a, int y0, int x0, int h, int w) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ConfigError("crop2d needs rank >= 2");
  const int H = s[s.size() - 2], W = s[s.size() - 1];
  if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > H || x0 + w > W)
    throw ConfigError("crop2d: box out of bounds for " + shape_str(s));
  const std::size_t lead = a.size() / (static_cast<std::size_t>(H) * static_cast<std::size_t>(W));
  Shape out_shape = s;
  out_shape[s.size() - 2] = h;
  out_shape[s.size() - 1] = w;
  Tensor out(out_shape);
  const double* src = a.value().data();
  for (std::size_t l = 0; l < lead; ++l)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out[(l * static_cast<std::size_t>(h) + static_cast<std::size_t>(y)) * static_cast<std::size_t>(w) +
            static_cast<std::size_t>(x)] =
            src[(l * static_cast<std::size_t>(H) + static_cast<std::size_t>(y0 + y)) * static_cast<std::size_t>(W) +
                static_cast<std::size_t>(x0 + x)];
  return make_node(std::move(out), {a}, [lead, H, W, y0, x0, h, w](Node& self) {
    Tensor& dp = self.parents[0]->grad_buffer();
    for (std::size_t l = 0; l < lead; ++l)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          dp[(l * static_cast<std::size_t>(H) + static_cast<std::size_t>(y0 + y)) * static_cast<std::size_t>(W) +
             static_cast<std::size_t>(x0 + x)] +=
              self.grad[(l * static_cast<std::size_t>(h) + static_cast<std::size_t>(y)) * static_cast<std::size_t>(w) +
                        static_cast<std::size_t>(x)];
  });
}

Var embed2d(const Var& a, int height, int width, int y0, int x0) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw ConfigError("embed2d needs rank >= 2");
  const int h = s[s.size() - 2], w = s[s.size() - 1];
  if (y0 < 0 || x0 < 0 || y0 + h > height || x0 + w > width)
    throw ConfigError("embed2d: box out of bounds");
  const std::size_t lead = a.size() / (static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  Shape out_shape = s;
  out_shape[s.size() - 2] = height;
  out_shape[s.size() - 1] = width;
  Tensor out(out_shape);
  const double* src = a.value().data();
  auto big = [height, width, y0, x0](std::size_t l, int y, int x) {
    return (l * static_cast<std::size_t>(height) + static_cast<std::size_t>(y0 + y)) *
               static_cast<std::size_t>(width) +
           static_cast<std::size_t>(x0 + x);
  };
  auto small = [h, w](std::size_t l, int y, int x) {
    return (l * static_cast<std::size_t>(h) + static_cast<std::size_t>(y)) * static_cast<std::size_t>(w) +
           static_cast<std::size_t>(x);
  };
  for (std::size_t l = 0; l < lead; ++l)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out[big(l, y, x)] = src[small(l, y, x)];
  return make_node(std::move(out), {a}, [lead, h, w, big, small](Node& self) {
    Tensor& dp = self.parents[0]->grad_buffer();
    for (std::size_t l = 0; l < lead; ++l)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) dp[small(l, y, x)] += self.grad[big(l, y, x)];
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dSpec spec) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4 || ws[1] != xs[1] || ws[2] != ws[3] ||
      b.shape() != Shape{ws[0]} || spec.stride < 1 || spec.pad < 0)
    throw ConfigError("conv2d: bad shapes x" + shape_str(xs) + " w" + shape_str(ws) + " b" +
                      shape_str(b.shape()));
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int O = ws[0], K = ws[2], S = spec.stride, P = spec.pad;
  const int Ho = (H + 2 * P - K) / S + 1;
  const int Wo = (W + 2 * P - K) / S + 1;
  if (Ho <= 0 || Wo <= 0) throw ConfigError("conv2d: input smaller than kernel");
  const int ckk = C * K * K;
  const int hw = Ho * Wo;

  // cols[n] is [C*K*K, Ho*Wo]; -1 marks padding taps.
  auto index = std::make_shared<std::vector<int>>(static_cast<std::size_t>(ckk) * static_cast<std::size_t>(hw));
  for (int c = 0; c < C; ++c)
    for (int ky = 0; ky < K; ++ky)
      for (int kx = 0; kx < K; ++kx) {
        const int r = (c * K + ky) * K + kx;
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const int iy = oy * S - P + ky, ix = ox * S - P + kx;
            (*index)[static_cast<std::size_t>(r) * static_cast<std::size_t>(hw) +
                     static_cast<std::size_t>(oy * Wo + ox)] =
                (iy < 0 || iy >= H || ix < 0 || ix >= W) ? -1 : (c * H + iy) * W + ix;
          }
      }

  const std::size_t in_per = static_cast<std::size_t>(C) * static_cast<std::size_t>(H) * static_cast<std::size_t>(W);
  const std::size_t out_per = static_cast<std::size_t>(O) * static_cast<std::size_t>(hw);
  auto cols = std::make_shared<Storage>(static_cast<std::size_t>(N) * index->size());
  Tensor out({N, O, Ho, Wo});
  ConstMapMat wm(w.value().data(), O, ckk);
  for (int n = 0; n < N; ++n) {
    const double* xin = x.value().data() + static_cast<std::size_t>(n) * in_per;
    double* col = cols->data() + static_cast<std::size_t>(n) * index->size();
    for (std::size_t i = 0; i < index->size(); ++i) {
      int src = (*index)[i];
      col[i] = src < 0 ? 0.0 : xin[src];
    }
    MapMat om(out.data() + static_cast<std::size_t>(n) * out_per, O, hw);
    om.noalias() = wm * ConstMapMat(col, ckk, hw);
    for (int o = 0; o < O; ++o) om.row(o).array() += b.value()[static_cast<std::size_t>(o)];
  }

  return make_node(std::move(out), {x, w, b},
                   [index, cols, N, O, ckk, hw, in_per, out_per](Node& self) {
    Node& px = *self.parents[0];
    Node& pw = *self.parents[1];
    Node& pb = *self.parents[2];
    RowMat dcol;
    for (int n = 0; n < N; ++n) {
      ConstMapMat g(self.grad.data() + static_cast<std::size_t>(n) * out_per, O, hw);
      const double* col = cols->data() + static_cast<std::size_t>(n) * index->size();
      if (pw.requires_grad)
        MapMat(pw.grad_buffer().data(), O, ckk).noalias() += g * ConstMapMat(col, ckk, hw).transpose();
      if (pb.requires_grad) {
        Tensor& db = pb.grad_buffer();
        for (int o = 0; o < O; ++o) {
          double s = 0.0;
          for (int k = 0; k < hw; ++k) s += g(o, k);
          db[static_cast<std::size_t>(o)] += s;
        }
      }
      if (px.requires_grad) {
        dcol.noalias() = ConstMapMat(pw.value.data(), O, ckk).transpose() * g;
        double* dx = px.grad_buffer().data() + static_cast<std::size_t>(n) * in_per;
        const double* dc = dcol.data();
        for (std::size_t i = 0; i < index->size(); ++i) {
          int src = (*index)[i];
          if (src >= 0) dx[src] += dc[i];
        }
      }
    }
  });
}

Var upsample2x(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ConfigError("upsample2x needs rank >= 2");
  const int H = s[s.size() - 2], W = s[s.size() - 1];
  const std::size_t lead = x.size() / (static_cast<std::size_t>(H) * static_cast<std::size_t>(W));
  Shape out_shape = s;
  out_shape[s.size() - 2] = 2 * H;
  out_shape[s.size() - 1] = 2 * W;
  Tensor out(out_shape);
  const double* src = x.value().data();
  const std::size_t W2 = 2 * static_cast<std::size_t>(W);
  for (std::size_t l = 0; l < lead; ++l)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        out[(l * 2 * static_cast<std::size_t>(H) + static_cast<std::size_t>(y)) * W2 + static_cast<std::size_t>(xx)] =
            src[(l * static_cast<std::size_t>(H) + static_cast<std::size_t>(y / 2)) * static_cast<std::size_t>(W) +
                static_cast<std::size_t>(xx / 2)];
  return make_node(std::move(out), {x}, [lead, H, W, W2](Node& self) {
    Tensor& dp = self.parents[0]->grad_buffer();
    for (std::size_t l = 0; l < lead; ++l)
      for (int y = 0; y < 2 * H; ++y)
        for (int xx = 0; xx < 2 * W; ++xx)
          dp[(l * static_cast<std::size_t>(H) + static_cast<std::size_t>(y / 2)) * static_cast<std::size_t>(W) +
             static_cast<std::size_t>(xx / 2)] +=
              self.grad[(l * 2 * static_cast<std::size_t>(H) + static_cast<std::size_t>(y)) * W2 +
                        static_cast<std::size_t>(xx)];
  });
}

Var spatial_mean(const Var& x) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw ConfigError("spatial_mean needs [N,C,H,W]");
  const std::size_t nc = static_cast<std::size_t>(s[0]) * static_cast<std::size_t>(s[1]);
  const std::size_t hw = static_cast<std::size_t>(s[2]) * static_cast<std::size_t>(s[3]);
  Tensor out({s[0], s[1]});
  for (std::size_t i = 0; i < nc; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < hw; ++k) acc += x.value()[i * hw + k];
    out[i] = acc / static_cast<double>(hw);
  }
  return make_node(std::move(out), {x}, [nc, hw](Node& self) {
    Tensor& dp = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < nc; ++i)
      for (std::size_t k = 0; k < hw; ++k) dp[i * hw + k] += self.grad[i] * inv;
  });
}

bool bilinear_taps(double u, double v, int width, int height, BilinearTaps& t) {
  if (!(u >= 0.0 && v >= 0.0 && u <= width - 1 && v <= height - 1)) return false;
  t.x0 = static_cast<int>(std::floor(u));
  t.y0 = static_cast<int>(std::floor(v));
  t.fx = u - t.x0;
  t.fy = v - t.y0;
  // On the last row/column the far tap has zero weight; shift the cell inward.
  if (t.x0 >= width - 1) {
    if (width < 2) return false;
    t.x0 = width - 2;
    t.fx = 1.0;
  }
  if (t.y0 >= height - 1) {
    if (height < 2) return false;
    t.y0 = height - 2;
    t.fy = 1.0;
  }
  return true;
}

Var bilinear_sample(const Var& src, const Var& u, const Var& v,
                    const std::vector<std::uint8_t>& mask, std::vector<std::uint8_t>* out_mask) {
  const Shape& ss = src.shape();
  if (ss.size() != 3 || u.shape().size() != 2 || u.shape() != v.shape() ||
      mask.size() != u.size())
    throw ConfigError("bilinear_sample: bad shapes src" + shape_str(ss) + " u" +
                      shape_str(u.shape()) + " v" + shape_str(v.shape()));
  const int C = ss[0], H = ss[1], W = ss[2];
  const int Ho = u.shape()[0], Wo = u.shape()[1];
  const std::size_t npx = static_cast<std::size_t>(Ho) * static_cast<std::size_t>(Wo);
  const std::size_t plane = static_cast<std::size_t>(H) * static_cast<std::size_t>(W);
  auto taps = std::make_shared<std::vector<BilinearTaps>>(npx);
  auto ok = std::make_shared<std::vector<std::uint8_t>>(npx, 0);
  Tensor out({C, Ho, Wo});
  const double* s = src.value().data();
  for (std::size_t i = 0; i < npx; ++i) {
    if (!mask[i]) continue;
    BilinearTaps& t = (*taps)[i];
    if (!bilinear_taps(u.value()[i], v.value()[i], W, H, t)) continue;
    (*ok)[i] = 1;
    const std::size_t base = static_cast<std::size_t>(t.y0) * static_cast<std::size_t>(W) + static_cast<std::size_t>(t.x0);
    for (int c = 0; c < C; ++c) {
      const double* p = s + static_cast<std::size_t>(c) * plane + base;
      out[static_cast<std::size_t>(c) * npx + i] =
          (1 - t.fy) * ((1 - t.fx) * p[0] + t.fx * p[1]) + t.fy * ((1 - t.fx) * p[W] + t.fx * p[W + 1]);
    }
  }
  if (out_mask) *out_mask = *ok;
  return make_node(std::move(out), {src, u, v}, [taps, ok, C, W, npx, plane](Node& self) {
    Node& ps = *self.parents[0];
    Node& pu = *self.parents[1];
    Node& pv = *self.parents[2];
    const double* s = ps.value.data();
    for (std::size_t i = 0; i < npx; ++i) {
      if (!(*ok)[i]) continue;
      const BilinearTaps& t = (*taps)[i];
      const std::size_t base = static_cast<std::size_t>(t.y0) * static_cast<std::size_t>(W) + static_cast<std::size_t>(t.x0);
      double du = 0.0, dv = 0.0;
      for (int c = 0; c < C; ++c) {
        const double g = self.grad[static_cast<std::size_t>(c) * npx + i];
        if (g == 0.0) continue;
        const std::size_t cb = static_cast<std::size_t>(c) * plane + base;
        if (ps.requires_grad) {
          double* d = ps.grad_buffer().data() + cb;
          d[0] += g * (1 - t.fx) * (1 - t.fy);
          d[1] += g * t.fx * (1 - t.fy);
          d[W] += g * (1 - t.fx) * t.fy;
          d[W + 1] += g * t.fx * t.fy;
        }
        const double* p = s + cb;
        du += g * ((1 - t.fy) * (p[1] - p[0]) + t.fy * (p[W + 1] - p[W]));
        dv += g * ((1 - t.fx) * (p[W] - p[0]) + t.fx * (p[W + 1] - p[1]));
      }
      if (pu.requires_grad) pu.grad_buffer()[i] += du;
      if (pv.requires_grad) pv.grad_buffer()[i] += dv;
    }
  });
}

}  // namespace s2l::ad
