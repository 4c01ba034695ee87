#include "s2l/field.hpp"

#include <cmath>
#include <random>

#include "s2l/error.hpp"
#include "s2l/ops.hpp"

namespace s2l::field {

using ad::Shape;
using ad::Tensor;
using ad::Var;

void FieldConfig::validate() const {
  if (hidden_layers < 1 || hidden_units < 1) throw ConfigError("field needs at least one hidden layer and unit");
  if (coord_bands < 0 || time_bands < 0) throw ConfigError("encoding band counts must be nonnegative");
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  if (!(r_max > 0.0)) throw ConfigError("r_max must be positive");
}

void to_json(nlohmann::json& j, const FieldConfig& c) {
  j = {{"hidden_layers", c.hidden_layers}, {"hidden_units", c.hidden_units}, {"coord_bands", c.coord_bands},
       {"time_bands", c.time_bands},       {"feature_dim", c.feature_dim},   {"r_max", c.r_max}};
}

void from_json(const nlohmann::json& j, FieldConfig& c) {
  c = FieldConfig{};
  c.hidden_layers = j.value("hidden_layers", c.hidden_layers);
  c.hidden_units = j.value("hidden_units", c.hidden_units);
  c.coord_bands = j.value("coord_bands", c.coord_bands);
  c.time_bands = j.value("time_bands", c.time_bands);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.r_max = j.value("r_max", c.r_max);
}

std::vector<double> positional_encode(std::span<const double> x, int bands) {
  std::vector<double> out;
  out.reserve(x.size() * static_cast<std::size_t>(1 + 2 * bands));
  for (double v : x) {
    out.push_back(v);
    for (int l = 0; l < bands; ++l) {
      const double w = std::ldexp(M_PI, l);
      out.push_back(std::sin(w * v));
      out.push_back(std::cos(w * v));
    }
  }
  return out;
}

Var positional_encode(const Var& x, int bands) {
  if (x.value().rank() != 2) throw ConfigError("positional_encode expects [N,D]");
  if (bands < 0) throw ConfigError("positional_encode: negative band count");
  const int n = x.shape()[0], d = x.shape()[1];
  const int per = 1 + 2 * bands;
  Tensor out({n, d * per});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) {
      const double v = x.value()[static_cast<std::size_t>(r * d + c)];
      double* o = out.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(d * per) +
                  static_cast<std::size_t>(c * per);
      o[0] = v;
      for (int l = 0; l < bands; ++l) {
        const double w = std::ldexp(M_PI, l);
        o[1 + 2 * l] = std::sin(w * v);
        o[2 + 2 * l] = std::cos(w * v);
      }
    }
  return ad::make_node(std::move(out), {x}, [n, d, per, bands](ad::Node& self) {
    ad::Node& px = *self.parents[0];
    Tensor& g = px.grad_buffer();
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) {
        const std::size_t base = static_cast<std::size_t>(r) * static_cast<std::size_t>(d * per) +
                                 static_cast<std::size_t>(c * per);
        const double* go = self.grad.data() + base;
        const double* o = self.value.data() + base;
        double acc = go[0];
        for (int l = 0; l < bands; ++l) {
          const double w = std::ldexp(M_PI, l);
          acc += w * (o[2 + 2 * l] * go[1 + 2 * l] - o[1 + 2 * l] * go[2 + 2 * l]);
        }
        g[static_cast<std::size_t>(r * d + c)] += acc;
      }
  });
}

FieldParams::FieldParams(const FieldConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  int in = cfg.input_dim();
  for (int l = 0; l <= cfg.hidden_layers; ++l) {
    const bool last = l == cfg.hidden_layers;
    const int out = last ? 3 : cfg.hidden_units;
    Tensor w({in, out});
    if (!last) {
      const double bound = std::sqrt(6.0 / in);
      std::uniform_real_distribution<double> u(-bound, bound);
      for (double& v : w.values()) v = u(rng);
    }
    weights_.push_back(ad::parameter(std::move(w)));
    biases_.push_back(ad::parameter(Tensor({out})));
    in = out;
  }
}

std::vector<Var> FieldParams::parameters() const {
  std::vector<Var> p;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    p.push_back(weights_[i]);
    p.push_back(biases_[i]);
  }
  return p;
}

Var eval_field(const FieldParams& p, const Var& coords, const Var& features, const Var& times) {
  const FieldConfig& c = p.config();
  if (coords.value().rank() != 2 || coords.shape()[1] != 2) throw ConfigError("field coords must be [N,2]");
  const int n = coords.shape()[0];
  if (features.shape() != Shape{n, c.feature_dim}) throw ConfigError("field features must be [N,feature_dim]");
  if (times.shape() != Shape{n, 1}) throw ConfigError("field times must be [N,1]");
  Var h = ad::concat({positional_encode(coords, c.coord_bands), features, positional_encode(times, c.time_bands)}, 1);
  const std::size_t layers = p.weights().size();
  for (std::size_t l = 0; l + 1 < layers; ++l) h = ad::relu(ad::linear(h, p.weights()[l], p.biases()[l]));
  return ad::sigmoid(ad::linear(h, p.weights().back(), p.biases().back()));
}

namespace {

// eval_field for rows sharing one feature and time: the conditioning part of
// the first layer is computed once and folded into its bias.
Var eval_field_shared(const FieldParams& p, const Var& coords, std::span<const float> feature, double t) {
  const FieldConfig& c = p.config();
  if (static_cast<int>(feature.size()) != c.feature_dim) throw ConfigError("speech feature has the wrong dimension");
  Tensor f({1, c.feature_dim});
  for (int k = 0; k < c.feature_dim; ++k) f[static_cast<std::size_t>(k)] = feature[static_cast<std::size_t>(k)];
  const Var cond = ad::concat({ad::constant(std::move(f)), positional_encode(ad::constant(Tensor({1, 1}, {t})), c.time_bands)}, 1);
  const Var& w0 = p.weights().front();
  const int coord_dim = 2 + 4 * c.coord_bands;
  const int hidden = w0.shape()[1];
  const Var bias = ad::reshape(ad::matmul(cond, ad::slice_rows(w0, coord_dim, c.input_dim() - coord_dim)), {hidden}) +
                   p.biases().front();
  Var h = ad::relu(ad::linear(positional_encode(coords, c.coord_bands), ad::slice_rows(w0, 0, coord_dim), bias));
  const std::size_t layers = p.weights().size();
  for (std::size_t l = 1; l + 1 < layers; ++l) h = ad::relu(ad::linear(h, p.weights()[l], p.biases()[l]));
  return ad::sigmoid(ad::linear(h, p.weights().back(), p.biases().back()));
}

Var repeat_feature(std::span<const float> feature, int rows, int dim) {
  if (static_cast<int>(feature.size()) != dim) throw ConfigError("speech feature has the wrong dimension");
  Tensor t({rows, dim});
  for (int r = 0; r < rows; ++r)
    for (int k = 0; k < dim; ++k) t[static_cast<std::size_t>(r * dim + k)] = feature[static_cast<std::size_t>(k)];
  return ad::constant(std::move(t));
}

Var repeat_time(double t, int rows) {
  Tensor out({rows, 1});
  out.fill(t);
  return ad::constant(std::move(out));
}

// rgb [K*N,3] -> [3,h,w] with out[c,i] = sum_k w[k*N+i] * rgb[k*N+i,c].
Var combine_rows(const Var& rgb, std::vector<double> weights, int k, int h, int w) {
  const int n = h * w;
  Tensor out({3, h, w});
  for (int j = 0; j < k; ++j)
    for (int i = 0; i < n; ++i) {
      const std::size_t row = static_cast<std::size_t>(j * n + i);
      for (int c = 0; c < 3; ++c)
        out[static_cast<std::size_t>(c * n + i)] += weights[row] * rgb.value()[row * 3 + static_cast<std::size_t>(c)];
    }
  return ad::make_node(std::move(out), {rgb}, [weights = std::move(weights), k, n](ad::Node& self) {
    Tensor& g = self.parents[0]->grad_buffer();
    for (int j = 0; j < k; ++j)
      for (int i = 0; i < n; ++i) {
        const std::size_t row = static_cast<std::size_t>(j * n + i);
        for (int c = 0; c < 3; ++c)
          g[row * 3 + static_cast<std::size_t>(c)] += weights[row] * self.grad[static_cast<std::size_t>(c * n + i)];
      }
  });
}

}  // namespace

std::array<double, 3> eval_field(const FieldParams& p, const std::array<double, 2>& x, std::span<const float> feature,
                                 double t) {
  const Var out = eval_field(p, ad::constant(Tensor({1, 2}, {x[0], x[1]})),
                             repeat_feature(feature, 1, p.config().feature_dim), repeat_time(t, 1));
  return {out.value()[0], out.value()[1], out.value()[2]};
}

std::array<double, 4> corner_weights(const std::array<double, 2>& centre, const Rect& r) {
  const double wx = r.x_hi - r.x_lo, wy = r.y_hi - r.y_lo;
  if (!(wx > 0.0) || !(wy > 0.0)) throw ConfigError("sampling rectangle has zero area");
  const double x = centre[0], y = centre[1];
  if (x < r.x_lo || x > r.x_hi || y < r.y_lo || y > r.y_hi) throw ConfigError("sampling centre outside rectangle");
  const double s = wx * wy;
  const double ax0 = x - r.x_lo, ax1 = r.x_hi - x, ay0 = y - r.y_lo, ay1 = r.y_hi - y;
  return {ax1 * ay1 / s, ax0 * ay1 / s, ax1 * ay0 / s, ax0 * ay0 / s};
}

std::array<double, 3> sample_continuous(const FieldParams& p, const std::array<double, 2>& centre, const Rect& rect,
                                        std::span<const float> feature, double t) {
  const auto w = corner_weights(centre, rect);
  const std::array<std::array<double, 2>, 4> corners{
      {{rect.x_lo, rect.y_lo}, {rect.x_hi, rect.y_lo}, {rect.x_lo, rect.y_hi}, {rect.x_hi, rect.y_hi}}};
  std::array<double, 3> out{0, 0, 0};
  for (int n = 0; n < 4; ++n) {
    const auto c = eval_field(p, corners[static_cast<std::size_t>(n)], feature, t);
    for (int ch = 0; ch < 3; ++ch) out[static_cast<std::size_t>(ch)] += w[static_cast<std::size_t>(n)] * c[static_cast<std::size_t>(ch)];
  }
  return out;
}

std::array<double, 2> normalize_pixel(const Box& region, double px, double py) {
  const double sx = region.width > 1 ? 2.0 / (region.width - 1) : 0.0;
  const double sy = region.height > 1 ? 2.0 / (region.height - 1) : 0.0;
  return {(px - region.x0) * sx - 1.0, (py - region.y0) * sy - 1.0};
}

MouthRender render_canonical_mouth(const FieldParams& p, const Box& region, std::span<const float> feature, double t,
                                   bool train_mode, std::uint64_t seed) {
  return render_canonical_mouth(p, region, feature, t, train_mode, seed, p.config().r_max);
}

MouthRender render_canonical_mouth(const FieldParams& p, const Box& region, std::span<const float> feature, double t,
                                   bool train_mode, std::uint64_t seed, double r_max) {
  if (region.width < 1 || region.height < 1) throw ConfigError("empty mouth region");
  const int n = region.width * region.height;
  const int k = train_mode ? 4 : 1;
  Tensor coords({k * n, 2});
  std::vector<double> weights(static_cast<std::size_t>(k * n), 1.0);
  if (!train_mode) {
    for (int y = 0; y < region.height; ++y)
      for (int x = 0; x < region.width; ++x) {
        const auto c = normalize_pixel(region, region.x0 + x, region.y0 + y);
        const std::size_t i = static_cast<std::size_t>(y * region.width + x);
        coords[2 * i] = c[0];
        coords[2 * i + 1] = c[1];
      }
  } else {
    if (!(r_max > 0.0)) throw ConfigError("r_max must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto offset = [&] { return r_max * (1.0 - u(rng)); };  // (0, r_max]
    for (int y = 0; y < region.height; ++y)
      for (int x = 0; x < region.width; ++x) {
        const double px = region.x0 + x, py = region.y0 + y;
        const Rect rect{px - offset(), px + offset(), py - offset(), py + offset()};
        const auto w = corner_weights({px, py}, rect);
        const std::array<std::array<double, 2>, 4> corners{
            {{rect.x_lo, rect.y_lo}, {rect.x_hi, rect.y_lo}, {rect.x_lo, rect.y_hi}, {rect.x_hi, rect.y_hi}}};
        const std::size_t i = static_cast<std::size_t>(y * region.width + x);
        for (std::size_t c = 0; c < 4; ++c) {
          const std::size_t row = c * static_cast<std::size_t>(n) + i;
          const auto nc = normalize_pixel(region, corners[c][0], corners[c][1]);
          coords[2 * row] = nc[0];
          coords[2 * row + 1] = nc[1];
          weights[row] = w[c];
        }
      }
  }
  const Var rgb = eval_field_shared(p, ad::constant(std::move(coords)), feature, t);
  return {combine_rows(rgb, std::move(weights), k, region.height, region.width)};
}

}  // namespace s2l::field
