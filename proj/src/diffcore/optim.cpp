#include "s2l/optim.hpp"

#include <cmath>

#include "s2l/error.hpp"

namespace s2l::ad {

void adam_step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads,
               OptimizerState& state) {
  if (params.size() != grads.size())
    throw ConfigError("adam_step: " + std::to_string(params.size()) + " params but " +
                      std::to_string(grads.size()) + " gradients");
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) throw ConfigError("adam_step: state size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->same_shape(*grads[i]) || !params[i]->same_shape(state.m[i]))
      throw ConfigError("adam_step: shape mismatch for parameter " + std::to_string(i) + ": " +
                        shape_str(params[i]->shape()) + " vs grad " + shape_str(grads[i]->shape()));
  }

  ++state.step;
  const AdamHyper& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      p[k] -= h.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + h.eps);
    }
  }
}

Adam::Adam(std::vector<Var> params, AdamHyper hyper) : params_(std::move(params)) {
  state_.hyper = hyper;
}

void Adam::step() {
  std::vector<Tensor*> p;
  std::vector<const Tensor*> g;
  for (Var& v : params_) {
    p.push_back(&v.mutable_value());
    g.push_back(&v.grad());
  }
  adam_step(std::move(p), g, state_);
  zero_grad();
}

void Adam::zero_grad() {
  for (Var& v : params_) v.zero_grad();
}

GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& point,
                           const GradCheckOptions& opts) {
  GradCheckReport rep;
  Var x = parameter(point);
  Var y = f(x);
  backward(y);
  const Tensor analytic = x.grad();

  auto eval = [&](std::size_t k, double delta) {
    Tensor shifted = point;
    shifted[k] += delta;
    return f(constant(shifted)).item();
  };

  const std::size_t n = point.size();
  const std::size_t stride =
      (opts.max_coords == 0 || n <= opts.max_coords) ? 1 : (n + opts.max_coords - 1) / opts.max_coords;
  const double h = opts.step;
  const double f0 = f(constant(point)).item();
  std::size_t good = 0;
  for (std::size_t k = 0; k < n; k += stride) {
    const double fp = eval(k, h), fm = eval(k, -h);
    const double central = (fp - fm) / (2.0 * h);
    // A smooth function's one-sided slopes differ by O(h); a kink by O(1).
    const double right = (fp - f0) / h, left = (f0 - fm) / h;
    const double fp2 = eval(k, 0.5 * h), fm2 = eval(k, -0.5 * h);
    const double gap = std::abs(right - left);
    const double gap_half = std::abs((fp2 - f0) / (0.5 * h) - (f0 - fm2) / (0.5 * h));
    const double slope_scale = std::max({std::abs(right), std::abs(left), opts.floor});
    if (gap > 1e-3 * slope_scale && gap_half > 0.75 * gap) {
      ++rep.kinks;
      continue;
    }
    ++rep.checked;
    const double a = analytic[k];
    const double rel = std::abs(a - central) / std::max({std::abs(a), std::abs(central), opts.floor});
    rep.max_rel_error = std::max(rep.max_rel_error, rel);
    if (rel < opts.tolerance) ++good;
  }
  rep.pass_fraction = rep.checked ? static_cast<double>(good) / static_cast<double>(rep.checked) : 0.0;
  rep.unreliable = rep.kinks > 0;
  rep.passed = rep.max_rel_error < opts.tolerance;
  return rep;
}

}  // namespace s2l::ad
