#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "s2l/autodiff.hpp"

namespace s2l::ad {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

/// One bias-corrected Adam update of `params` in place. Moments are created
/// on the first call; later calls require matching shapes.
void adam_step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads,
               OptimizerState& state);

/// Adam over a fixed list of parameter Vars.
class Adam {
 public:
  Adam(std::vector<Var> params, AdamHyper hyper);

  /// Applies the accumulated gradients, then clears them.
  void step();
  void zero_grad();

  const std::vector<Var>& params() const { return params_; }
  OptimizerState& state() { return state_; }
  const OptimizerState& state() const { return state_; }

 private:
  std::vector<Var> params_;
  OptimizerState state_;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  /// Fraction of checked coordinates under the tolerance.
  double pass_fraction = 1.0;
  std::size_t checked = 0;
  /// Coordinates where one-sided slopes disagree by more than smoothness
  /// allows; excluded from max_rel_error.
  std::size_t kinks = 0;
  bool passed = false;
  bool unreliable = false;
};

struct GradCheckOptions {
  double step = 1e-6;
  double tolerance = 1e-3;
  /// Relative errors are measured against max(|a|, |b|, floor).
  double floor = 1e-8;
  /// Check at most this many coordinates, evenly strided (0 = all).
  std::size_t max_coords = 0;
};

/// Compares reverse-mode gradients of `f` at `point` with central
/// differences. `f` must rebuild its graph from the Var it is handed.
GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& point,
                           const GradCheckOptions& opts = {});

}  // namespace s2l::ad
