#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ttav/parameters.hpp"

namespace ttav {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

template <typename T>
struct OptimizerState {
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
  std::int64_t step = 0;

  static OptimizerState zeros_like(const ParameterSet<T>& params);
};

// Decoupled-weight-decay Adam. Every gradient must be finite and match its
// parameter's shape; moments are created lazily for new names.
template <typename T>
void adamw_step(ParameterSet<T>& params, const GradientMap<T>& grads, OptimizerState<T>& state,
                double lr, const AdamWConfig& cfg = {});

// Rescales all gradients in place so their joint L2 norm is at most max_norm.
// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(GradientMap<T>& grads, double max_norm);

struct LrSchedule {
  double peak_lr = 1e-4;
  std::int64_t total_steps = 1;
  double warmup_fraction = 0.03;

  std::int64_t warmup_steps() const;
  void validate() const;
};

// Linear ramp 0 → peak over warmup_steps, constant afterwards.
double lr_at(const LrSchedule& schedule, std::int64_t step);

}  // namespace ttav
