#include "ttav/optim.hpp"

#include <cmath>

namespace ttav {

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(const ParameterSet<T>& params) {
  OptimizerState<T> s;
  for (const auto& [name, t] : params.tensors) {
    s.m.emplace(name, Tensor<T>(t.shape()));
    s.v.emplace(name, Tensor<T>(t.shape()));
  }
  return s;
}

template <typename T>
void adamw_step(ParameterSet<T>& params, const GradientMap<T>& grads, OptimizerState<T>& state,
                double lr, const AdamWConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const auto& p = params.at(name);
    if (p.shape() != g.shape()) {
      throw ShapeError("adamw_step: gradient shape " + shape_to_string(g.shape()) +
                       " does not match parameter '" + name + "' " + shape_to_string(p.shape()));
    }
    if (!g.all_finite()) throw NumericError("adamw_step: non-finite gradient for '" + name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  const T decay = static_cast<T>(1.0 - lr * cfg.weight_decay);
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  for (const auto& [name, g] : grads) {
    auto& p = params.at(name);
    auto mit = state.m.try_emplace(name, Tensor<T>(p.shape())).first;
    auto vit = state.v.try_emplace(name, Tensor<T>(p.shape())).first;
    auto& m = mit->second;
    auto& v = vit->second;
    for (std::int64_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(m[i]) / bc1;
      const double vhat = static_cast<double>(v[i]) / bc2;
      p[i] *= decay;
      p[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
}

template <typename T>
double clip_grad_norm(GradientMap<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (T v : g.data()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& [_, g] : grads) {
      for (T& v : g.storage()) v *= s;
    }
  }
  return norm;
}

std::int64_t LrSchedule::warmup_steps() const {
  auto w = static_cast<std::int64_t>(std::ceil(warmup_fraction * static_cast<double>(total_steps)));
  return w < 1 ? 1 : w;
}

void LrSchedule::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("peak_lr must be positive");
  if (total_steps < 1) throw ConfigError("total_steps must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("warmup_fraction must lie in (0, 1)");
  }
}

double lr_at(const LrSchedule& schedule, std::int64_t step) {
  if (step < 0) throw DomainError("lr_at: negative step");
  const auto w = schedule.warmup_steps();
  if (step >= w) return schedule.peak_lr;
  return schedule.peak_lr * static_cast<double>(step) / static_cast<double>(w);
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step(ParameterSet<float>&, const GradientMap<float>&, OptimizerState<float>&,
                         double, const AdamWConfig&);
template void adamw_step(ParameterSet<double>&, const GradientMap<double>&,
                         OptimizerState<double>&, double, const AdamWConfig&);
template double clip_grad_norm(GradientMap<float>&, double);
template double clip_grad_norm(GradientMap<double>&, double);

}  // namespace ttav
