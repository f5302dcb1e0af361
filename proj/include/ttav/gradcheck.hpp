#pragma once

#include <functional>
#include <string>

#include "ttav/parameters.hpp"

namespace ttav {

using ScalarFn = std::function<double(const ParameterSet<double>&)>;

// Central differences (f(θ+eps·e) − f(θ−eps·e)) / (2·eps) for every coordinate
// of every parameter. f must be pure and deterministic. eps ∈ [1e-8, 1e-2].
GradientMap<double> finite_diff_gradient(const ScalarFn& f, const ParameterSet<double>& params,
                                         double eps);

// Same, restricted to `coords_per_tensor` evenly spaced coordinates of each
// tensor (all coordinates when the tensor is smaller). Unvisited entries are
// NaN so they can never be mistaken for checked values.
GradientMap<double> finite_diff_gradient_sampled(const ScalarFn& f,
                                                 const ParameterSet<double>& params, double eps,
                                                 std::int64_t coords_per_tensor);

struct GradCheckReport {
  double worst_relative_error = 0.0;
  std::string worst_parameter;
  std::int64_t coordinates = 0;
};

// Per-tensor relative error ‖a − b‖ / max(‖a‖, ‖b‖, floor), computed over the
// coordinates where `numeric` is not NaN.
GradCheckReport compare_gradients(const GradientMap<double>& analytic,
                                  const GradientMap<double>& numeric, double floor = 1e-8);

}  // namespace ttav
