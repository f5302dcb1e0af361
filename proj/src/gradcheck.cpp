#include "ttav/gradcheck.hpp"

#include <cmath>
#include <limits>

namespace ttav {
namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-8 && eps <= 1e-2)) {
    throw DomainError("finite_diff_gradient: eps must lie in [1e-8, 1e-2]");
  }
}

double probe(const ScalarFn& f, ParameterSet<double>& work, const std::string& name,
             std::int64_t i, double eps) {
  auto& t = work.at(name);
  const double orig = t[i];
  t[i] = orig + eps;
  const double up = f(work);
  t[i] = orig - eps;
  const double down = f(work);
  t[i] = orig;
  return (up - down) / (2.0 * eps);
}

}  // namespace

GradientMap<double> finite_diff_gradient(const ScalarFn& f, const ParameterSet<double>& params,
                                         double eps) {
  check_eps(eps);
  ParameterSet<double> work = params;
  GradientMap<double> out;
  for (const auto& [name, t] : params.tensors) {
    Tensor<double> g(t.shape());
    for (std::int64_t i = 0; i < t.size(); ++i) g[i] = probe(f, work, name, i, eps);
    out.emplace(name, std::move(g));
  }
  return out;
}

GradientMap<double> finite_diff_gradient_sampled(const ScalarFn& f,
                                                 const ParameterSet<double>& params, double eps,
                                                 std::int64_t coords_per_tensor) {
  check_eps(eps);
  ParameterSet<double> work = params;
  GradientMap<double> out;
  for (const auto& [name, t] : params.tensors) {
    Tensor<double> g(t.shape(), std::numeric_limits<double>::quiet_NaN());
    const std::int64_t n = t.size();
    const std::int64_t stride = n <= coords_per_tensor ? 1 : n / coords_per_tensor;
    for (std::int64_t i = 0; i < n; i += stride) g[i] = probe(f, work, name, i, eps);
    out.emplace(name, std::move(g));
  }
  return out;
}

GradCheckReport compare_gradients(const GradientMap<double>& analytic,
                                  const GradientMap<double>& numeric, double floor) {
  GradCheckReport report;
  for (const auto& [name, num] : numeric) {
    auto it = analytic.find(name);
    if (it == analytic.end()) throw ShapeError("compare_gradients: missing '" + name + "'");
    const auto& ana = it->second;
    if (ana.shape() != num.shape()) throw ShapeError("compare_gradients: shape mismatch");
    double diff = 0, na = 0, nn = 0;
    for (std::int64_t i = 0; i < num.size(); ++i) {
      if (std::isnan(num[i])) continue;
      diff += (ana[i] - num[i]) * (ana[i] - num[i]);
      na += ana[i] * ana[i];
      nn += num[i] * num[i];
      ++report.coordinates;
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor});
    if (rel > report.worst_relative_error || report.worst_parameter.empty()) {
      if (rel >= report.worst_relative_error) {
        report.worst_relative_error = rel;
        report.worst_parameter = name;
      }
    }
  }
  return report;
}

}  // namespace ttav
