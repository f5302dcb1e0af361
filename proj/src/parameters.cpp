#include "ttav/parameters.hpp"

#include <cmath>

namespace ttav::init {

void linear(ParameterSet<float>& ps, const std::string& prefix, std::int64_t in, std::int64_t out,
            Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Tensor<float> w({in, out});
  for (auto& v : w.storage()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  Tensor<float> b({out});
  for (auto& v : b.storage()) v = static_cast<float>((2.0 * rng.uniform() - 1.0) * bound);
  ps.add(prefix + ".w", std::move(w));
  ps.add(prefix + ".b", std::move(b));
}

void embedding(ParameterSet<float>& ps, const std::string& name, std::int64_t rows,
               std::int64_t width, Rng& rng) {
  Tensor<float> t({rows, width});
  for (auto& v : t.storage()) v = static_cast<float>(0.02 * rng.normal());
  ps.add(name, std::move(t));
}

void layer_norm(ParameterSet<float>& ps, const std::string& prefix, std::int64_t width) {
  ps.add(prefix + ".g", Tensor<float>({width}, 1.0f));
  ps.add(prefix + ".b", Tensor<float>({width}, 0.0f));
}

}  // namespace ttav::init
