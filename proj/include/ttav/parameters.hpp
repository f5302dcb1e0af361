#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "ttav/autograd.hpp"
#include "ttav/rng.hpp"
#include "ttav/tensor.hpp"

namespace ttav {

template <typename T>
using GradientMap = std::map<std::string, Tensor<T>>;

// Named learnable tensors. std::map keeps iteration lexicographic, which fixes
// the order of every reduction over parameters.
template <typename T>
struct ParameterSet {
  std::map<std::string, Tensor<T>> tensors;
  std::uint64_t rng_seed = 0;

  bool contains(const std::string& name) const { return tensors.count(name) != 0; }

  const Tensor<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("unknown parameter '" + name + "'");
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError("unknown parameter '" + name + "'");
    return it->second;
  }

  void add(const std::string& name, Tensor<T> t) {
    if (!tensors.emplace(name, std::move(t)).second) {
      throw ShapeError("duplicate parameter '" + name + "'");
    }
  }

  std::int64_t count() const {
    std::int64_t n = 0;
    for (const auto& [_, t] : tensors) n += t.size();
    return n;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    out.rng_seed = rng_seed;
    for (const auto& [name, t] : tensors) out.tensors.emplace(name, t.template cast<U>());
    return out;
  }
};

// Binds parameters into one graph on demand, creating each leaf at most once.
template <typename T>
class Binder {
 public:
  Binder(ag::Graph<T>& graph, const ParameterSet<T>& params, bool trainable = true)
      : graph_(graph), params_(params), trainable_(trainable) {}

  ag::Graph<T>& graph() { return graph_; }
  const ParameterSet<T>& params() const { return params_; }

  ag::Var<T> operator()(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    auto v = graph_.leaf(params_.at(name), trainable_);
    bound_.emplace(name, v);
    return v;
  }

  bool is_bound(const std::string& name) const { return bound_.count(name) != 0; }

  // Gradient per parameter after graph().backward(); unreachable parameters
  // map to zero tensors of matching shape.
  GradientMap<T> gradients() const {
    GradientMap<T> out;
    for (const auto& [name, t] : params_.tensors) {
      Tensor<T> g(t.shape());
      auto it = bound_.find(name);
      if (it != bound_.end() && graph_.has_grad(it->second)) {
        auto src = graph_.grad(it->second);
        std::copy(src.begin(), src.end(), g.storage().begin());
      }
      out.emplace(name, std::move(g));
    }
    return out;
  }

 private:
  ag::Graph<T>& graph_;
  const ParameterSet<T>& params_;
  bool trainable_;
  std::map<std::string, ag::Var<T>> bound_;
};

// Reverse pass over `loss`, returning one gradient per parameter of the binder.
template <typename T>
GradientMap<T> backward(ag::Var<T> loss, Binder<T>& binder) {
  binder.graph().backward(loss);
  return binder.gradients();
}

namespace init {

// Linear weight [in, out] and bias [out], uniform in ±1/√in.
void linear(ParameterSet<float>& ps, const std::string& prefix, std::int64_t in, std::int64_t out,
            Rng& rng);
// Gaussian table, σ = 0.02.
void embedding(ParameterSet<float>& ps, const std::string& name, std::int64_t rows,
               std::int64_t width, Rng& rng);
void layer_norm(ParameterSet<float>& ps, const std::string& prefix, std::int64_t width);

}  // namespace init

}  // namespace ttav
