#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ttav/autograd.hpp"
#include "ttav/parameters.hpp"

namespace ttav::nn {

struct TransformerConfig {
  std::int64_t width = 64;
  int layers = 2;
  int heads = 4;
  std::int64_t ff = 128;
};

void init_transformer(ParameterSet<float>& ps, const std::string& prefix,
                      const TransformerConfig& cfg, Rng& rng);

// Keys/values already fed through one layer, row-major [len, width].
template <typename T>
struct KvLayer {
  std::vector<T> k;
  std::vector<T> v;
  std::int64_t len = 0;
};

// x·W + b with W = prefix.w [in, out], b = prefix.b [out].
template <typename T>
ag::Var<T> linear(Binder<T>& b, const std::string& prefix, ag::Var<T> x);

template <typename T>
ag::Var<T> layer_norm(Binder<T>& b, const std::string& prefix, ag::Var<T> x);

// Pre-layer-norm block: x + attn(ln1(x)), then + ff(ln2(·)). When `positions`
// is non-null, queries and keys are rotated (rotary encoding). When `cache` is
// non-null the new keys/values are appended to it and attention runs against
// the whole cache; `spec` must then describe that layout.
template <typename T>
ag::Var<T> transformer_layer(Binder<T>& b, const std::string& prefix, const TransformerConfig& cfg,
                             ag::Var<T> x, const ag::AttentionSpec& spec,
                             const std::vector<std::int64_t>* positions, KvLayer<T>* cache);

// All layers of prefix.layers.{i}, no final norm.
template <typename T>
ag::Var<T> transformer(Binder<T>& b, const std::string& prefix, const TransformerConfig& cfg,
                       ag::Var<T> x, const ag::AttentionSpec& spec,
                       const std::vector<std::int64_t>* positions = nullptr);

std::string layer_prefix(const std::string& prefix, int layer);

}  // namespace ttav::nn
