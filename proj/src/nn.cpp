#include "ttav/nn.hpp"

namespace ttav::nn {

std::string layer_prefix(const std::string& prefix, int layer) {
  return prefix + ".layers." + std::to_string(layer);
}

void init_transformer(ParameterSet<float>& ps, const std::string& prefix,
                      const TransformerConfig& cfg, Rng& rng) {
  if (cfg.width % cfg.heads != 0) throw ConfigError(prefix + ": width not divisible by heads");
  for (int l = 0; l < cfg.layers; ++l) {
    const auto p = layer_prefix(prefix, l);
    init::layer_norm(ps, p + ".ln1", cfg.width);
    init::linear(ps, p + ".attn.q", cfg.width, cfg.width, rng);
    init::linear(ps, p + ".attn.k", cfg.width, cfg.width, rng);
    init::linear(ps, p + ".attn.v", cfg.width, cfg.width, rng);
    init::linear(ps, p + ".attn.o", cfg.width, cfg.width, rng);
    init::layer_norm(ps, p + ".ln2", cfg.width);
    init::linear(ps, p + ".ff.fc1", cfg.width, cfg.ff, rng);
    init::linear(ps, p + ".ff.fc2", cfg.ff, cfg.width, rng);
  }
}

template <typename T>
ag::Var<T> linear(Binder<T>& b, const std::string& prefix, ag::Var<T> x) {
  return ag::add_rowvec(ag::matmul(x, b(prefix + ".w")), b(prefix + ".b"));
}

template <typename T>
ag::Var<T> layer_norm(Binder<T>& b, const std::string& prefix, ag::Var<T> x) {
  return ag::layer_norm(x, b(prefix + ".g"), b(prefix + ".b"));
}

template <typename T>
ag::Var<T> transformer_layer(Binder<T>& b, const std::string& prefix, const TransformerConfig& cfg,
                             ag::Var<T> x, const ag::AttentionSpec& spec,
                             const std::vector<std::int64_t>* positions, KvLayer<T>* cache) {
  auto xn = layer_norm(b, prefix + ".ln1", x);
  auto q = linear(b, prefix + ".attn.q", xn);
  auto k = linear(b, prefix + ".attn.k", xn);
  auto v = linear(b, prefix + ".attn.v", xn);
  if (positions) {
    q = ag::rope(q, *positions, cfg.heads);
    k = ag::rope(k, *positions, cfg.heads);
  }
  ag::Var<T> attended;
  if (cache) {
    auto kv = k.value();
    auto vv = v.value();
    cache->k.insert(cache->k.end(), kv.begin(), kv.end());
    cache->v.insert(cache->v.end(), vv.begin(), vv.end());
    cache->len += k.rows();
    auto& g = b.graph();
    auto kc = g.constant(cache->len, cfg.width, cache->k);
    auto vc = g.constant(cache->len, cfg.width, cache->v);
    attended = ag::attention(q, kc, vc, spec);
  } else {
    attended = ag::attention(q, k, v, spec);
  }
  auto h = ag::add(x, linear(b, prefix + ".attn.o", attended));
  auto hn = layer_norm(b, prefix + ".ln2", h);
  auto ff = linear(b, prefix + ".ff.fc2", ag::gelu(linear(b, prefix + ".ff.fc1", hn)));
  return ag::add(h, ff);
}

template <typename T>
ag::Var<T> transformer(Binder<T>& b, const std::string& prefix, const TransformerConfig& cfg,
                       ag::Var<T> x, const ag::AttentionSpec& spec,
                       const std::vector<std::int64_t>* positions) {
  for (int l = 0; l < cfg.layers; ++l) {
    x = transformer_layer(b, layer_prefix(prefix, l), cfg, x, spec, positions,
                          static_cast<KvLayer<T>*>(nullptr));
  }
  return x;
}

#define TTAV_INSTANTIATE(T)                                                                  \
  template ag::Var<T> linear(Binder<T>&, const std::string&, ag::Var<T>);                    \
  template ag::Var<T> layer_norm(Binder<T>&, const std::string&, ag::Var<T>);                \
  template ag::Var<T> transformer_layer(Binder<T>&, const std::string&,                      \
                                        const TransformerConfig&, ag::Var<T>,                \
                                        const ag::AttentionSpec&,                            \
                                        const std::vector<std::int64_t>*, KvLayer<T>*);      \
  template ag::Var<T> transformer(Binder<T>&, const std::string&, const TransformerConfig&,  \
                                  ag::Var<T>, const ag::AttentionSpec&,                      \
                                  const std::vector<std::int64_t>*);

TTAV_INSTANTIATE(float)
TTAV_INSTANTIATE(double)

#undef TTAV_INSTANTIATE

}  // namespace ttav::nn
