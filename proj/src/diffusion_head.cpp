#include "ttav/diffusion_head.hpp"

#include <algorithm>
#include <cmath>

namespace ttav::head {

void init(ParameterSet<float>& ps, const std::string& prefix, const HeadConfig& cfg, Rng& rng) {
  const auto w = cfg.body.width;
  init::linear(ps, prefix + ".adapt_h", cfg.cond_width, w, rng);
  init::linear(ps, prefix + ".adapt_g", cfg.global_dim, w, rng);
  init::linear(ps, prefix + ".adapt_c", cfg.frame_dim, w, rng);
  init::linear(ps, prefix + ".adapt_x", cfg.frame_dim, w, rng);
  init::linear(ps, prefix + ".time.fc1", w, w, rng);
  init::linear(ps, prefix + ".time.fc2", w, w, rng);
  init::embedding(ps, prefix + ".pos", cfg.tokens(), w, rng);
  init::embedding(ps, prefix + ".null", 1, cfg.cond_width, rng);
  nn::init_transformer(ps, prefix + ".body", cfg.body, rng);
  init::layer_norm(ps, prefix + ".final_ln", w);
  init::linear(ps, prefix + ".out", w, cfg.frame_dim, rng);
}

double tau_from_logit(double g) {
  const double t = 1.0 / (1.0 + std::exp(-g));
  return std::clamp(t, 1e-5, 1.0 - 1e-5);
}

double sample_tau(Rng& rng) { return tau_from_logit(rng.normal()); }

template <typename T>
FlowSample<T> make_flow_pair(const Tensor<T>& x0, const Tensor<T>& z, double tau) {
  if (x0.shape() != z.shape()) throw ShapeError("make_flow_pair: x0 and z differ in shape");
  FlowSample<T> s{x0, z, tau, Tensor<T>(x0.shape()), Tensor<T>(x0.shape())};
  const T a = static_cast<T>(1.0 - tau), c = static_cast<T>(tau);
  for (std::int64_t i = 0; i < x0.size(); ++i) {
    s.x_tau[i] = a * x0[i] + c * z[i];
    s.v[i] = z[i] - x0[i];
  }
  return s;
}

std::vector<double> timestep_embedding(double tau, std::int64_t width) {
  const auto half = width / 2;
  std::vector<double> e(static_cast<std::size_t>(width), 0.0);
  for (std::int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = 1000.0 * tau * freq;
    e[static_cast<std::size_t>(i)] = std::sin(arg);
    e[static_cast<std::size_t>(half + i)] = std::cos(arg);
  }
  return e;
}

template <typename T>
ag::Var<T> predict_velocity_batch(Binder<T>& b, const std::string& prefix, const HeadConfig& cfg,
                                  ag::Var<T> x_tau, const std::vector<double>& taus,
                                  const HeadBatch<T>& cond) {
  auto& g = b.graph();
  const auto K = static_cast<std::int64_t>(taus.size());
  const auto P = cfg.patch;
  const auto W = cfg.body.width;
  if (K == 0) throw ShapeError(prefix + ": empty batch");
  if (x_tau.rows() != K * P || x_tau.cols() != cfg.frame_dim) {
    throw ShapeError(prefix + ": x_tau must be [" + std::to_string(K * P) + ", " +
                     std::to_string(cfg.frame_dim) + "]");
  }
  if (cond.context.rows() != K * P || cond.context.cols() != cfg.frame_dim) {
    throw ShapeError(prefix + ": context must hold exactly P frames per sample");
  }
  if (cond.h.rows() != K || cond.h.cols() != cfg.cond_width) throw ShapeError(prefix + ": bad h");
  if (cond.global.rows() != K || cond.global.cols() != cfg.global_dim) {
    throw ShapeError(prefix + ": bad global condition");
  }
  if (static_cast<std::int64_t>(cond.dropped.size()) != K) throw ShapeError(prefix + ": bad drop mask");

  // Null substitution by row selection, so a dropped sample never reads h.
  std::vector<std::int64_t> pick;
  for (std::int64_t k = 0; k < K; ++k) pick.push_back(cond.dropped[static_cast<std::size_t>(k)] ? K : k);
  auto h = ag::gather_rows(ag::concat_rows<T>({cond.h, b(prefix + ".null")}), std::move(pick));

  std::vector<T> temb;
  temb.reserve(static_cast<std::size_t>(K * W));
  for (double t : taus) {
    for (double v : timestep_embedding(t, W)) temb.push_back(static_cast<T>(v));
  }
  auto time = nn::linear(b, prefix + ".time.fc2",
                         ag::gelu(nn::linear(b, prefix + ".time.fc1", g.constant(K, W, std::move(temb)))));
  auto first = ag::add(nn::linear(b, prefix + ".adapt_h", h), time);
  auto glob = nn::linear(b, prefix + ".adapt_g", cond.global);
  auto ctx = nn::linear(b, prefix + ".adapt_c", cond.context);
  auto xin = nn::linear(b, prefix + ".adapt_x", x_tau);
  auto table = ag::concat_rows<T>({first, glob, ctx, xin});

  const auto S = cfg.tokens();
  std::vector<std::int64_t> order, slots, outputs;
  for (std::int64_t k = 0; k < K; ++k) {
    order.push_back(k);
    order.push_back(K + k);
    for (std::int64_t f = 0; f < P; ++f) order.push_back(2 * K + k * P + f);
    for (std::int64_t f = 0; f < P; ++f) order.push_back(2 * K + K * P + k * P + f);
    for (std::int64_t s = 0; s < S; ++s) slots.push_back(s);
    for (std::int64_t f = 0; f < P; ++f) outputs.push_back(k * S + 2 + P + f);
  }
  auto x = ag::add(ag::gather_rows(table, std::move(order)),
                   ag::gather_rows(b(prefix + ".pos"), std::move(slots)));
  x = nn::transformer(b, prefix + ".body", cfg.body, x,
                      ag::AttentionSpec::uniform(K, S, cfg.body.heads, false));
  auto y = nn::layer_norm(b, prefix + ".final_ln", ag::gather_rows(x, std::move(outputs)));
  return nn::linear(b, prefix + ".out", y);
}

namespace {

template <typename T>
ag::Var<T> row_constant(ag::Graph<T>& g, const Tensor<T>& t) {
  return g.constant(1, t.size(), t.storage());
}

template <typename T>
void check_bundle(const HeadConfig& cfg, const Conditioning<T>& c) {
  if (c.h.size() != cfg.cond_width) throw ShapeError("conditioning h has the wrong width");
  if (c.global_cond.size() != cfg.global_dim) throw ShapeError("global condition has the wrong width");
  if (c.context.rows() != cfg.patch || c.context.cols() != cfg.frame_dim) {
    throw ShapeError("context must be " + std::to_string(cfg.patch) + " frames of width " +
                     std::to_string(cfg.frame_dim));
  }
}

}  // namespace

template <typename T>
Tensor<T> predict_velocity(const ParameterSet<T>& ps, const std::string& prefix,
                           const HeadConfig& cfg, const Tensor<T>& x_tau, double tau,
                           const Conditioning<T>& cond) {
  check_bundle(cfg, cond);
  ag::Graph<T> g(false);
  Binder<T> b(g, ps, false);
  HeadBatch<T> hb{row_constant(g, cond.h), {cond.dropped}, row_constant(g, cond.global_cond),
                  g.constant(cond.context)};
  auto v = predict_velocity_batch(b, prefix, cfg, g.constant(x_tau), {tau}, hb);
  return v.tensor().reshaped(x_tau.shape());
}

template <typename T>
FlowDraw<T> draw_flow(const Tensor<T>& x0, std::int64_t patch, const Rng& rng) {
  if (patch < 1 || x0.rows() % patch != 0) throw ShapeError("draw_flow: rows not a multiple of P");
  const auto K = x0.rows() / patch;
  const auto d = x0.cols();
  FlowDraw<T> out{Tensor<T>({x0.rows(), d}), Tensor<T>({x0.rows(), d}), {}};
  for (std::int64_t k = 0; k < K; ++k) {
    Rng r = rng.fork(static_cast<std::uint64_t>(k));
    const double tau = sample_tau(r);
    out.taus.push_back(tau);
    const T a = static_cast<T>(1.0 - tau), c = static_cast<T>(tau);
    for (std::int64_t i = k * patch * d; i < (k + 1) * patch * d; ++i) {
      const T z = static_cast<T>(r.normal());
      out.x_tau[i] = a * x0[i] + c * z;
      out.target[i] = z - x0[i];
    }
  }
  return out;
}

template <typename T>
ag::Var<T> cfm_sse(Binder<T>& b, const std::string& prefix, const HeadConfig& cfg,
                   const Tensor<T>& x0, const HeadBatch<T>& cond, const Rng& rng) {
  auto& g = b.graph();
  auto flow = draw_flow(x0, cfg.patch, rng);
  auto v = predict_velocity_batch(b, prefix, cfg, g.constant(flow.x_tau), flow.taus, cond);
  return ag::sse(v, g.constant(flow.target));
}

template <typename T>
ag::Var<T> cfm_loss(Binder<T>& b, const std::string& prefix, const HeadConfig& cfg,
                    const Tensor<T>& x0, const Conditioning<T>& cond, const Rng& rng) {
  check_bundle(cfg, cond);
  if (x0.rows() != cfg.patch || x0.cols() != cfg.frame_dim) throw ShapeError("cfm_loss: bad x0");
  auto& g = b.graph();
  HeadBatch<T> hb{row_constant(g, cond.h), {cond.dropped}, row_constant(g, cond.global_cond),
                  g.constant(cond.context)};
  auto loss = ag::scale(cfm_sse(b, prefix, cfg, x0, hb, rng), static_cast<T>(1.0 / x0.size()));
  if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("cfm_loss is not finite");
  return loss;
}

bool draw_drop(double p_drop, Rng& rng) {
  if (!(p_drop >= 0.0 && p_drop < 1.0)) throw DomainError("p_drop must be in [0, 1)");
  return rng.bernoulli(p_drop);
}

template <typename T>
Conditioning<T> drop_condition(Conditioning<T> cond, double p_drop, Rng& rng) {
  if (draw_drop(p_drop, rng)) cond.dropped = true;
  return cond;
}

template <typename T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_null, double scale) {
  if (v_cond.shape() != v_null.shape()) throw ShapeError("cfg_velocity: shape mismatch");
  if (scale == 1.0) return v_cond;
  if (scale == 0.0) return v_null;
  Tensor<T> out(v_cond.shape());
  const T s = static_cast<T>(scale);
  for (std::int64_t i = 0; i < out.size(); ++i) out[i] = v_null[i] + s * (v_cond[i] - v_null[i]);
  return out;
}

template <typename T>
Tensor<T> euler_integrate(const Tensor<T>& x_init, int steps, const VelocityField<T>& field) {
  if (steps < 1) throw DomainError("Euler sampler needs at least one step");
  std::vector<double> x(x_init.storage().begin(), x_init.storage().end());
  Tensor<T> cur = x_init;
  const double dt = 1.0 / steps;
  for (int s = 0; s < steps; ++s) {
    const double tau = 1.0 - s * dt;
    auto v = field(cur, tau);
    if (v.shape() != cur.shape()) throw ShapeError("velocity field changed the state shape");
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] -= dt * static_cast<double>(v[static_cast<std::int64_t>(i)]);
      if (!std::isfinite(x[i])) {
        throw NumericError("non-finite sampler state at step " + std::to_string(s));
      }
      cur[static_cast<std::int64_t>(i)] = static_cast<T>(x[i]);
    }
  }
  return cur;
}

Tensor<float> euler_sample(const ParameterSet<float>& ps, const std::string& prefix,
                           const HeadConfig& cfg, const ConditioningBundle& cond,
                           const EulerSettings& settings, Rng& rng, std::int64_t* evaluations) {
  check_bundle(cfg, cond);
  if (!(settings.temperature >= 0.0 && settings.temperature <= 1.0)) {
    throw DomainError("temperature must be in [0, 1]");
  }
  Tensor<float> x({cfg.patch, cfg.frame_dim});
  for (auto& v : x.storage()) v = static_cast<float>(settings.temperature * rng.normal());

  const bool guided = settings.cfg_scale != 1.0;
  VelocityField<float> field = [&](const Tensor<float>& state, double tau) {
    ag::Graph<float> g(false);
    Binder<float> b(g, ps, false);
    if (!guided) {
      if (evaluations) *evaluations += 1;
      HeadBatch<float> hb{row_constant(g, cond.h), {cond.dropped}, row_constant(g, cond.global_cond),
                          g.constant(cond.context)};
      return predict_velocity_batch(b, prefix, cfg, g.constant(state), {tau}, hb)
          .tensor()
          .reshaped(state.shape());
    }
    if (evaluations) *evaluations += 2;
    auto twice = [&](const Tensor<float>& t) {
      std::vector<float> v(t.storage());
      v.insert(v.end(), t.storage().begin(), t.storage().end());
      return v;
    };
    const auto D = cfg.cond_width;
    HeadBatch<float> hb{g.constant(2, D, twice(cond.h)), {false, true},
                        g.constant(2, cfg.global_dim, twice(cond.global_cond)),
                        g.constant(2 * cfg.patch, cfg.frame_dim, twice(cond.context))};
    auto both = predict_velocity_batch(b, prefix, cfg, g.constant(2 * cfg.patch, cfg.frame_dim, twice(state)),
                                       {tau, tau}, hb)
                    .tensor();
    return cfg_velocity(both.slice_rows(0, cfg.patch), both.slice_rows(cfg.patch, cfg.patch),
                        settings.cfg_scale);
  };
  return euler_integrate(x, settings.steps, field);
}

#define TTAV_INSTANTIATE(T)                                                                    \
  template FlowSample<T> make_flow_pair(const Tensor<T>&, const Tensor<T>&, double);           \
  template ag::Var<T> predict_velocity_batch(Binder<T>&, const std::string&, const HeadConfig&, \
                                             ag::Var<T>, const std::vector<double>&,           \
                                             const HeadBatch<T>&);                             \
  template Tensor<T> predict_velocity(const ParameterSet<T>&, const std::string&,             \
                                      const HeadConfig&, const Tensor<T>&, double,             \
                                      const Conditioning<T>&);                                 \
  template FlowDraw<T> draw_flow(const Tensor<T>&, std::int64_t, const Rng&);                  \
  template ag::Var<T> cfm_sse(Binder<T>&, const std::string&, const HeadConfig&,              \
                              const Tensor<T>&, const HeadBatch<T>&, const Rng&);              \
  template ag::Var<T> cfm_loss(Binder<T>&, const std::string&, const HeadConfig&,             \
                               const Tensor<T>&, const Conditioning<T>&, const Rng&);          \
  template Conditioning<T> drop_condition(Conditioning<T>, double, Rng&);                      \
  template Tensor<T> cfg_velocity(const Tensor<T>&, const Tensor<T>&, double);                 \
  template Tensor<T> euler_integrate(const Tensor<T>&, int, const VelocityField<T>&);

TTAV_INSTANTIATE(float)
TTAV_INSTANTIATE(double)

#undef TTAV_INSTANTIATE

}  // namespace ttav::head
