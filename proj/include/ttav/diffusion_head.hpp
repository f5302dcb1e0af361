#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ttav/nn.hpp"

// Per-modality flow-matching head. Input tokens per sample:
//   [adapt_h(h or null) + time(τ)] [adapt_g(global)] [adapt_c(context) × P] [adapt_x(x_τ) × P]
// with full bidirectional attention; the x_τ rows are projected back to d.
namespace ttav::head {

struct HeadConfig {
  std::int64_t frame_dim = 32;
  std::int64_t patch = 4;
  std::int64_t cond_width = 64;  // backbone width of h
  std::int64_t global_dim = 32;
  nn::TransformerConfig body;

  std::int64_t tokens() const { return 2 + 2 * patch; }
};

void init(ParameterSet<float>& ps, const std::string& prefix, const HeadConfig& cfg, Rng& rng);

template <typename T>
struct Conditioning {
  Tensor<T> h;            // [D]
  Tensor<T> global_cond;  // [g]
  Tensor<T> context;      // [P, d]
  bool dropped = false;   // h replaced by the learned null embedding
};
using ConditioningBundle = Conditioning<float>;

template <typename T>
struct FlowSample {
  Tensor<T> x0, z;
  double tau = 0.0;
  Tensor<T> x_tau, v;
};

// τ = sigmoid(g), g ~ N(0, 1), clamped to [1e-5, 1 − 1e-5].
double tau_from_logit(double g);
double sample_tau(Rng& rng);

template <typename T>
FlowSample<T> make_flow_pair(const Tensor<T>& x0, const Tensor<T>& z, double tau);

// Sinusoidal embedding of 1000·τ, sin half then cos half.
std::vector<double> timestep_embedding(double tau, std::int64_t width);

// Conditioning for K samples at once, already on the graph.
template <typename T>
struct HeadBatch {
  ag::Var<T> h;                // [K, D]
  std::vector<bool> dropped;   // K flags
  ag::Var<T> global;           // [K, g]
  ag::Var<T> context;          // [K·P, d]
};

// x_tau [K·P, d], one τ per sample → v̂ [K·P, d].
template <typename T>
ag::Var<T> predict_velocity_batch(Binder<T>& b, const std::string& prefix, const HeadConfig& cfg,
                                  ag::Var<T> x_tau, const std::vector<double>& taus,
                                  const HeadBatch<T>& cond);

template <typename T>
Tensor<T> predict_velocity(const ParameterSet<T>& ps, const std::string& prefix,
                           const HeadConfig& cfg, const Tensor<T>& x_tau, double tau,
                           const Conditioning<T>& cond);

// Noise and τ for each of the K samples in x0 [K·P, d]; sample k draws from
// rng.fork(k).
template <typename T>
struct FlowDraw {
  Tensor<T> x_tau;
  Tensor<T> target;
  std::vector<double> taus;
};
template <typename T>
FlowDraw<T> draw_flow(const Tensor<T>& x0, std::int64_t patch, const Rng& rng);

// Σ‖v̂ − (z − x0)‖² over every sample.
template <typename T>
ag::Var<T> cfm_sse(Binder<T>& b, const std::string& prefix, const HeadConfig& cfg,
                   const Tensor<T>& x0, const HeadBatch<T>& cond, const Rng& rng);

// Mean squared velocity error for one bundle.
template <typename T>
ag::Var<T> cfm_loss(Binder<T>& b, const std::string& prefix, const HeadConfig& cfg,
                    const Tensor<T>& x0, const Conditioning<T>& cond, const Rng& rng);

bool draw_drop(double p_drop, Rng& rng);
template <typename T>
Conditioning<T> drop_condition(Conditioning<T> cond, double p_drop, Rng& rng);

// v_null + scale·(v_cond − v_null); scale 1 and 0 return an input unchanged.
template <typename T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_null, double scale);

template <typename T>
using VelocityField = std::function<Tensor<T>(const Tensor<T>& x, double tau)>;

// Uniform Euler from τ = 1 to 0: x ← x − Δτ·v(x, τ), Δτ = 1/steps. The state
// accumulates in double.
template <typename T>
Tensor<T> euler_integrate(const Tensor<T>& x_init, int steps, const VelocityField<T>& field);

struct EulerSettings {
  int steps = 10;
  double temperature = 0.7;
  double cfg_scale = 2.0;
};

// Starts from temperature·z. One head evaluation per step when cfg_scale is 1
// (honouring cond.dropped), otherwise conditional and null batched together,
// which counts as two. `evaluations` (optional) accumulates the count.
Tensor<float> euler_sample(const ParameterSet<float>& ps, const std::string& prefix,
                           const HeadConfig& cfg, const ConditioningBundle& cond,
                           const EulerSettings& settings, Rng& rng,
                           std::int64_t* evaluations = nullptr);

}  // namespace ttav::head
