#pragma once

// Shared helpers for the test suites, including a reference transformer
// written directly against Eigen so attention results can be checked without
// going through the autograd engine.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ttav/parameters.hpp"
#include "ttav/rng.hpp"

namespace ttav::testing {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::RowVectorXd;

inline Mat to_mat(const Tensor<float>& t) {
  Mat m(t.rows(), t.cols());
  for (std::int64_t r = 0; r < t.rows(); ++r) {
    for (std::int64_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  }
  return m;
}

inline Mat param(const ParameterSet<float>& ps, const std::string& name) {
  return to_mat(ps.at(name));
}

inline Mat linear(const ParameterSet<float>& ps, const std::string& prefix, const Mat& x) {
  Mat y = x * param(ps, prefix + ".w");
  y.rowwise() += param(ps, prefix + ".b").row(0);
  return y;
}

inline Mat layer_norm(const ParameterSet<float>& ps, const std::string& prefix, const Mat& x) {
  const Vec g = param(ps, prefix + ".g").row(0);
  const Vec b = param(ps, prefix + ".b").row(0);
  Mat y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    y.row(r) = ((x.row(r).array() - mu) / std::sqrt(var + 1e-5)).matrix();
    y.row(r) = y.row(r).cwiseProduct(g) + b;
  }
  return y;
}

inline Mat gelu(const Mat& x) {
  return x.unaryExpr([](double v) {
    return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
  });
}

// Rotary encoding on adjacent column pairs of each head, position p per row.
inline Mat rope(const Mat& x, const std::vector<std::int64_t>& pos, int heads) {
  Mat y = x;
  const auto dh = x.cols() / heads;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (int h = 0; h < heads; ++h) {
      for (Eigen::Index m = 0; m < dh / 2; ++m) {
        const double theta = static_cast<double>(pos[static_cast<std::size_t>(r)]) *
                             std::pow(10000.0, -2.0 * static_cast<double>(m) / static_cast<double>(dh));
        const auto j = h * dh + 2 * m;
        y(r, j) = x(r, j) * std::cos(theta) - x(r, j + 1) * std::sin(theta);
        y(r, j + 1) = x(r, j) * std::sin(theta) + x(r, j + 1) * std::cos(theta);
      }
    }
  }
  return y;
}

// Explicit softmax(QKᵀ/√d_k)V per head over one sequence.
inline Mat attention(const Mat& q, const Mat& k, const Mat& v, int heads, bool causal) {
  const auto dh = q.cols() / heads;
  Mat out = Mat::Zero(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat qh = q.middleCols(h * dh, dh), kh = k.middleCols(h * dh, dh), vh = v.middleCols(h * dh, dh);
    Mat s = qh * kh.transpose() / std::sqrt(static_cast<double>(dh));
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      const Eigen::Index visible = causal ? i + 1 : s.cols();
      double mx = -1e300;
      for (Eigen::Index j = 0; j < visible; ++j) mx = std::max(mx, s(i, j));
      double z = 0.0;
      for (Eigen::Index j = 0; j < s.cols(); ++j) {
        s(i, j) = j < visible ? std::exp(s(i, j) - mx) : 0.0;
        z += s(i, j);
      }
      s.row(i) /= z;
    }
    out.middleCols(h * dh, dh) = s * vh;
  }
  return out;
}

inline Mat block(const ParameterSet<float>& ps, const std::string& p, const Mat& x, int heads,
                 bool causal, const std::vector<std::int64_t>* positions) {
  const Mat xn = layer_norm(ps, p + ".ln1", x);
  Mat q = linear(ps, p + ".attn.q", xn), k = linear(ps, p + ".attn.k", xn);
  const Mat v = linear(ps, p + ".attn.v", xn);
  if (positions) {
    q = rope(q, *positions, heads);
    k = rope(k, *positions, heads);
  }
  const Mat h = x + linear(ps, p + ".attn.o", attention(q, k, v, heads, causal));
  const Mat hn = layer_norm(ps, p + ".ln2", h);
  return h + linear(ps, p + ".ff.fc2", gelu(linear(ps, p + ".ff.fc1", hn)));
}

inline Tensor<float> random_tensor(Shape shape, Rng rng, double stddev = 1.0) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<float>(stddev * rng.normal());
  return t;
}

inline Tensor<double> random_tensor_d(Shape shape, Rng rng, double stddev = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = stddev * rng.normal();
  return t;
}

// Parameters drawn from N(0, σ²) everywhere, so layer-norm gains and biases
// are non-trivial and every path in an oracle comparison carries signal.
inline void randomize(ParameterSet<float>& ps, std::uint64_t seed, double stddev = 0.5) {
  Rng rng(seed);
  for (auto& [name, t] : ps.tensors) {
    Rng r = rng.fork(name);
    for (auto& v : t.storage()) v = static_cast<float>(stddev * r.normal());
  }
}

inline void randomize_d(ParameterSet<double>& ps, std::uint64_t seed, double stddev = 0.5) {
  Rng rng(seed);
  for (auto& [name, t] : ps.tensors) {
    Rng r = rng.fork(name);
    for (auto& v : t.storage()) v = stddev * r.normal();
  }
}

inline double max_diff(const Mat& a, const Tensor<float>& b) {
  return (a - to_mat(b)).cwiseAbs().maxCoeff();
}

}  // namespace ttav::testing
