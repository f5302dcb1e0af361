#include "ttav/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ttav::ag {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch [" + std::to_string(a.rows()) + "," +
                     std::to_string(a.cols()) + "] vs [" + std::to_string(b.rows()) + "," +
                     std::to_string(b.cols()) + "]");
  }
}

template <typename T>
Graph<T>& graph_of(Var<T> a) {
  if (!a.valid()) throw ShapeError("operation on an unbound variable");
  return *a.graph;
}

template <typename T>
std::size_t numel(Var<T> a) {
  return static_cast<std::size_t>(a.rows() * a.cols());
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(Var<T> x, Fwd fwd, Deriv deriv) {
  auto& g = graph_of(x);
  const std::size_t n = numel(x);
  const T* xd = x.value().data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xd[i]);
  int xi = x.id;
  return g.emit(x.rows(), x.cols(), std::move(out), {x}, [xi, n, deriv](Graph<T>& g, int self) {
    if (!g.requires_grad(xi)) return;
    const T* go = g.grad_data(self);
    const T* xv = g.data(xi);
    const T* yv = g.data(self);
    T* gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * deriv(xv[i], yv[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------- Graph

template <typename T>
Var<T> Graph<T>::leaf(const Tensor<T>& t, bool requires_grad) {
  Node node;
  node.rows = t.rows();
  node.cols = t.cols();
  node.data = t.data().data();
  node.requires_grad = record_ && requires_grad;
  node.is_leaf = true;
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::constant(const Tensor<T>& t) {
  return constant(t.rows(), t.cols(), t.storage());
}

template <typename T>
Var<T> Graph<T>::constant(std::int64_t rows, std::int64_t cols, std::vector<T> values) {
  if (static_cast<std::int64_t>(values.size()) != rows * cols) {
    throw ShapeError("constant: value count does not match shape");
  }
  Node node;
  node.rows = rows;
  node.cols = cols;
  node.owned = std::move(values);
  node.data = node.owned.data();
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::emit(std::int64_t rows, std::int64_t cols, std::vector<T> value,
                      std::initializer_list<Var<T>> inputs, Backward backward) {
  return emit(rows, cols, std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Graph<T>::emit(std::int64_t rows, std::int64_t cols, std::vector<T> value,
                      const std::vector<Var<T>>& inputs, Backward backward) {
  Node node;
  node.rows = rows;
  node.cols = cols;
  node.owned = std::move(value);
  node.data = node.owned.data();
  if (record_) {
    for (const auto& in : inputs) {
      if (in.graph != this) throw ShapeError("mixing variables from different graphs");
      node.requires_grad = node.requires_grad || nodes_[in.id].requires_grad;
    }
    if (node.requires_grad) node.backward = std::move(backward);
  }
  nodes_.push_back(std::move(node));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
T* Graph<T>::grad_buffer(int id) {
  auto& node = nodes_[id];
  if (node.grad.empty()) node.grad.assign(static_cast<std::size_t>(node.rows * node.cols), T(0));
  return node.grad.data();
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw ShapeError("backward: loss belongs to another graph");
  if (nodes_[loss.id].rows * nodes_[loss.id].cols != 1) {
    throw ShapeError("backward: loss must be a scalar");
  }
  if (!std::isfinite(loss.item())) throw NumericError("backward: non-finite loss");
  if (!record_ || !nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id)[0] += T(1);
  for (int id = loss.id; id >= 0; --id) {
    auto& node = nodes_[id];
    if (node.grad.empty() || !node.backward) continue;
    node.backward(*this, id);
  }
  for (const auto& node : nodes_) {
    if (!node.is_leaf || node.grad.empty()) continue;
    for (T v : node.grad) {
      if (!std::isfinite(v)) throw NumericError("backward: non-finite gradient");
    }
  }
}

// ---------------------------------------------------------------- AttentionSpec

AttentionSpec AttentionSpec::self(const std::vector<std::int64_t>& lengths, int heads,
                                  bool causal) {
  AttentionSpec spec;
  spec.heads = heads;
  spec.causal = causal;
  std::int64_t off = 0;
  for (auto len : lengths) {
    spec.segments.push_back({off, len, off, len});
    off += len;
  }
  return spec;
}

AttentionSpec AttentionSpec::uniform(std::int64_t count, std::int64_t length, int heads,
                                     bool causal) {
  return self(std::vector<std::int64_t>(static_cast<std::size_t>(count), length), heads, causal);
}

// ---------------------------------------------------------------- ops

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& g = graph_of(a);
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner extents differ (" + std::to_string(a.cols()) + " vs " +
                     std::to_string(b.rows()) + ")");
  }
  const auto r = a.rows(), k = a.cols(), c = b.cols();
  std::vector<T> out(static_cast<std::size_t>(r * c));
  MMap<T>(out.data(), r, c).noalias() =
      CMap<T>(a.value().data(), r, k) * CMap<T>(b.value().data(), k, c);
  int ai = a.id, bi = b.id;
  return g.emit(r, c, std::move(out), {a, b}, [ai, bi, r, k, c](Graph<T>& g, int self) {
    CMap<T> go(g.grad_data(self), r, c);
    if (g.requires_grad(ai)) {
      MMap<T>(g.grad_buffer(ai), r, k).noalias() += go * CMap<T>(g.data(bi), k, c).transpose();
    }
    if (g.requires_grad(bi)) {
      MMap<T>(g.grad_buffer(bi), k, c).noalias() += CMap<T>(g.data(ai), r, k).transpose() * go;
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  auto& g = graph_of(a);
  const std::size_t n = numel(a);
  std::vector<T> out(n);
  const T* ad = a.value().data();
  const T* bd = b.value().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] + bd[i];
  int ai = a.id, bi = b.id;
  return g.emit(a.rows(), a.cols(), std::move(out), {a, b}, [ai, bi, n](Graph<T>& g, int self) {
    const T* go = g.grad_data(self);
    for (int id : {ai, bi}) {
      if (!g.requires_grad(id)) continue;
      T* gx = g.grad_buffer(id);
      for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  auto& g = graph_of(a);
  const std::size_t n = numel(a);
  std::vector<T> out(n);
  const T* ad = a.value().data();
  const T* bd = b.value().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] - bd[i];
  int ai = a.id, bi = b.id;
  return g.emit(a.rows(), a.cols(), std::move(out), {a, b}, [ai, bi, n](Graph<T>& g, int self) {
    const T* go = g.grad_data(self);
    if (g.requires_grad(ai)) {
      T* gx = g.grad_buffer(ai);
      for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
    }
    if (g.requires_grad(bi)) {
      T* gx = g.grad_buffer(bi);
      for (std::size_t i = 0; i < n; ++i) gx[i] -= go[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  auto& g = graph_of(a);
  const std::size_t n = numel(a);
  std::vector<T> out(n);
  const T* ad = a.value().data();
  const T* bd = b.value().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = ad[i] * bd[i];
  int ai = a.id, bi = b.id;
  return g.emit(a.rows(), a.cols(), std::move(out), {a, b}, [ai, bi, n](Graph<T>& g, int self) {
    const T* go = g.grad_data(self);
    if (g.requires_grad(ai)) {
      T* gx = g.grad_buffer(ai);
      const T* bv = g.data(bi);
      for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * bv[i];
    }
    if (g.requires_grad(bi)) {
      T* gx = g.grad_buffer(bi);
      const T* av = g.data(ai);
      for (std::size_t i = 0; i < n; ++i) gx[i] += go[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary<T>(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {
  auto& g = graph_of(a);
  if (b.rows() != 1 || b.cols() != a.cols()) throw ShapeError("add_rowvec: bias shape mismatch");
  const auto r = a.rows(), c = a.cols();
  std::vector<T> out(static_cast<std::size_t>(r * c));
  const T* ad = a.value().data();
  const T* bd = b.value().data();
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = ad[i * c + j] + bd[j];
  }
  int ai = a.id, bi = b.id;
  return g.emit(r, c, std::move(out), {a, b}, [ai, bi, r, c](Graph<T>& g, int self) {
    const T* go = g.grad_data(self);
    if (g.requires_grad(ai)) {
      T* gx = g.grad_buffer(ai);
      for (std::int64_t i = 0; i < r * c; ++i) gx[i] += go[i];
    }
    if (g.requires_grad(bi)) {
      T* gb = g.grad_buffer(bi);
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) gb[j] += go[i * c + j];
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  auto& g = graph_of(x);
  const auto r = x.rows(), c = x.cols();
  if (gain.rows() * gain.cols() != c || bias.rows() * bias.cols() != c) {
    throw ShapeError("layer_norm: gain/bias width mismatch");
  }
  std::vector<T> out(static_cast<std::size_t>(r * c));
  std::vector<T> stats(static_cast<std::size_t>(2 * r));  // mean, rstd per row
  const T* xd = x.value().data();
  const T* gd = gain.value().data();
  const T* bd = bias.value().data();
  for (std::int64_t i = 0; i < r; ++i) {
    const T* row = xd + i * c;
    T mu = 0;
    for (std::int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(c);
    T rstd = T(1) / std::sqrt(var + eps);
    stats[2 * i] = mu;
    stats[2 * i + 1] = rstd;
    for (std::int64_t j = 0; j < c; ++j) out[i * c + j] = (row[j] - mu) * rstd * gd[j] + bd[j];
  }
  int xi = x.id, gi = gain.id, bi = bias.id;
  return g.emit(r, c, std::move(out), {x, gain, bias},
                [xi, gi, bi, r, c, stats = std::move(stats)](Graph<T>& g, int self) {
                  const T* go = g.grad_data(self);
                  const T* xv = g.data(xi);
                  const T* gv = g.data(gi);
                  T* gx = g.requires_grad(xi) ? g.grad_buffer(xi) : nullptr;
                  T* gg = g.requires_grad(gi) ? g.grad_buffer(gi) : nullptr;
                  T* gb = g.requires_grad(bi) ? g.grad_buffer(bi) : nullptr;
                  for (std::int64_t i = 0; i < r; ++i) {
                    const T mu = stats[2 * i], rstd = stats[2 * i + 1];
                    const T* row = xv + i * c;
                    const T* gr = go + i * c;
                    T mean_d = 0, mean_dx = 0;
                    for (std::int64_t j = 0; j < c; ++j) {
                      T xhat = (row[j] - mu) * rstd;
                      T d = gr[j] * gv[j];
                      mean_d += d;
                      mean_dx += d * xhat;
                      if (gg) gg[j] += gr[j] * xhat;
                      if (gb) gb[j] += gr[j];
                    }
                    if (!gx) continue;
                    mean_d /= static_cast<T>(c);
                    mean_dx /= static_cast<T>(c);
                    for (std::int64_t j = 0; j < c; ++j) {
                      T xhat = (row[j] - mu) * rstd;
                      gx[i * c + j] += rstd * (gr[j] * gv[j] - mean_d - xhat * mean_dx);
                    }
                  }
                });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  constexpr T k = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T a = T(0.044715);
  return unary<T>(
      x,
      [](T v) { return T(0.5) * v * (T(1) + std::tanh(k * (v + a * v * v * v))); },
      [](T v, T) {
        T t = std::tanh(k * (v + a * v * v * v));
        return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * a * v * v);
      });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  return unary<T>(
      x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> softplus(Var<T> x) {
  return unary<T>(
      x, [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](T v, T) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      });
}

template <typename T>
Var<T> log(Var<T> x) {
  for (T v : x.value()) {
    if (!(v > 0)) throw DomainError("log of a non-positive value");
  }
  return unary<T>(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> square(Var<T> x) {
  return unary<T>(x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> sum(Var<T> x) {
  auto& g = graph_of(x);
  T s = 0;
  for (T v : x.value()) s += v;
  int xi = x.id;
  const std::size_t n = numel(x);
  return g.emit(1, 1, {s}, {x}, [xi, n](Graph<T>& g, int self) {
    if (!g.requires_grad(xi)) return;
    const T go = g.grad_data(self)[0];
    T* gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < n; ++i) gx[i] += go;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  const auto n = numel(x);
  if (n == 0) throw ShapeError("mean of an empty node");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> weighted_sum(Var<T> x, std::vector<T> w) {
  auto& g = graph_of(x);
  if (w.size() != numel(x)) throw ShapeError("weighted_sum: coefficient count mismatch");
  T s = 0;
  const T* xd = x.value().data();
  for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * xd[i];
  int xi = x.id;
  return g.emit(1, 1, {s}, {x}, [xi, w = std::move(w)](Graph<T>& g, int self) {
    if (!g.requires_grad(xi)) return;
    const T go = g.grad_data(self)[0];
    T* gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < w.size(); ++i) gx[i] += go * w[i];
  });
}

template <typename T>
Var<T> sse(Var<T> a, Var<T> target) {
  require_same_shape(a, target, "sse");
  auto& g = graph_of(a);
  const std::size_t n = numel(a);
  const T* ad = a.value().data();
  const T* td = target.value().data();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += (ad[i] - td[i]) * (ad[i] - td[i]);
  int ai = a.id, ti = target.id;
  return g.emit(1, 1, {s}, {a}, [ai, ti, n](Graph<T>& g, int self) {
    if (!g.requires_grad(ai)) return;
    const T go = g.grad_data(self)[0];
    const T* av = g.data(ai);
    const T* tv = g.data(ti);
    T* gx = g.grad_buffer(ai);
    for (std::size_t i = 0; i < n; ++i) gx[i] += go * T(2) * (av[i] - tv[i]);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  auto& g = graph_of(parts.front());
  const auto c = parts.front().cols();
  std::int64_t r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
  }
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(r * c));
  std::vector<int> ids;
  for (const auto& p : parts) {
    auto v = p.value();
    out.insert(out.end(), v.begin(), v.end());
    ids.push_back(p.id);
  }
  return g.emit(r, c, std::move(out), parts, [ids = std::move(ids), c](Graph<T>& g, int self) {
    const T* go = g.grad_data(self);
    std::int64_t off = 0;
    for (int id : ids) {
      const auto n = g.rows(id) * c;
      if (g.requires_grad(id)) {
        T* gx = g.grad_buffer(id);
        for (std::int64_t i = 0; i < n; ++i) gx[i] += go[off + i];
      }
      off += n;
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<std::int64_t> index) {
  auto& g = graph_of(x);
  const auto c = x.cols();
  const auto src_rows = x.rows();
  std::vector<T> out(index.size() * static_cast<std::size_t>(c));
  const T* xd = x.value().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= src_rows) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xd + index[i] * c, c, out.data() + i * c);
  }
  int xi = x.id;
  const auto r = static_cast<std::int64_t>(index.size());
  return g.emit(r, c, std::move(out), {x}, [xi, c, index = std::move(index)](Graph<T>& g, int self) {
    if (!g.requires_grad(xi)) return;
    const T* go = g.grad_data(self);
    T* gx = g.grad_buffer(xi);
    for (std::size_t i = 0; i < index.size(); ++i) {
      T* dst = gx + index[i] * c;
      const T* src = go + i * c;
      for (std::int64_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, std::int64_t rows, std::int64_t cols) {
  auto& g = graph_of(x);
  if (rows * cols != x.rows() * x.cols()) throw ShapeError("reshape: element count mismatch");
  auto v = x.value();
  int xi = x.id;
  const std::size_t n = numel(x);
  return g.emit(rows, cols, std::vector<T>(v.begin(), v.end()), {x},
                [xi, n](Graph<T>& g, int self) {
                  if (!g.requires_grad(xi)) return;
                  const T* go = g.grad_data(self);
                  T* gx = g.grad_buffer(xi);
                  for (std::size_t i = 0; i < n; ++i) gx[i] += go[i];
                });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionSpec& spec) {
  auto& g = graph_of(q);
  const auto width = q.cols();
  if (k.cols() != width || v.cols() != width || k.rows() != v.rows()) {
    throw ShapeError("attention: q/k/v shape mismatch");
  }
  if (spec.heads < 1 || width % spec.heads != 0) {
    throw ShapeError("attention: width not divisible by head count");
  }
  const int heads = spec.heads;
  const std::int64_t dh = width / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<std::int64_t> prob_offset;
  std::int64_t total = 0;
  for (const auto& s : spec.segments) {
    if (s.q_begin < 0 || s.q_begin + s.q_len > q.rows() || s.k_begin < 0 ||
        s.k_begin + s.k_len > k.rows() || s.q_len > s.k_len || s.k_len == 0) {
      throw ShapeError("attention: segment out of range");
    }
    prob_offset.push_back(total);
    total += s.q_len * s.k_len * heads;
  }
  std::vector<T> probs(static_cast<std::size_t>(total), T(0));
  std::vector<T> out(static_cast<std::size_t>(q.rows() * width), T(0));
  const T* qd = q.value().data();
  const T* kd = k.value().data();
  const T* vd = v.value().data();
  std::vector<T> scores;
  for (std::size_t si = 0; si < spec.segments.size(); ++si) {
    const auto& s = spec.segments[si];
    const std::int64_t shift = s.k_len - s.q_len;
    scores.resize(static_cast<std::size_t>(s.k_len));
    for (int h = 0; h < heads; ++h) {
      const std::int64_t col = h * dh;
      for (std::int64_t i = 0; i < s.q_len; ++i) {
        const std::int64_t limit = spec.causal ? i + shift : s.k_len - 1;
        const T* qi = qd + (s.q_begin + i) * width + col;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j <= limit; ++j) {
          const T* kj = kd + (s.k_begin + j) * width + col;
          T acc = 0;
          for (std::int64_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
          scores[j] = acc * scale_factor;
          mx = std::max(mx, scores[j]);
        }
        T denom = 0;
        for (std::int64_t j = 0; j <= limit; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          denom += scores[j];
        }
        T* p = probs.data() + prob_offset[si] + (h * s.q_len + i) * s.k_len;
        T* oi = out.data() + (s.q_begin + i) * width + col;
        for (std::int64_t j = 0; j <= limit; ++j) {
          p[j] = scores[j] / denom;
          const T* vj = vd + (s.k_begin + j) * width + col;
          for (std::int64_t d = 0; d < dh; ++d) oi[d] += p[j] * vj[d];
        }
      }
    }
  }
  int qi_id = q.id, ki_id = k.id, vi_id = v.id;
  return g.emit(
      q.rows(), width, std::move(out), {q, k, v},
      [qi_id, ki_id, vi_id, spec, width, dh, scale_factor, probs = std::move(probs),
       prob_offset = std::move(prob_offset)](Graph<T>& g, int self) {
        const T* go = g.grad_data(self);
        const T* qv = g.data(qi_id);
        const T* kv = g.data(ki_id);
        const T* vv = g.data(vi_id);
        T* gq = g.requires_grad(qi_id) ? g.grad_buffer(qi_id) : nullptr;
        T* gk = g.requires_grad(ki_id) ? g.grad_buffer(ki_id) : nullptr;
        T* gv = g.requires_grad(vi_id) ? g.grad_buffer(vi_id) : nullptr;
        std::vector<T> dp;
        for (std::size_t si = 0; si < spec.segments.size(); ++si) {
          const auto& s = spec.segments[si];
          const std::int64_t shift = s.k_len - s.q_len;
          dp.resize(static_cast<std::size_t>(s.k_len));
          for (int h = 0; h < spec.heads; ++h) {
            const std::int64_t col = h * dh;
            for (std::int64_t i = 0; i < s.q_len; ++i) {
              const std::int64_t limit = spec.causal ? i + shift : s.k_len - 1;
              const T* p = probs.data() + prob_offset[si] + (h * s.q_len + i) * s.k_len;
              const T* goi = go + (s.q_begin + i) * width + col;
              T dot = 0;
              for (std::int64_t j = 0; j <= limit; ++j) {
                const T* vj = vv + (s.k_begin + j) * width + col;
                T acc = 0;
                for (std::int64_t d = 0; d < dh; ++d) acc += goi[d] * vj[d];
                dp[j] = acc;
                dot += acc * p[j];
                if (gv) {
                  T* gvj = gv + (s.k_begin + j) * width + col;
                  for (std::int64_t d = 0; d < dh; ++d) gvj[d] += p[j] * goi[d];
                }
              }
              const T* qi = qv + (s.q_begin + i) * width + col;
              T* gqi = gq ? gq + (s.q_begin + i) * width + col : nullptr;
              for (std::int64_t j = 0; j <= limit; ++j) {
                const T ds = p[j] * (dp[j] - dot) * scale_factor;
                const T* kj = kv + (s.k_begin + j) * width + col;
                if (gqi) {
                  for (std::int64_t d = 0; d < dh; ++d) gqi[d] += ds * kj[d];
                }
                if (gk) {
                  T* gkj = gk + (s.k_begin + j) * width + col;
                  for (std::int64_t d = 0; d < dh; ++d) gkj[d] += ds * qi[d];
                }
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> rope(Var<T> x, const std::vector<std::int64_t>& positions, int heads, double base) {
  auto& g = graph_of(x);
  const auto r = x.rows(), c = x.cols();
  if (static_cast<std::int64_t>(positions.size()) != r) {
    throw ShapeError("rope: one position per row required");
  }
  if (heads < 1 || c % heads != 0 || (c / heads) % 2 != 0) {
    throw ShapeError("rope: head width must be even");
  }
  const std::int64_t dh = c / heads;
  const std::int64_t half = dh / 2;
  // cos/sin per (row, pair)
  std::vector<T> cs(static_cast<std::size_t>(r * half * 2));
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t m = 0; m < half; ++m) {
      double theta = static_cast<double>(positions[i]) *
                     std::pow(base, -2.0 * static_cast<double>(m) / static_cast<double>(dh));
      cs[(i * half + m) * 2] = static_cast<T>(std::cos(theta));
      cs[(i * half + m) * 2 + 1] = static_cast<T>(std::sin(theta));
    }
  }
  std::vector<T> out(static_cast<std::size_t>(r * c));
  const T* xd = x.value().data();
  for (std::int64_t i = 0; i < r; ++i) {
    for (int h = 0; h < heads; ++h) {
      for (std::int64_t m = 0; m < half; ++m) {
        const std::int64_t j = i * c + h * dh + 2 * m;
        const T co = cs[(i * half + m) * 2], si = cs[(i * half + m) * 2 + 1];
        out[j] = xd[j] * co - xd[j + 1] * si;
        out[j + 1] = xd[j] * si + xd[j + 1] * co;
      }
    }
  }
  int xi = x.id;
  return g.emit(r, c, std::move(out), {x},
                [xi, r, c, heads, dh, half, cs = std::move(cs)](Graph<T>& g, int self) {
                  if (!g.requires_grad(xi)) return;
                  const T* go = g.grad_data(self);
                  T* gx = g.grad_buffer(xi);
                  for (std::int64_t i = 0; i < r; ++i) {
                    for (int h = 0; h < heads; ++h) {
                      for (std::int64_t m = 0; m < half; ++m) {
                        const std::int64_t j = i * c + h * dh + 2 * m;
                        const T co = cs[(i * half + m) * 2], si = cs[(i * half + m) * 2 + 1];
                        gx[j] += go[j] * co + go[j + 1] * si;
                        gx[j + 1] += -go[j] * si + go[j + 1] * co;
                      }
                    }
                  }
                });
}

#define TTAV_INSTANTIATE(T)                                                              \
  template class Graph<T>;                                                               \
  template Var<T> matmul(Var<T>, Var<T>);                                                \
  template Var<T> add(Var<T>, Var<T>);                                                   \
  template Var<T> sub(Var<T>, Var<T>);                                                   \
  template Var<T> mul(Var<T>, Var<T>);                                                   \
  template Var<T> scale(Var<T>, T);                                                      \
  template Var<T> add_rowvec(Var<T>, Var<T>);                                            \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                 \
  template Var<T> gelu(Var<T>);                                                          \
  template Var<T> sigmoid(Var<T>);                                                       \
  template Var<T> softplus(Var<T>);                                                      \
  template Var<T> log(Var<T>);                                                           \
  template Var<T> square(Var<T>);                                                        \
  template Var<T> sum(Var<T>);                                                           \
  template Var<T> mean(Var<T>);                                                          \
  template Var<T> weighted_sum(Var<T>, std::vector<T>);                                  \
  template Var<T> sse(Var<T>, Var<T>);                                                   \
  template Var<T> concat_rows(const std::vector<Var<T>>&);                               \
  template Var<T> gather_rows(Var<T>, std::vector<std::int64_t>);                        \
  template Var<T> reshape(Var<T>, std::int64_t, std::int64_t);                           \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, const AttentionSpec&);               \
  template Var<T> rope(Var<T>, const std::vector<std::int64_t>&, int, double);

TTAV_INSTANTIATE(float)
TTAV_INSTANTIATE(double)

#undef TTAV_INSTANTIATE

}  // namespace ttav::ag
