#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

#include "ttav/tensor.hpp"

// Tape-based reverse-mode differentiation over rank-2 values. Every node is a
// rows×cols row-major matrix; vectors are 1×n and scalars are 1×1.
namespace ttav::ag {

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  std::int64_t rows() const;
  std::int64_t cols() const;
  std::span<const T> value() const;
  T item() const;
  Tensor<T> tensor() const;
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, int)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool records() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  // Borrows the tensor's storage, which must outlive the graph.
  Var<T> leaf(const Tensor<T>& t, bool requires_grad);
  Var<T> constant(const Tensor<T>& t);
  Var<T> constant(std::int64_t rows, std::int64_t cols, std::vector<T> values);

  // Reverse pass from a 1×1 node. Throws NumericError if any leaf gradient is
  // non-finite.
  void backward(Var<T> loss);

  bool has_grad(Var<T> v) const { return !nodes_[v.id].grad.empty(); }
  std::span<const T> grad(Var<T> v) const { return nodes_[v.id].grad; }

  // Op construction interface.
  Var<T> emit(std::int64_t rows, std::int64_t cols, std::vector<T> value,
              std::initializer_list<Var<T>> inputs, Backward backward);
  Var<T> emit(std::int64_t rows, std::int64_t cols, std::vector<T> value,
              const std::vector<Var<T>>& inputs, Backward backward);

  std::int64_t rows(int id) const { return nodes_[id].rows; }
  std::int64_t cols(int id) const { return nodes_[id].cols; }
  const T* data(int id) const { return nodes_[id].data; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  const T* grad_data(int id) const { return nodes_[id].grad.data(); }
  // Lazily allocated, zero-initialised accumulation buffer.
  T* grad_buffer(int id);

 private:
  struct Node {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<T> owned;
    const T* data = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    bool is_leaf = false;
    Backward backward;
  };

  bool record_;
  std::deque<Node> nodes_;
};

template <typename T>
std::int64_t Var<T>::rows() const { return graph->rows(id); }
template <typename T>
std::int64_t Var<T>::cols() const { return graph->cols(id); }
template <typename T>
std::span<const T> Var<T>::value() const {
  return {graph->data(id), static_cast<std::size_t>(rows() * cols())};
}
template <typename T>
T Var<T>::item() const {
  if (rows() * cols() != 1) throw ShapeError("item() on a non-scalar node");
  return graph->data(id)[0];
}
template <typename T>
Tensor<T> Var<T>::tensor() const {
  auto v = value();
  return Tensor<T>({rows(), cols()}, std::vector<T>(v.begin(), v.end()));
}

// One attention block: query rows [q_begin, q_begin+q_len) attend to key rows
// [k_begin, k_begin+k_len). Under a causal mask query i sees keys
// j ≤ i + (k_len − q_len), i.e. queries are the newest k rows.
struct Segment {
  std::int64_t q_begin = 0;
  std::int64_t q_len = 0;
  std::int64_t k_begin = 0;
  std::int64_t k_len = 0;
};

struct AttentionSpec {
  std::vector<Segment> segments;
  int heads = 1;
  bool causal = false;

  static AttentionSpec self(const std::vector<std::int64_t>& lengths, int heads, bool causal);
  static AttentionSpec uniform(std::int64_t count, std::int64_t length, int heads, bool causal);
};

template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
// a[r,c] + b[1,c] broadcast over rows.
template <typename T> Var<T> add_rowvec(Var<T> a, Var<T> b);
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> softplus(Var<T> x);
template <typename T> Var<T> log(Var<T> x);
template <typename T> Var<T> square(Var<T> x);
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
// Σ w_i x_i over all elements; w is a fixed coefficient array.
template <typename T> Var<T> weighted_sum(Var<T> x, std::vector<T> w);
// Σ (a − b)² with b treated as a constant target.
template <typename T> Var<T> sse(Var<T> a, Var<T> target);
template <typename T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <typename T> Var<T> gather_rows(Var<T> x, std::vector<std::int64_t> index);
template <typename T> Var<T> reshape(Var<T> x, std::int64_t rows, std::int64_t cols);
template <typename T> Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionSpec& spec);
// Rotary position encoding applied per head to adjacent column pairs.
template <typename T>
Var<T> rope(Var<T> x, const std::vector<std::int64_t>& positions, int heads, double base = 10000.0);

}  // namespace ttav::ag
