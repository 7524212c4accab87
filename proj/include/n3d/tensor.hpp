#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace n3d {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Storage starts on a 64-byte boundary so vectorized kernels split every
// buffer the same way and results do not depend on where it was allocated.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents that require grad.
  std::function<void(Node&)> backward_fn;

  Buffer<T>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Graph recording switch. Sampling and evaluation run under NoGradGuard so no
// backward closures (and no saved activations) are kept alive.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Dense row-major tensor with reverse-mode autodiff. A Tensor is a handle: copies
// share the same storage and graph node.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, T value);
  static Tensor from(const Shape& shape, Buffer<T> values);
  static Tensor from(const Shape& shape, const std::vector<T>& values) {
    return from(shape, Buffer<T>(values.begin(), values.end()));
  }
  static Tensor scalar(T value) { return from({}, Buffer<T>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  const Buffer<T>& values() const { return node_->data; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  // Only valid on leaves.
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const { return node_->is_leaf; }

  bool has_grad() const { return node_->grad.size() == node_->data.size() && !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  // Reverse sweep from a scalar. Leaf grads accumulate across calls.
  void backward() const;

  // New leaf holding a copy of the values; no graph, requires_grad off.
  Tensor detach() const;

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// ---- primitives -------------------------------------------------------------
// Binary elementwise ops accept either equal shapes or a smaller operand whose
// shape (after dropping leading 1s) is a suffix of the larger one; the smaller
// operand is repeated over the leading dimensions.

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);

// [n,k]x[k,m], [B,n,k]x[k,m], [n,k]x[B,k,m], [B,n,k]x[B,k,m].
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);  // tanh approximation
template <typename T> Tensor<T> silu(const Tensor<T>& x);

inline constexpr double kLayerNormEps = 1e-5;
// Normalizes over the last axis; no learned affine.
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x);
// Softmax over the last axis, stabilized by row-max subtraction.
template <typename T> Tensor<T> softmax(const Tensor<T>& x);

template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T> Tensor<T> concat_seq(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> std::pair<Tensor<T>, Tensor<T>> split_seq(const Tensor<T>& x, std::size_t n_first);
template <typename T> Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count);
template <typename T> Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count);

// softmax(q k^T / sqrt(d)) v with q:[n_q,d], k:[n_k,d], v:[n_k,d_v].
template <typename T> Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);
// Same, with the feature axes split into `heads` contiguous column groups; d is the head dim.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads);

// Row-wise stabilized softmax used by softmax() and the attention kernel.
template <typename T> void softmax_rows_inplace(T* data, std::size_t rows, std::size_t cols);

}  // namespace n3d
