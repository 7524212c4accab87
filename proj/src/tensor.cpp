#include "n3d/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "n3d/errors.hpp"

namespace n3d {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
using Node = detail::Node<T>;

template <typename T>
bool tracks(std::initializer_list<const Tensor<T>*> inputs) {
  if (!GradMode::enabled()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t->requires_grad(); });
}

// Builds the result node; the backward closure is attached only when a parent needs grad.
template <typename T>
Tensor<T> make_result(Shape shape, Buffer<T> data, std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(Node<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (tracks<T>(inputs) && fn) {
    node->requires_grad = true;
    node->is_leaf = false;
    for (const auto* in : inputs) node->parents.push_back(in->node());
    node->backward_fn = std::move(fn);
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
void require_rank(const Tensor<T>& x, std::size_t rank, const char* op) {
  if (x.rank() != rank)
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x.shape()));
}

// Shape of `small` after dropping leading 1s must be a suffix of `big`.
bool broadcastable(const Shape& big, const Shape& small) {
  Shape s = small;
  while (!s.empty() && s.front() == 1) s.erase(s.begin());
  if (s.size() > big.size()) return false;
  return std::equal(s.rbegin(), s.rend(), big.rbegin());
}

}  // namespace

// ---- Tensor members ----------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(const Shape& shape) {
  return full(shape, T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(const Shape& shape, T value) {
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->data.assign(shape_numel(shape), value);
  return Tensor(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from(const Shape& shape, Buffer<T> values) {
  if (shape_numel(shape) != values.size())
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  auto node = std::make_shared<Node<T>>();
  node->shape = shape;
  node->data = std::move(values);
  return Tensor(std::move(node));
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from(shape(), node_->data);
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order)
    if (!n->is_leaf) n->grad.assign(n->data.size(), T(0));
  node_->grad_buffer()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf || !n->backward_fn) continue;
    n->backward_fn(*n);
    if (n != node_.get()) Buffer<T>().swap(n->grad);
  }
}

// ---- elementwise -----------------------------------------------------------

namespace {

// Visits (i, ia, ib) with the smaller operand repeated over the leading dims of the larger.
template <typename Fn>
inline void broadcast_loop(std::size_t n, std::size_t na, std::size_t nb, Fn fn) {
  const std::size_t m = std::min(na, nb);
  if (m == 0) return;
  if (na == nb) {
    for (std::size_t i = 0; i < n; ++i) fn(i, i, i);
  } else if (na == n) {
    for (std::size_t base = 0; base < n; base += m)
      for (std::size_t j = 0; j < m; ++j) fn(base + j, base + j, j);
  } else {
    for (std::size_t base = 0; base < n; base += m)
      for (std::size_t j = 0; j < m; ++j) fn(base + j, j, base + j);
  }
}

template <typename T, typename F, typename GA, typename GB>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f, GA dfa, GB dfb) {
  const bool a_big = a.numel() >= b.numel();
  const Tensor<T>& big = a_big ? a : b;
  const Tensor<T>& small = a_big ? b : a;
  if (big.shape() != small.shape() && !broadcastable(big.shape(), small.shape()))
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " do not broadcast");
  const std::size_t n = big.numel();
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  const std::size_t na = a.numel(), nb = b.numel();
  Buffer<T> out(n);
  broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(pa[ia], pb[ib]); });
  return make_result<T>(big.shape(), std::move(out), {&a, &b}, [dfa, dfb, na, nb, n](Node<T>& self) {
    Node<T>* A = self.parents[0].get();
    Node<T>* B = self.parents[1].get();
    const T* g = self.grad.data();
    const T* pa = A->data.data();
    const T* pb = B->data.data();
    if (A->requires_grad) {
      T* ga = A->grad_buffer().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += dfa(g[i], pa[ia], pb[ib]); });
    }
    if (B->requires_grad) {
      T* gb = B->grad_buffer().data();
      broadcast_loop(n, na, nb, [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += dfb(g[i], pa[ia], pb[ib]); });
    }
  });
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  const std::size_t n = x.numel();
  Buffer<T> out(n);
  const T* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);
  return make_result<T>(x.shape(), std::move(out), {&x}, [df, n](Node<T>& self) {
    Node<T>* X = self.parents[0].get();
    auto& gx = X->grad_buffer();
    const T* g = self.grad.data();
    const T* px = X->data.data();
    const T* py = self.data.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * df(px[i], py[i]);
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary(
      a, b, "add", [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; }, [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  static constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  static constexpr T k = T(0.044715);
  const std::size_t n = x.numel();
  const auto n_ = static_cast<Eigen::Index>(n);
  Buffer<T> out(n);
  Eigen::Map<const Arr> v(x.data().data(), n_);
  Eigen::Map<Arr>(out.data(), n_) = T(0.5) * v * (T(1) + (c * (v + k * v.cube())).tanh());
  return make_result<T>(x.shape(), std::move(out), {&x}, [n_](Node<T>& self) {
    Node<T>* X = self.parents[0].get();
    Eigen::Map<const Arr> v(X->data.data(), n_), g(self.grad.data(), n_);
    const Arr th = (c * (v + k * v.cube())).tanh();
    Eigen::Map<Arr>(X->grad_buffer().data(), n_) +=
        g * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th.square()) * c * (T(1) + T(3) * k * v.square()));
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v, T) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

// ---- matmul ----------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto bad = [&] {
    return DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  };
  if (a.rank() < 2 || a.rank() > 3 || b.rank() < 2 || b.rank() > 3) throw bad();
  const std::size_t batch_a = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t batch_b = b.rank() == 3 ? b.dim(0) : 1;
  if (a.rank() == 3 && b.rank() == 3 && batch_a != batch_b) throw bad();
  const std::size_t n = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
  const std::size_t kb = b.dim(b.rank() - 2), m = b.dim(b.rank() - 1);
  if (k != kb) throw bad();
  const std::size_t batch = std::max(batch_a, batch_b);
  Shape out_shape = (a.rank() == 3 || b.rank() == 3) ? Shape{batch, n, m} : Shape{n, m};

  // A 3-D left operand with a shared 2-D right operand is one tall GEMM.
  const bool fold = a.rank() == 3 && b.rank() == 2;
  const std::size_t rows = fold ? batch * n : n;
  const std::size_t steps = fold ? 1 : batch;
  const std::size_t sa = a.rank() == 3 ? n * k : 0;
  const std::size_t sb = b.rank() == 3 ? k * m : 0;

  Buffer<T> out(batch * n * m);
  for (std::size_t i = 0; i < steps; ++i) {
    CMapMat<T> A(a.data().data() + i * sa, rows, k);
    CMapMat<T> B(b.data().data() + i * sb, k, m);
    MapMat<T> C(out.data() + i * rows * m, rows, m);
    C.noalias() = A * B;
  }
  return make_result<T>(out_shape, std::move(out), {&a, &b}, [=](Node<T>& self) {
    Node<T>* An = self.parents[0].get();
    Node<T>* Bn = self.parents[1].get();
    for (std::size_t i = 0; i < steps; ++i) {
      CMapMat<T> G(self.grad.data() + i * rows * m, rows, m);
      if (An->requires_grad) {
        MapMat<T> GA(An->grad_buffer().data() + i * sa, rows, k);
        CMapMat<T> B(Bn->data.data() + i * sb, k, m);
        GA.noalias() += G * B.transpose();
      }
      if (Bn->requires_grad) {
        MapMat<T> GB(Bn->grad_buffer().data() + i * sb, k, m);
        CMapMat<T> A(An->data.data() + i * sa, rows, k);
        GB.noalias() += A.transpose() * G;
      }
    }
  });
}

// ---- normalization / softmax ---------------------------------------------

template <typename T>
void softmax_rows_inplace(T* data, std::size_t rows, std::size_t cols) {
  if (cols == 0) return;
  MapMat<T> P(data, rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = P.row(r).array();
    const T mx = row.maxCoeff();
    row = (row - mx).exp();
    row /= row.sum();
  }
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("softmax: scalar input");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = cols ? x.numel() / cols : 0;
  Buffer<T> out(x.data().begin(), x.data().end());
  softmax_rows_inplace(out.data(), rows, cols);
  return make_result<T>(x.shape(), std::move(out), {&x}, [rows, cols](Node<T>& self) {
    Node<T>* X = self.parents[0].get();
    auto& gx = X->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.data.data() + r * cols;
      const T* g = self.grad.data() + r * cols;
      T dot = 0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += y[c] * (g[c] - dot);
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x) {
  if (x.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d == 0) throw DimensionError("layer_norm: empty feature axis");
  const std::size_t rows = x.numel() / d;
  Buffer<T> out(x.numel());
  auto inv_std = std::make_shared<Buffer<T>>(rows);
  const T* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    T mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= T(d);
    T var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= T(d);
    const T is = T(1) / std::sqrt(var + T(kLayerNormEps));
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = (row[c] - mu) * is;
  }
  return make_result<T>(x.shape(), std::move(out), {&x}, [rows, d, inv_std](Node<T>& self) {
    Node<T>* X = self.parents[0].get();
    auto& gx = X->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xh = self.data.data() + r * d;
      const T* g = self.grad.data() + r * d;
      T gm = 0, gxm = 0;
      for (std::size_t c = 0; c < d; ++c) {
        gm += g[c];
        gxm += g[c] * xh[c];
      }
      gm /= T(d);
      gxm /= T(d);
      const T is = (*inv_std)[r];
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += is * (g[c] - gm - xh[c] * gxm);
    }
  });
}

// ---- lookup / reductions ---------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  Buffer<T> out(idv.size() * d);
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab)
      throw IndexError("embedding: id " + std::to_string(idv[i]) + " outside table of " + std::to_string(vocab) +
                       " rows");
    std::copy_n(table.data().data() + idv[i] * d, d, out.data() + i * d);
  }
  return make_result<T>({idv.size(), d}, std::move(out), {&table}, [idv, d](Node<T>& self) {
    auto& gt = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t c = 0; c < d; ++c) gt[idv[i] * d + c] += self.grad[i * d + c];
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return make_result<T>({}, {s}, {&x}, [](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  T s = 0;
  for (T v : x.data()) s += v;
  const T inv = T(1) / T(x.numel());
  return make_result<T>({}, {s * inv}, {&x}, [inv](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (auto& g : gx) g += self.grad[0] * inv;
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mse: shapes " + shape_str(pred.shape()) + " and " + shape_str(target.shape()) + " differ");
  if (pred.numel() == 0) throw ContractError("mse of empty tensors");
  const std::size_t n = pred.numel();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = pred.data()[i] - target.data()[i];
    s += d * d;
  }
  const T inv = T(1) / T(n);
  return make_result<T>({}, {s * inv}, {&pred, &target}, [n, inv](Node<T>& self) {
    Node<T>* P = self.parents[0].get();
    Node<T>* Q = self.parents[1].get();
    const T g = self.grad[0] * T(2) * inv;
    if (P->requires_grad) {
      auto& gp = P->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gp[i] += g * (P->data[i] - Q->data[i]);
    }
    if (Q->requires_grad) {
      auto& gq = Q->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) gq[i] -= g * (P->data[i] - Q->data[i]);
    }
  });
}

// ---- sequence ops ------------------------------------------------------------

template <typename T>
Tensor<T> concat_seq(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "concat_seq");
  require_rank(b, 2, "concat_seq");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("concat_seq: feature dims differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t na = a.numel(), nb = b.numel();
  Buffer<T> out(na + nb);
  std::copy(a.data().begin(), a.data().end(), out.begin());
  std::copy(b.data().begin(), b.data().end(), out.begin() + static_cast<std::ptrdiff_t>(na));
  return make_result<T>({a.dim(0) + b.dim(0), a.dim(1)}, std::move(out), {&a, &b}, [na, nb](Node<T>& self) {
    Node<T>* A = self.parents[0].get();
    Node<T>* B = self.parents[1].get();
    if (A->requires_grad) {
      auto& ga = A->grad_buffer();
      for (std::size_t i = 0; i < na; ++i) ga[i] += self.grad[i];
    }
    if (B->requires_grad) {
      auto& gb = B->grad_buffer();
      for (std::size_t i = 0; i < nb; ++i) gb[i] += self.grad[na + i];
    }
  });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_rows");
  if (start > x.dim(0) || count > x.dim(0) - start)
    throw IndexError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(x.shape()));
  const std::size_t d = x.dim(1);
  const std::size_t off = start * d;
  Buffer<T> out(x.data().begin() + static_cast<std::ptrdiff_t>(off),
                     x.data().begin() + static_cast<std::ptrdiff_t>(off + count * d));
  const std::size_t n = count * d;
  return make_result<T>({count, d}, std::move(out), {&x}, [off, n](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < n; ++i) gx[off + i] += self.grad[i];
  });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_seq(const Tensor<T>& x, std::size_t n_first) {
  require_rank(x, 2, "split_seq");
  if (n_first > x.dim(0))
    throw IndexError("split_seq: n_first " + std::to_string(n_first) + " exceeds " + std::to_string(x.dim(0)) +
                     " rows");
  return {slice_rows(x, 0, n_first), slice_rows(x, n_first, x.dim(0) - n_first)};
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (start > cols || count > cols - start)
    throw IndexError("slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(x.shape()));
  Buffer<T> out(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + start, count, out.data() + r * count);
  return make_result<T>({rows, count}, std::move(out), {&x}, [rows, cols, start, count](Node<T>& self) {
    auto& gx = self.parents[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < count; ++c) gx[r * cols + start + c] += self.grad[r * count + c];
  });
}

// ---- attention ---------------------------------------------------------------

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  require_rank(q, 2, "attention");
  require_rank(k, 2, "attention");
  require_rank(v, 2, "attention");
  if (q.dim(1) != k.dim(1))
    throw DimensionError("attention: query dim " + shape_str(q.shape()) + " does not match key dim " +
                         shape_str(k.shape()));
  if (k.dim(0) != v.dim(0))
    throw DimensionError("attention: " + shape_str(k.shape()) + " keys vs " + shape_str(v.shape()) + " values");
  if (heads == 0 || q.dim(1) % heads != 0 || v.dim(1) % heads != 0)
    throw DimensionError("attention: " + std::to_string(heads) + " heads do not divide " + shape_str(q.shape()) +
                         " / " + shape_str(v.shape()));
  if (q.dim(1) == 0) throw DimensionError("attention: zero feature dim");
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), dv = v.dim(1);
  if (nk == 0) throw ContractError("attention over an empty key set");
  const std::size_t dh = d / heads, dvh = dv / heads;
  const T sc = T(1) / std::sqrt(T(dh));

  const bool keep = tracks<T>({&q, &k, &v});
  auto probs = std::make_shared<Buffer<T>>(keep ? heads * nq * nk : nq * nk);
  Buffer<T> out(nq * dv);
  CMapMat<T> Q(q.data().data(), nq, d), K(k.data().data(), nk, d), V(v.data().data(), nk, dv);
  MapMat<T> O(out.data(), nq, dv);
  for (std::size_t h = 0; h < heads; ++h) {
    MapMat<T> P(probs->data() + (keep ? h * nq * nk : 0), nq, nk);
    P.noalias() = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose();
    P *= sc;
    softmax_rows_inplace(P.data(), nq, nk);
    O.middleCols(h * dvh, dvh).noalias() = P * V.middleCols(h * dvh, dvh);
  }
  if (!keep) probs.reset();

  return make_result<T>({nq, dv}, std::move(out), {&q, &k, &v}, [=](Node<T>& self) {
    Node<T>* Qn = self.parents[0].get();
    Node<T>* Kn = self.parents[1].get();
    Node<T>* Vn = self.parents[2].get();
    CMapMat<T> Q(Qn->data.data(), nq, d), K(Kn->data.data(), nk, d), V(Vn->data.data(), nk, dv);
    CMapMat<T> O(self.data.data(), nq, dv), G(self.grad.data(), nq, dv);
    RowMat<T> dP(nq, nk);
    Eigen::Matrix<T, Eigen::Dynamic, 1> r(nq);
    for (std::size_t h = 0; h < heads; ++h) {
      MapMat<T> P(probs->data() + h * nq * nk, nq, nk);
      auto Gh = G.middleCols(h * dvh, dvh);
      if (Vn->requires_grad) {
        MapMat<T> GV(Vn->grad_buffer().data(), nk, dv);
        GV.middleCols(h * dvh, dvh).noalias() += P.transpose() * Gh;
      }
      if (!Qn->requires_grad && !Kn->requires_grad) continue;
      dP.noalias() = Gh * V.middleCols(h * dvh, dvh).transpose();
      r = (Gh.array() * O.middleCols(h * dvh, dvh).array()).rowwise().sum();
      // dS = P * (dP - rowdot(dO, O)) * scale, written over dP.
      dP.array() = P.array() * (dP.array().colwise() - r.array()) * sc;
      if (Qn->requires_grad) {
        MapMat<T> GQ(Qn->grad_buffer().data(), nq, d);
        GQ.middleCols(h * dh, dh).noalias() += dP * K.middleCols(h * dh, dh);
      }
      if (Kn->requires_grad) {
        MapMat<T> GK(Kn->grad_buffer().data(), nk, d);
        GK.middleCols(h * dh, dh).noalias() += dP.transpose() * Q.middleCols(h * dh, dh);
      }
    }
  });
}

template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  return multi_head_attention(q, k, v, 1);
}

// ---- instantiations ----------------------------------------------------------

#define N3D_INSTANTIATE(T)                                                                          \
  template class Tensor<T>;                                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> gelu(const Tensor<T>&);                                                        \
  template Tensor<T> silu(const Tensor<T>&);                                                        \
  template Tensor<T> layer_norm(const Tensor<T>&);                                                  \
  template Tensor<T> softmax(const Tensor<T>&);                                                     \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const int>);                             \
  template Tensor<T> sum(const Tensor<T>&);                                                         \
  template Tensor<T> mean(const Tensor<T>&);                                                        \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> concat_seq(const Tensor<T>&, const Tensor<T>&);                                \
  template std::pair<Tensor<T>, Tensor<T>> split_seq(const Tensor<T>&, std::size_t);                \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                        \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                        \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> multi_head_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t); \
  template void softmax_rows_inplace(T*, std::size_t, std::size_t);

N3D_INSTANTIATE(float)
N3D_INSTANTIATE(double)

#undef N3D_INSTANTIATE

}  // namespace n3d
