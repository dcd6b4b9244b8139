#include "clove/tape.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>

namespace clove {

namespace detail {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
void gemm_impl(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
               const T* b, T beta, T* c) {
  using Idx = Eigen::Index;
  const Eigen::Map<const RowMat<T>> A(a, static_cast<Idx>(trans_a ? k : m), static_cast<Idx>(trans_a ? m : k));
  const Eigen::Map<const RowMat<T>> B(b, static_cast<Idx>(trans_b ? n : k), static_cast<Idx>(trans_b ? k : n));
  Eigen::Map<RowMat<T>> C(c, static_cast<Idx>(m), static_cast<Idx>(n));
  if (beta == T(0)) {
    C.setZero();
  } else if (beta != T(1)) {
    C *= beta;
  }
  if (!trans_a && !trans_b) C.noalias() += alpha * A * B;
  else if (!trans_a) C.noalias() += alpha * A * B.transpose();
  else if (!trans_b) C.noalias() += alpha * A.transpose() * B;
  else C.noalias() += alpha * A.transpose() * B.transpose();
}

}  // namespace

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          const float* b, float beta, float* c) {
  gemm_impl(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c) {
  gemm_impl(trans_a, trans_b, m, n, k, alpha, a, b, beta, c);
}

}  // namespace detail

namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_string(a.shape()));
  }
}

// Gradient buffer of an input, or nullptr when the input does not take one.
// Captured inputs are const handles; the gradient lives in shared storage.
template <typename T>
T* grad_of(const Tensor<T>& t) {
  return t.requires_grad() ? const_cast<Tensor<T>&>(t).grad_buffer().data() : nullptr;
}

}  // namespace

template <typename T>
bool Tape<T>::tracks(std::initializer_list<const Tensor<T>*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) { return t && t->requires_grad(); });
}

template <typename T>
Tensor<T> Tape<T>::emit(const char* name, Shape shape, std::vector<T> values,
                        std::initializer_list<const Tensor<T>*> inputs,
                        std::function<void(Tensor<T>&)> backward) {
  if (consumed_) throw ContractError(std::string(name) + ": tape already consumed by backward()");
  Tensor<T> out(std::move(shape), std::move(values));
  if (!out.all_finite()) throw NumericError(std::string(name) + ": non-finite value in forward output");
  if (!tracks(inputs)) return out;

  Record rec;
  rec.name = name;
  for (const Tensor<T>* in : inputs) {
    if (in) rec.inputs.push_back(in->node());
  }
  out.set_requires_grad(true);
  out.set_node(records_.size() + 1);
  rec.backward = [fn = std::move(backward), out]() mutable {
    if (out.has_grad()) fn(out);
  };
  records_.push_back(std::move(rec));
  return out;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (consumed_) throw ContractError("backward: tape already consumed");
  if (loss.size() != 1) throw ContractError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
  Tensor<T> seed = loss;
  if (!seed.requires_grad()) throw ContractError("backward: loss does not depend on any parameter");
  seed.grad_buffer()[0] += T(1);
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
  records_.clear();
  consumed_ = true;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> Tape<T>::matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<T> c(m * n);
  detail::gemm(false, false, m, n, k, T(1), a.data().data(), b.data().data(), T(0), c.data());
  return emit("matmul", {m, n}, std::move(c), {&a, &b}, [a, b, m, n, k](Tensor<T>& out) mutable {
    const T* g = out.grad().data();
    if (T* da = grad_of(a)) detail::gemm(false, true, m, k, n, T(1), g, b.data().data(), T(1), da);
    if (T* db = grad_of(b)) detail::gemm(true, false, k, n, m, T(1), a.data().data(), g, T(1), db);
  });
}

template <typename T>
Tensor<T> Tape<T>::bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank("bmm", a, 3);
  require_rank("bmm", b, 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: incompatible " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  std::vector<T> c(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(false, transpose_b, m, n, k, T(1), a.data().data() + i * m * k, b.data().data() + i * k * n, T(0),
                 c.data() + i * m * n);
  }
  return emit("bmm", {batch, m, n}, std::move(c), {&a, &b},
              [a, b, batch, m, n, k, transpose_b](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                T* da = grad_of(a);
                T* db = grad_of(b);
                for (std::size_t i = 0; i < batch; ++i) {
                  const T* gi = g + i * m * n;
                  const T* ai = a.data().data() + i * m * k;
                  const T* bi = b.data().data() + i * k * n;
                  if (da) detail::gemm(false, !transpose_b, m, k, n, T(1), gi, bi, T(1), da + i * m * k);
                  if (db) {
                    if (transpose_b) {
                      detail::gemm(true, false, n, k, m, T(1), gi, ai, T(1), db + i * k * n);
                    } else {
                      detail::gemm(true, false, k, n, m, T(1), ai, gi, T(1), db + i * k * n);
                    }
                  }
                }
              });
}

template <typename T>
Tensor<T> Tape<T>::linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias) {
  require_rank("linear", x, 2);
  require_rank("linear", w, 2);
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  if (w.dim(0) != k) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  if (bias && bias->shape() != Shape{n}) {
    throw DimensionError("linear: bias " + shape_string(bias->shape()) + " for " + std::to_string(n) + " outputs");
  }
  std::vector<T> c(m * n);
  if (bias) {
    for (std::size_t r = 0; r < m; ++r) std::copy(bias->data().begin(), bias->data().end(), c.begin() + r * n);
  }
  detail::gemm(false, false, m, n, k, T(1), x.data().data(), w.data().data(), bias ? T(1) : T(0), c.data());
  const Tensor<T> b = bias ? *bias : Tensor<T>();
  const bool has_bias = bias.has_value();
  return emit("linear", {m, n}, std::move(c), {&x, &w, has_bias ? &b : nullptr},
              [x, w, b, has_bias, m, n, k](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                if (T* dx = grad_of(x)) detail::gemm(false, true, m, k, n, T(1), g, w.data().data(), T(1), dx);
                if (T* dw = grad_of(w)) detail::gemm(true, false, k, n, m, T(1), x.data().data(), g, T(1), dw);
                if (has_bias) {
                  if (T* db = grad_of(b)) {
                    for (std::size_t j = 0; j < n; ++j) {
                      double acc = 0.0;
                      for (std::size_t r = 0; r < m; ++r) acc += g[r * n + j];
                      db[j] += static_cast<T>(acc);
                    }
                  }
                }
              });
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> Tape<T>::add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  std::vector<T> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
  return emit("add", a.shape(), std::move(c), {&a, &b}, [a, b](Tensor<T>& out) mutable {
    const auto g = out.grad();
    if (T* da = grad_of(a)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (T* db = grad_of(b)) for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  std::vector<T> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] - b[i];
  return emit("sub", a.shape(), std::move(c), {&a, &b}, [a, b](Tensor<T>& out) mutable {
    const auto g = out.grad();
    if (T* da = grad_of(a)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    if (T* db = grad_of(b)) for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  std::vector<T> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * b[i];
  return emit("mul", a.shape(), std::move(c), {&a, &b}, [a, b](Tensor<T>& out) mutable {
    const auto g = out.grad();
    if (T* da = grad_of(a)) for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
    if (T* db = grad_of(b)) for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::scale(const Tensor<T>& a, T s) {
  std::vector<T> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * s;
  return emit("scale", a.shape(), std::move(c), {&a}, [a, s](Tensor<T>& out) mutable {
    const auto g = out.grad();
    T* da = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s;
  });
}

template <typename T>
Tensor<T> Tape<T>::add_scalar(const Tensor<T>& a, T s) {
  std::vector<T> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + s;
  return emit("add_scalar", a.shape(), std::move(c), {&a}, [a](Tensor<T>& out) mutable {
    const auto g = out.grad();
    T* da = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
  });
}

template <typename T>
Tensor<T> Tape<T>::relu(const Tensor<T>& a) {
  std::vector<T> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] > T(0) ? a[i] : T(0);
  return emit("relu", a.shape(), std::move(c), {&a}, [a](Tensor<T>& out) mutable {
    const auto g = out.grad();
    T* da = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a[i] > T(0)) da[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::clamp(const Tensor<T>& a, T lo, T hi) {
  if (!(lo <= hi)) throw ContractError("clamp: empty interval");
  std::vector<T> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::clamp(a[i], lo, hi);
  return emit("clamp", a.shape(), std::move(c), {&a}, [a, lo, hi](Tensor<T>& out) mutable {
    const auto g = out.grad();
    T* da = grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (a[i] >= lo && a[i] <= hi) da[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> Tape<T>::sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  return emit("sum", {1}, {static_cast<T>(acc)}, {&a}, [a](Tensor<T>& out) mutable {
    const T g = out.grad()[0];
    T* da = grad_of(a);
    for (std::size_t i = 0; i < a.size(); ++i) da[i] += g;
  });
}

template <typename T>
Tensor<T> Tape<T>::mean(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  const double n = static_cast<double>(a.size());
  return emit("mean", {1}, {static_cast<T>(acc / n)}, {&a}, [a, n](Tensor<T>& out) mutable {
    const T g = static_cast<T>(out.grad()[0] / n);
    T* da = grad_of(a);
    for (std::size_t i = 0; i < a.size(); ++i) da[i] += g;
  });
}

// ---------------------------------------------------------------------------
// Last-axis ops

template <typename T>
Tensor<T> Tape<T>::softmax(const Tensor<T>& x) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  std::vector<T> y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = x.data().data() + r * len;
    T* yi = y.data() + r * len;
    const T mx = *std::max_element(xi, xi + len);
    double total = 0.0;
    for (std::size_t j = 0; j < len; ++j) {
      const double e = std::exp(static_cast<double>(xi[j] - mx));
      yi[j] = static_cast<T>(e);
      total += e;
    }
    for (std::size_t j = 0; j < len; ++j) yi[j] = static_cast<T>(yi[j] / total);
  }
  Tensor<T> saved(x.shape(), y);
  return emit("softmax", x.shape(), std::move(y), {&x}, [x, saved, rows, len](Tensor<T>& out) mutable {
    const T* g = out.grad().data();
    T* dx = grad_of(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* yi = saved.data().data() + r * len;
      const T* gi = g + r * len;
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += static_cast<double>(gi[j]) * yi[j];
      for (std::size_t j = 0; j < len; ++j) dx[r * len + j] += static_cast<T>(yi[j] * (gi[j] - dot));
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::l2_normalize(const Tensor<T>& x, T eps) {
  const std::size_t len = x.shape().back();
  const std::size_t rows = x.size() / len;
  std::vector<T> y(x.size());
  std::vector<double> denom(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xi = x.data().data() + r * len;
    double sq = 0.0;
    for (std::size_t j = 0; j < len; ++j) sq += static_cast<double>(xi[j]) * xi[j];
    const double norm = std::sqrt(sq);
    denom[r] = norm > static_cast<double>(eps) ? norm : static_cast<double>(eps);
    for (std::size_t j = 0; j < len; ++j) y[r * len + j] = static_cast<T>(xi[j] / denom[r]);
  }
  Tensor<T> saved(x.shape(), y);
  return emit("l2_normalize", x.shape(), std::move(y), {&x},
              [x, saved, denom = std::move(denom), rows, len, eps](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                T* dx = grad_of(x);
                for (std::size_t r = 0; r < rows; ++r) {
                  const T* yi = saved.data().data() + r * len;
                  const T* gi = g + r * len;
                  if (denom[r] > static_cast<double>(eps)) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < len; ++j) dot += static_cast<double>(gi[j]) * yi[j];
                    for (std::size_t j = 0; j < len; ++j) {
                      dx[r * len + j] += static_cast<T>((gi[j] - yi[j] * dot) / denom[r]);
                    }
                  } else {
                    for (std::size_t j = 0; j < len; ++j) dx[r * len + j] += static_cast<T>(gi[j] / denom[r]);
                  }
                }
              });
}

template <typename T>
Tensor<T> Tape<T>::rowdot(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank("rowdot", a, 2);
  require_same_shape("rowdot", a, b);
  const std::size_t rows = a.dim(0), len = a.dim(1);
  std::vector<T> c(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < len; ++j) acc += static_cast<double>(a[r * len + j]) * b[r * len + j];
    c[r] = static_cast<T>(acc);
  }
  return emit("rowdot", {rows}, std::move(c), {&a, &b}, [a, b, rows, len](Tensor<T>& out) mutable {
    const T* g = out.grad().data();
    T* da = grad_of(a);
    T* db = grad_of(b);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < len; ++j) {
        if (da) da[r * len + j] += g[r] * b[r * len + j];
        if (db) db[r * len + j] += g[r] * a[r * len + j];
      }
    }
  });
}

template <typename T>
Tensor<T> Tape<T>::gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  require_rank("gather_rows", x, 2);
  const std::size_t rows = x.dim(0), len = x.dim(1);
  if (idx.empty()) throw DimensionError("gather_rows: empty index list");
  std::vector<T> c(idx.size() * len);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) {
      throw DimensionError("gather_rows: index " + std::to_string(idx[i]) + " out of " + std::to_string(rows));
    }
    std::copy_n(x.data().data() + idx[i] * len, len, c.data() + i * len);
  }
  return emit("gather_rows", {idx.size(), len}, std::move(c), {&x},
              [x, index = std::vector<std::size_t>(idx.begin(), idx.end()), len](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                T* dx = grad_of(x);
                for (std::size_t i = 0; i < index.size(); ++i) {
                  for (std::size_t j = 0; j < len; ++j) dx[index[i] * len + j] += g[i * len + j];
                }
              });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> Tape<T>::reshape(const Tensor<T>& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  return emit("reshape", std::move(shape), x.values(), {&x}, [x](Tensor<T>& out) mutable {
    const auto g = out.grad();
    T* dx = grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

namespace {

// For every output element in row-major order, calls fn(out_index, src_index).
template <typename Fn>
void for_each_permuted(const Shape& src_shape, std::span<const std::size_t> perm, Fn&& fn) {
  std::array<std::size_t, 4> src_stride{0, 0, 0, 0};
  std::array<std::size_t, 4> ext{1, 1, 1, 1};
  std::array<std::size_t, 4> stride{0, 0, 0, 0};
  const std::size_t rank = src_shape.size();
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > 0;) {
    src_stride[d] = s;
    s *= src_shape[d];
  }
  const std::size_t pad = 4 - rank;
  for (std::size_t d = 0; d < rank; ++d) {
    ext[pad + d] = src_shape[perm[d]];
    stride[pad + d] = src_stride[perm[d]];
  }
  std::size_t o = 0;
  for (std::size_t i0 = 0; i0 < ext[0]; ++i0)
    for (std::size_t i1 = 0; i1 < ext[1]; ++i1)
      for (std::size_t i2 = 0; i2 < ext[2]; ++i2) {
        const std::size_t base = i0 * stride[0] + i1 * stride[1] + i2 * stride[2];
        for (std::size_t i3 = 0; i3 < ext[3]; ++i3) fn(o++, base + i3 * stride[3]);
      }
}

}  // namespace

template <typename T>
Tensor<T> Tape<T>::permute(const Tensor<T>& x, std::span<const std::size_t> perm) {
  const std::size_t rank = x.rank();
  if (perm.size() != rank || rank > 4) {
    throw DimensionError("permute: permutation of length " + std::to_string(perm.size()) + " for " +
                         shape_string(x.shape()));
  }
  std::array<bool, 4> seen{false, false, false, false};
  Shape shape(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (perm[d] >= rank || seen[perm[d]]) throw DimensionError("permute: invalid permutation");
    seen[perm[d]] = true;
    shape[d] = x.dim(perm[d]);
  }
  std::vector<T> y(x.size());
  for_each_permuted(x.shape(), perm, [&](std::size_t o, std::size_t s) { y[o] = x[s]; });
  return emit("permute", std::move(shape), std::move(y), {&x},
              [x, p = std::vector<std::size_t>(perm.begin(), perm.end())](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                T* dx = grad_of(x);
                for_each_permuted(x.shape(), p, [&](std::size_t o, std::size_t s) { dx[s] += g[o]; });
              });
}

// ---------------------------------------------------------------------------
// Convolutional blocks

template <typename T>
Tensor<T> Tape<T>::conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                          std::size_t stride, std::size_t pad) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c) {
    throw DimensionError("conv2d: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (h + 2 * pad < kh || wd + 2 * pad < kw) throw DimensionError("conv2d: kernel larger than padded input");
  if (bias && bias->shape() != Shape{o}) throw DimensionError("conv2d: bias shape " + shape_string(bias->shape()));
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * pad - kw) / stride + 1;
  const std::size_t plane = ho * wo;
  const std::size_t cols = n * plane;
  const std::size_t ckk = c * kh * kw;

  // im2col: row (ci, ki, kj), column (image, oy, ox).
  std::vector<T> col(ckk * cols, T(0));
  const T* xd = x.data().data();
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < kh; ++ki)
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = col.data() + ((ci * kh + ki) * kw + kj) * cols;
        for (std::size_t b = 0; b < n; ++b) {
          const T* src = xd + (b * c + ci) * h * wd;
          T* dst = row + b * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
              dst[oy * wo + ox] = src[iy * wd + ix];
            }
          }
        }
      }

  std::vector<T> tmp(o * cols);
  detail::gemm(false, false, o, cols, ckk, T(1), w.data().data(), col.data(), T(0), tmp.data());
  std::vector<T> y(n * o * plane);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc) {
      const T bv = bias ? (*bias)[oc] : T(0);
      const T* src = tmp.data() + oc * cols + b * plane;
      T* dst = y.data() + (b * o + oc) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bv;
    }

  const Tensor<T> bt = bias ? *bias : Tensor<T>();
  const bool has_bias = bias.has_value();
  return emit("conv2d", {n, o, ho, wo}, std::move(y), {&x, &w, has_bias ? &bt : nullptr},
              [x, w, bt, has_bias, col = std::move(col), n, c, h, wd, o, kh, kw, ho, wo, stride, pad, plane, cols,
               ckk](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                std::vector<T> gt(o * cols);
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t oc = 0; oc < o; ++oc)
                    std::copy_n(g + (b * o + oc) * plane, plane, gt.data() + oc * cols + b * plane);
                if (T* dw = grad_of(w)) detail::gemm(false, true, o, ckk, cols, T(1), gt.data(), col.data(), T(1), dw);
                if (has_bias) {
                  if (T* db = grad_of(bt)) {
                    for (std::size_t oc = 0; oc < o; ++oc) {
                      double acc = 0.0;
                      for (std::size_t j = 0; j < cols; ++j) acc += gt[oc * cols + j];
                      db[oc] += static_cast<T>(acc);
                    }
                  }
                }
                if (T* dx = grad_of(x)) {
                  std::vector<T> dcol(ckk * cols);
                  detail::gemm(true, false, ckk, cols, o, T(1), w.data().data(), gt.data(), T(0), dcol.data());
                  for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t ki = 0; ki < kh; ++ki)
                      for (std::size_t kj = 0; kj < kw; ++kj) {
                        const T* row = dcol.data() + ((ci * kh + ki) * kw + kj) * cols;
                        for (std::size_t b = 0; b < n; ++b) {
                          T* dst = dx + (b * c + ci) * h * wd;
                          const T* src = row + b * plane;
                          for (std::size_t oy = 0; oy < ho; ++oy) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t ox = 0; ox < wo; ++ox) {
                              const std::ptrdiff_t ix =
                                  static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
                              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                              dst[iy * wd + ix] += src[oy * wo + ox];
                            }
                          }
                        }
                      }
                }
              });
}

template <typename T>
Tensor<T> Tape<T>::batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             Tensor<T>& running_mean, Tensor<T>& running_var, bool training, double momentum,
                             double eps) {
  if (x.rank() != 2 && x.rank() != 4) throw DimensionError("batchnorm: expected [N,C] or [N,C,H,W] input");
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const Shape cs{c};
  if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs || running_var.shape() != cs) {
    throw DimensionError("batchnorm: per-channel tensors must have shape [" + std::to_string(c) + "]");
  }
  const double count = static_cast<double>(n * spatial);
  std::vector<double> mu(c), invstd(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double m = s / count;
      double v = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data().data() + (b * c + ch) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) v += (p[i] - m) * (p[i] - m);
      }
      v /= count;
      mu[ch] = m;
      invstd[ch] = 1.0 / std::sqrt(v + eps);
      const double unbiased = count > 1 ? v * count / (count - 1) : v;
      running_mean[ch] = static_cast<T>(momentum * running_mean[ch] + (1.0 - momentum) * m);
      running_var[ch] = static_cast<T>(momentum * running_var[ch] + (1.0 - momentum) * unbiased);
    } else {
      mu[ch] = running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + eps);
    }
  }
  std::vector<T> xhat(x.size()), y(x.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * spatial;
      for (std::size_t i = 0; i < spatial; ++i) {
        const double xh = (x[off + i] - mu[ch]) * invstd[ch];
        xhat[off + i] = static_cast<T>(xh);
        y[off + i] = static_cast<T>(gamma[ch] * xh + beta[ch]);
      }
    }
  return emit("batchnorm", x.shape(), std::move(y), {&x, &gamma, &beta},
              [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), n, c, spatial, count,
               training](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
                for (std::size_t b = 0; b < n; ++b)
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    const std::size_t off = (b * c + ch) * spatial;
                    for (std::size_t i = 0; i < spatial; ++i) {
                      sum_g[ch] += g[off + i];
                      sum_gx[ch] += static_cast<double>(g[off + i]) * xhat[off + i];
                    }
                  }
                if (T* dgamma = grad_of(gamma))
                  for (std::size_t ch = 0; ch < c; ++ch) dgamma[ch] += static_cast<T>(sum_gx[ch]);
                if (T* dbeta = grad_of(beta))
                  for (std::size_t ch = 0; ch < c; ++ch) dbeta[ch] += static_cast<T>(sum_g[ch]);
                if (T* dx = grad_of(x)) {
                  for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                      const std::size_t off = (b * c + ch) * spatial;
                      const double k = gamma[ch] * invstd[ch];
                      for (std::size_t i = 0; i < spatial; ++i) {
                        const double gi = g[off + i];
                        const double d =
                            training ? k * (gi - sum_g[ch] / count - xhat[off + i] * sum_gx[ch] / count) : k * gi;
                        dx[off + i] += static_cast<T>(d);
                      }
                    }
                }
              });
}

template <typename T>
Tensor<T> Tape<T>::avgpool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank("avgpool2d", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  if (kernel == 0 || stride == 0 || kernel > h || kernel > wd) {
    throw DimensionError("avgpool2d: kernel " + std::to_string(kernel) + " does not fit " + shape_string(x.shape()));
  }
  const std::size_t ho = (h - kernel) / stride + 1, wo = (wd - kernel) / stride + 1;
  const double area = static_cast<double>(kernel * kernel);
  std::vector<T> y(n * c * ho * wo);
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = x.data().data() + p * h * wd;
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) acc += src[(oy * stride + i) * wd + ox * stride + j];
        y[(p * ho + oy) * wo + ox] = static_cast<T>(acc / area);
      }
  }
  return emit("avgpool2d", {n, c, ho, wo}, std::move(y), {&x},
              [x, n, c, h, wd, ho, wo, kernel, stride, area](Tensor<T>& out) mutable {
                const T* g = out.grad().data();
                T* dx = grad_of(x);
                for (std::size_t p = 0; p < n * c; ++p) {
                  T* dst = dx + p * h * wd;
                  for (std::size_t oy = 0; oy < ho; ++oy)
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const T gv = static_cast<T>(g[(p * ho + oy) * wo + ox] / area);
                      for (std::size_t i = 0; i < kernel; ++i)
                        for (std::size_t j = 0; j < kernel; ++j) dst[(oy * stride + i) * wd + ox * stride + j] += gv;
                    }
                }
              });
}

template class Tape<float>;
template class Tape<double>;

}  // namespace clove
