#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clove/tensor.hpp"

namespace clove {

/// Records differentiable operations for reverse-mode gradients.
///
/// Every op lives here so that the recording context is always explicit: an
/// op is recorded when the tape is recording and at least one input requires
/// grad. A non-recording tape evaluates the same math with no bookkeeping,
/// which is how the teacher and evaluation forwards run.
///
/// Broadcasting is limited to bias-add (linear, conv2d) and scalar ops.
/// Reductions accumulate in double regardless of T.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  /// Number of recorded operations.
  std::size_t size() const { return records_.size(); }
  const std::string& op_name(std::size_t i) const { return records_.at(i).name; }
  /// Node ids of the inputs of record i (0 for leaves).
  const std::vector<std::uint64_t>& op_inputs(std::size_t i) const { return records_.at(i).inputs; }

  // Linear algebra.
  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
  /// Batched product over the leading axis: [B,m,k] x [B,k,n] (or [B,n,k]
  /// when transpose_b).
  Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
  /// x[M,K] . w[K,N] + bias[N].
  Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias);

  // Elementwise.
  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
  Tensor<T> scale(const Tensor<T>& a, T s);
  Tensor<T> add_scalar(const Tensor<T>& a, T s);
  Tensor<T> relu(const Tensor<T>& a);
  /// Limits values to [lo, hi]; gradient passes where lo <= a <= hi.
  Tensor<T> clamp(const Tensor<T>& a, T lo, T hi);

  // Reductions to a scalar [1].
  Tensor<T> sum(const Tensor<T>& a);
  Tensor<T> mean(const Tensor<T>& a);

  // Last-axis ops.
  Tensor<T> softmax(const Tensor<T>& x);
  /// Each last-axis slice divided by max(norm, eps).
  Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-6));
  /// Row-wise dot product of two [R,D] tensors -> [R].
  Tensor<T> rowdot(const Tensor<T>& a, const Tensor<T>& b);
  /// Selects rows of x[R,D] -> [idx.size(), D]; repeated indices allowed.
  Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx);

  // Layout.
  Tensor<T> reshape(const Tensor<T>& x, Shape shape);
  /// Axis permutation for rank <= 4; out.shape[i] = x.shape[perm[i]].
  Tensor<T> permute(const Tensor<T>& x, std::span<const std::size_t> perm);

  // Convolutional building blocks, NCHW.
  Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& bias,
                   std::size_t stride, std::size_t pad);
  /// Normalizes over every axis but 1 of a [N,C] or [N,C,H,W] input.
  /// In training mode uses batch statistics and folds them into the running
  /// buffers as running = momentum * running + (1 - momentum) * batch.
  Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      double momentum = 0.9, double eps = 1e-5);
  Tensor<T> avgpool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride);

  /// Fills every leaf gradient with d(loss)/d(leaf), accumulating into any
  /// existing gradient. Consumes the tape.
  void backward(const Tensor<T>& loss);

 private:
  struct Record {
    std::string name;
    std::vector<std::uint64_t> inputs;
    std::function<void()> backward;
  };

  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const;
  Tensor<T> emit(const char* name, Shape shape, std::vector<T> values,
                 std::initializer_list<const Tensor<T>*> inputs, std::function<void(Tensor<T>&)> backward);

  bool recording_;
  bool consumed_ = false;
  std::vector<Record> records_;
};

extern template class Tape<float>;
extern template class Tape<double>;

namespace detail {

/// c[m,n] = alpha * op(a) * op(b) + beta * c, row-major.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha, const float* a,
          const float* b, float beta, float* c);
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

}  // namespace detail

}  // namespace clove
