#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "clove/error.hpp"

namespace clove {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array handle.
///
/// Copies share storage (like a reference-counted buffer); use clone() for a
/// deep copy. A tensor that requires grad receives gradient contributions
/// from Tape::backward. node() is 0 for leaves and the 1-based index of the
/// producing record for tape outputs.
template <typename T>
class Tensor {
 public:
  Tensor() : Tensor(Shape{1}) {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  /// Leaf that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  std::vector<T>& values() { return s_->data; }
  const std::vector<T>& values() const { return s_->data; }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }
  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer; empty span until something has been accumulated.
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }
  /// Allocates (zero-filled) on first use.
  std::vector<T>& grad_buffer();
  void zero_grad();

  std::uint64_t node() const { return s_->node; }
  void set_node(std::uint64_t id) { s_->node = id; }

  Tensor clone() const;
  /// Same values, fresh storage, no gradient tracking.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  bool all_finite() const;

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    std::uint64_t node = 0;
  };
  std::shared_ptr<Storage> s_;
};

extern template class Tensor<float>;
extern template class Tensor<double>;

/// Converts element type, dropping any gradient state.
template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  std::vector<To> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return Tensor<To>(t.shape(), std::move(out));
}

}  // namespace clove
