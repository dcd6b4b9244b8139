#include "clove/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace clove {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : s_(std::make_shared<Storage>()) {
  check_extents(shape);
  s_->data.assign(shape_size(shape), fill);
  s_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : s_(std::make_shared<Storage>()) {
  check_extents(shape);
  if (shape_size(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  s_->shape = std::move(shape);
  s_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t(std::move(shape), std::move(values));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_string(shape()));
  }
  return s_->shape[axis];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape()));
  return s_->data[0];
}

template <typename T>
std::vector<T>& Tensor<T>::grad_buffer() {
  if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
  return s_->grad;
}

template <typename T>
void Tensor<T>::zero_grad() {
  std::fill(s_->grad.begin(), s_->grad.end(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(s_->shape, s_->data);
  out.s_->grad = s_->grad;
  out.s_->requires_grad = s_->requires_grad;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(s_->shape, s_->data);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(s_->data.begin(), s_->data.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace clove
