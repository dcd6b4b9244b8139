#pragma once

#include <string>
#include <vector>

#include "clove/tensor.hpp"

namespace clove {

/// Optimizer treatment: biases and normalization affine parameters skip
/// weight decay and trust-ratio scaling.
enum class ParamKind { weight, bias, norm };

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
  ParamKind kind = ParamKind::weight;
};

/// Non-trainable state (batchnorm running statistics).
template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor<T> value;
};

template <typename T>
void zero_grads(std::vector<NamedParam<T>>& params) {
  for (auto& p : params) p.value.zero_grad();
}

}  // namespace clove
