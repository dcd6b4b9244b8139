#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "clove/params.hpp"

namespace clove {

struct LarsConfig {
  double momentum = 0.9;
  double trust_coeff = 0.001;
  double weight_decay = 2e-5;
  double eps = 1e-9;
};

/// Momentum buffers, one per parameter, in parameter order.
template <typename T>
struct LarsState {
  std::vector<std::vector<T>> slots;

  /// Zero slots shaped like `params` (no-op when already matching).
  void ensure(std::span<NamedParam<T>* const> params);
};

/// One LARS update over every parameter holding a gradient:
///   ratio = trust * |w| / (|g| + wd |w| + eps) if both norms > 0, else 1
///   slot  = momentum * slot + ratio * lr * (g + wd w);  w -= slot
/// Bias and norm parameters use ratio 1 and no weight decay. Any non-finite
/// gradient raises NumericError before a single value is written.
template <typename T>
void lars_step(std::span<NamedParam<T>* const> params, LarsState<T>& state, double lr, const LarsConfig& cfg);

/// Linear warmup from 0 to lr_max over `warmup` steps, then cosine decay to
/// lr_min at `total`.
double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min, std::size_t warmup);

/// Teacher momentum ramped from `start` to `end` by cosine over `total` steps.
double ema_alpha(std::size_t step, std::size_t total, double start, double end);

extern template struct LarsState<float>;
extern template struct LarsState<double>;

}  // namespace clove
