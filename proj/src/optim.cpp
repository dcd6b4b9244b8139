#include "clove/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "clove/error.hpp"

namespace clove {

template <typename T>
void LarsState<T>::ensure(std::span<NamedParam<T>* const> params) {
  if (slots.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (slots[i].size() != params[i]->value.size()) {
        throw ContractError("lars: slot size mismatch for " + params[i]->name);
      }
    }
    return;
  }
  if (!slots.empty()) throw ContractError("lars: slot count does not match parameter count");
  for (const auto* p : params) slots.emplace_back(p->value.size(), T(0));
}

template <typename T>
void lars_step(std::span<NamedParam<T>* const> params, LarsState<T>& state, double lr, const LarsConfig& cfg) {
  state.ensure(params);
  for (const auto* p : params) {
    if (!p->value.has_grad()) continue;
    for (T g : p->value.grad()) {
      if (!std::isfinite(g)) throw NumericError("lars: non-finite gradient in " + p->name + "; step aborted");
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    NamedParam<T>& p = *params[i];
    if (!p.value.has_grad()) continue;
    auto w = p.value.data();
    const auto& g = p.value.grad();
    auto& slot = state.slots[i];
    const bool adapt = p.kind == ParamKind::weight;
    const double wd = adapt ? cfg.weight_decay : 0.0;
    double ratio = 1.0;
    if (adapt) {
      double wn = 0.0, gn = 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        wn += static_cast<double>(w[k]) * w[k];
        gn += static_cast<double>(g[k]) * g[k];
      }
      wn = std::sqrt(wn);
      gn = std::sqrt(gn);
      if (wn > 0 && gn > 0) ratio = cfg.trust_coeff * wn / (gn + wd * wn + cfg.eps);
    }
    const double step = ratio * lr;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double v = cfg.momentum * slot[k] + step * (g[k] + wd * w[k]);
      slot[k] = static_cast<T>(v);
      w[k] = static_cast<T>(w[k] - v);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total, double lr_max, double lr_min, std::size_t warmup) {
  if (step > total) throw ContractError("cosine_lr: step beyond total");
  if (step < warmup) return lr_max * static_cast<double>(step) / static_cast<double>(warmup);
  if (total <= warmup) return lr_max;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

double ema_alpha(std::size_t step, std::size_t total, double start, double end) {
  if (total == 0) return end;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return end - (end - start) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template struct LarsState<float>;
template struct LarsState<double>;
template void lars_step(std::span<NamedParam<float>* const>, LarsState<float>&, double, const LarsConfig&);
template void lars_step(std::span<NamedParam<double>* const>, LarsState<double>&, double, const LarsConfig&);

}  // namespace clove
