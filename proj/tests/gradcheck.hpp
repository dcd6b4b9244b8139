#pragma once

// Central finite-difference gradient oracle, fully in double precision.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "clove/rng.hpp"
#include "clove/tape.hpp"

namespace clove::test {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t kinks = 0;
  std::string worst;
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero entries from
/// turning truncation noise into a huge ratio.
inline double relative_error(double analytic, double numeric, double floor = 1e-2) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// f(tape) must build a scalar loss from the tensors in `wrt` (which are
/// flagged requires_grad by this function).
/// With kink_tol > 0, a partial whose central difference misses by more than
/// kink_tol is re-examined: if the two one-sided differences disagree with
/// each other and the analytic value matches one of them, the FD window
/// straddles a kink and the partial is counted in `kinks` instead.
template <typename F>
GradCheckResult grad_check(F&& f, const std::vector<Tensor<double>*>& wrt, double step = 1e-3,
                           double kink_tol = 0.0) {
  for (Tensor<double>* t : wrt) {
    t->set_requires_grad(true);
    t->grad_buffer();
    t->zero_grad();
  }
  {
    Tape<double> tape;
    Tensor<double> loss = f(tape);
    tape.backward(loss);
  }
  GradCheckResult res;
  for (std::size_t p = 0; p < wrt.size(); ++p) {
    Tensor<double>& t = *wrt[p];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double saved = t[i];
      t[i] = saved + step;
      double up, down;
      {
        Tape<double> tape(false);
        up = f(tape).item();
      }
      t[i] = saved - step;
      {
        Tape<double> tape(false);
        down = f(tape).item();
      }
      t[i] = saved;
      const double numeric = (up - down) / (2 * step);
      double err = relative_error(analytic[i], numeric);
      ++res.checked;
      if (kink_tol > 0 && err > kink_tol) {
        double mid;
        {
          Tape<double> tape(false);
          mid = f(tape).item();
        }
        const double right = (up - mid) / step, left = (mid - down) / step;
        const bool smooth = relative_error(left, right) <= kink_tol;
        const double one_sided = std::min(relative_error(analytic[i], left), relative_error(analytic[i], right));
        if (!smooth && one_sided <= kink_tol) {
          ++res.kinks;
          err = one_sided;
        }
      }
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst = "input " + std::to_string(p) + "[" + std::to_string(i) + "] analytic=" +
                    std::to_string(analytic[i]) + " numeric=" + std::to_string(numeric);
      }
    }
  }
  return res;
}

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>(std::move(shape), std::move(v));
}

/// Values bounded away from zero (for kinked ops like relu).
inline Tensor<double> random_away_from_zero(Rng& rng, Shape shape, double gap = 0.05) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) {
    const double mag = rng.uniform(gap, 1.0);
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor<double>(std::move(shape), std::move(v));
}

/// sum(weights * y): turns any op output into a scalar with a nontrivial
/// upstream gradient.
inline Tensor<double> weighted_sum(Tape<double>& tape, const Tensor<double>& y, const Tensor<double>& weights) {
  return tape.sum(tape.mul(y, weights));
}

}  // namespace clove::test
