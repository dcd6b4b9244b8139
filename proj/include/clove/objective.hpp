#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "clove/matching.hpp"
#include "clove/rng.hpp"
#include "clove/tape.hpp"

namespace clove {

enum class LossMode { rank, l2 };
enum class NegativeStrategy { intra, inter, inter_avg };

struct LossConfig {
  double margin = 100.0;  // mu
  double scale = 1.0;     // lambda, applied to the positive similarity only
  std::size_t top_k = 10;
  LossMode mode = LossMode::rank;
  NegativeStrategy negatives = NegativeStrategy::intra;

  void validate() const;
};

constexpr double kCosineEps = 1e-6;

/// Cosine similarity with both norms floored at kCosineEps; clamped to [-1, 1].
template <typename T>
double cosine(std::span<const T> a, std::span<const T> b);

/// Mean of the k most similar rows of f_t (k clamped to L) after dropping the
/// single most similar one. Rows listed in `exclude` are removed from the
/// pool first. Ties are broken by ascending row index. Returns nullopt when
/// fewer than two candidates remain.
template <typename T>
std::optional<std::vector<T>> select_intra_negative(std::span<const T> c_i, std::span<const T> f_t, std::size_t dim,
                                                    std::size_t k, std::span<const std::size_t> exclude = {});

/// Fixed-capacity FIFO of D-vectors used as cross-image negatives.
template <typename T>
class NegativeQueue {
 public:
  NegativeQueue(std::size_t capacity, std::size_t dim);

  void push(std::span<const T> v);
  /// inter: one uniformly chosen location; inter_avg: the spatial mean.
  /// f_t is one image's [L, D] teacher map.
  void push_from_map(NegativeStrategy strategy, std::span<const T> f_t, Rng& rng);
  /// Uniform draw over filled slots; requires size() >= 1.
  std::span<const T> sample(Rng& rng) const;
  std::span<const T> slot(std::size_t i) const;

  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return fill_; }
  std::size_t cursor() const { return cursor_; }
  bool empty() const { return fill_ == 0; }

  const std::vector<T>& storage() const { return data_; }
  /// Restores a saved queue; storage must hold capacity * dim values.
  void restore(std::vector<T> storage, std::size_t cursor, std::size_t fill);

 private:
  std::size_t capacity_;
  std::size_t dim_;
  std::size_t cursor_ = 0;
  std::size_t fill_ = 0;
  std::vector<T> data_;
};

struct LossDiagnostics {
  std::size_t n_matches = 0;
  std::size_t empty_images = 0;
  std::size_t nonempty_images = 0;
  std::size_t hinge_active = 0;
  std::size_t no_negative = 0;
  double sigma_pos_sum = 0.0;
  double sigma_neg_sum = 0.0;
  std::size_t n_neg = 0;

  void merge(const LossDiagnostics& other);
  double sigma_pos_mean() const;
  double sigma_neg_mean() const;
  double hinge_active_fraction() const;
};

template <typename T>
struct LossResult {
  /// Mean over images with a nonempty match set of (sum over M of the
  /// per-pair term) / |M|. Zero (and not on the tape) when every set is empty.
  Tensor<T> loss;
  LossDiagnostics diag;
  bool empty = true;
};

/// Margin ranking loss between contextualized predictions c [N, L_u, D]
/// (student, on the tape) and teacher targets f_t [N, L_v, D] (constant):
/// max(0, -scale * cos(C_i, F_j) + cos(C_i, F_neg) + margin) for each
/// (i, j) in matches[n]. With queue strategies and an empty queue the
/// negative term is skipped.
template <typename T>
LossResult<T> rank_loss(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& f_t, std::span<const MatchSet> matches,
                        const LossConfig& cfg, const NegativeQueue<T>* queue = nullptr, Rng* rng = nullptr);

/// Mean over M of 2 - 2 cos(C_i, F_j); no negatives.
template <typename T>
LossResult<T> l2_loss(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& f_t, std::span<const MatchSet> matches);

/// Dispatches on cfg.mode.
template <typename T>
LossResult<T> contextual_loss(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& f_t,
                              std::span<const MatchSet> matches, const LossConfig& cfg,
                              const NegativeQueue<T>* queue = nullptr, Rng* rng = nullptr);

extern template class NegativeQueue<float>;
extern template class NegativeQueue<double>;

}  // namespace clove
