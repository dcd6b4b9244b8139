#include "clove/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clove {

void LossConfig::validate() const {
  if (!(margin >= 0)) throw ConfigError("loss: margin must be >= 0");
  if (!(scale > 0)) throw ConfigError("loss: scale (lambda) must be > 0");
  if (top_k < 2) throw ConfigError("loss: top_k must be >= 2");
}

template <typename T>
double cosine(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::max(std::sqrt(na), kCosineEps) * std::max(std::sqrt(nb), kCosineEps);
  return std::clamp(dot / denom, -1.0, 1.0);
}

template <typename T>
std::optional<std::vector<T>> select_intra_negative(std::span<const T> c_i, std::span<const T> f_t, std::size_t dim,
                                                    std::size_t k, std::span<const std::size_t> exclude) {
  if (dim == 0 || c_i.size() != dim || f_t.size() % dim != 0) throw DimensionError("select_intra_negative: bad extents");
  const std::size_t len = f_t.size() / dim;
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < len; ++j) {
    if (std::find(exclude.begin(), exclude.end(), j) == exclude.end()) pool.push_back(j);
  }
  const std::size_t take = std::min(k, pool.size());
  if (take < 2) return std::nullopt;
  std::vector<double> sim(len);
  for (std::size_t j : pool) sim[j] = cosine(c_i, f_t.subspan(j * dim, dim));
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) { return sim[a] > sim[b]; });
  std::vector<double> acc(dim, 0.0);
  for (std::size_t r = 1; r < take; ++r) {
    const T* row = f_t.data() + pool[r] * dim;
    for (std::size_t d = 0; d < dim; ++d) acc[d] += row[d];
  }
  std::vector<T> out(dim);
  for (std::size_t d = 0; d < dim; ++d) out[d] = static_cast<T>(acc[d] / static_cast<double>(take - 1));
  return out;
}

template <typename T>
NegativeQueue<T>::NegativeQueue(std::size_t capacity, std::size_t dim)
    : capacity_(capacity), dim_(dim), data_(capacity * dim, T(0)) {
  if (capacity == 0 || dim == 0) throw ConfigError("negative queue: capacity and dim must be positive");
}

template <typename T>
void NegativeQueue<T>::push(std::span<const T> v) {
  if (v.size() != dim_) throw DimensionError("negative queue: pushed vector has wrong length");
  std::copy(v.begin(), v.end(), data_.begin() + cursor_ * dim_);
  cursor_ = (cursor_ + 1) % capacity_;
  fill_ = std::min(fill_ + 1, capacity_);
}

template <typename T>
void NegativeQueue<T>::push_from_map(NegativeStrategy strategy, std::span<const T> f_t, Rng& rng) {
  if (f_t.empty() || f_t.size() % dim_ != 0) throw DimensionError("negative queue: map is not [L, D]");
  const std::size_t len = f_t.size() / dim_;
  if (strategy == NegativeStrategy::inter) {
    push(f_t.subspan(rng.below(len) * dim_, dim_));
  } else if (strategy == NegativeStrategy::inter_avg) {
    std::vector<double> acc(dim_, 0.0);
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t d = 0; d < dim_; ++d) acc[d] += f_t[l * dim_ + d];
    std::vector<T> mean(dim_);
    for (std::size_t d = 0; d < dim_; ++d) mean[d] = static_cast<T>(acc[d] / static_cast<double>(len));
    push(mean);
  } else {
    throw ContractError("negative queue: intra strategy does not use a queue");
  }
}

template <typename T>
std::span<const T> NegativeQueue<T>::sample(Rng& rng) const {
  if (fill_ == 0) throw ContractError("negative queue: sample from empty queue");
  return slot(rng.below(fill_));
}

template <typename T>
std::span<const T> NegativeQueue<T>::slot(std::size_t i) const {
  if (i >= fill_) throw ContractError("negative queue: slot " + std::to_string(i) + " is not filled");
  return std::span<const T>(data_).subspan(i * dim_, dim_);
}

template <typename T>
void NegativeQueue<T>::restore(std::vector<T> storage, std::size_t cursor, std::size_t fill) {
  if (storage.size() != capacity_ * dim_ || cursor >= capacity_ || fill > capacity_) {
    throw DataError("negative queue: inconsistent saved state");
  }
  data_ = std::move(storage);
  cursor_ = cursor;
  fill_ = fill;
}

void LossDiagnostics::merge(const LossDiagnostics& o) {
  n_matches += o.n_matches;
  empty_images += o.empty_images;
  nonempty_images += o.nonempty_images;
  hinge_active += o.hinge_active;
  no_negative += o.no_negative;
  sigma_pos_sum += o.sigma_pos_sum;
  sigma_neg_sum += o.sigma_neg_sum;
  n_neg += o.n_neg;
}

double LossDiagnostics::sigma_pos_mean() const {
  return n_matches ? sigma_pos_sum / static_cast<double>(n_matches) : 0.0;
}
double LossDiagnostics::sigma_neg_mean() const { return n_neg ? sigma_neg_sum / static_cast<double>(n_neg) : 0.0; }
double LossDiagnostics::hinge_active_fraction() const {
  return n_matches ? static_cast<double>(hinge_active) / static_cast<double>(n_matches) : 0.0;
}

namespace {

template <typename T>
std::vector<T> unit(std::span<const T> v) {
  double sq = 0.0;
  for (T x : v) sq += static_cast<double>(x) * x;
  const double n = std::max(std::sqrt(sq), kCosineEps);
  std::vector<T> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<T>(v[i] / n);
  return out;
}

template <typename T>
LossResult<T> pairwise_loss(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& f_t, std::span<const MatchSet> matches,
                            const LossConfig* ranking, const NegativeQueue<T>* queue, Rng* rng) {
  if (c.rank() != 3 || f_t.rank() != 3 || c.dim(0) != f_t.dim(0) || c.dim(2) != f_t.dim(2)) {
    throw DimensionError("loss: expected c [N,Lu,D] and f_t [N,Lv,D], got " + shape_string(c.shape()) + " and " +
                         shape_string(f_t.shape()));
  }
  if (f_t.requires_grad()) throw ContractError("loss: teacher targets must be detached");
  const std::size_t n = c.dim(0), lu = c.dim(1), lv = f_t.dim(1), dim = c.dim(2);
  if (matches.size() != n) throw DimensionError("loss: need one match set per image");
  if (ranking) ranking->validate();
  const bool use_queue = ranking && ranking->negatives != NegativeStrategy::intra;
  if (use_queue && (!queue || !rng)) throw ContractError("loss: queue strategies need a queue and an rng");

  LossResult<T> res;
  std::size_t nonempty = 0;
  for (const MatchSet& m : matches) {
    for (auto [i, j] : m.pairs) {
      if (i >= lu || j >= lv) throw DimensionError("loss: match index outside the feature map");
    }
    nonempty += m.empty() ? 0 : 1;
  }
  res.diag.nonempty_images = nonempty;
  res.diag.empty_images = n - nonempty;
  if (nonempty == 0) {
    res.loss = Tensor<T>::scalar(T(0));
    return res;
  }
  res.empty = false;

  const Tensor<T> c_hat = tape.l2_normalize(tape.reshape(c, {n * lu, dim}), static_cast<T>(kCosineEps));
  std::vector<std::size_t> rows;
  std::vector<T> pos_target, neg_target, weights;
  std::vector<bool> has_neg;
  for (std::size_t b = 0; b < n; ++b) {
    const MatchSet& m = matches[b];
    if (m.empty()) continue;
    const double w = 1.0 / (static_cast<double>(m.size()) * static_cast<double>(nonempty));
    const std::span<const T> targets = f_t.data().subspan(b * lv * dim, lv * dim);
    std::vector<std::optional<std::vector<T>>> intra(lu);
    std::vector<bool> intra_done(lu, false);
    for (auto [i, j] : m.pairs) {
      const std::size_t row = b * lu + i;
      rows.push_back(row);
      const auto p = unit(targets.subspan(j * dim, dim));
      pos_target.insert(pos_target.end(), p.begin(), p.end());
      bool negative = false;
      std::vector<T> neg(dim, T(0));
      if (ranking && !use_queue) {
        if (!intra_done[i]) {
          const auto sel = select_intra_negative<T>(c_hat.data().subspan(row * dim, dim), targets, dim, ranking->top_k);
          if (sel) intra[i] = unit<T>(*sel);
          intra_done[i] = true;
        }
        if (intra[i]) {
          neg = *intra[i];
          negative = true;
        }
      } else if (use_queue && !queue->empty()) {
        neg = unit(queue->sample(*rng));
        negative = true;
      }
      neg_target.insert(neg_target.end(), neg.begin(), neg.end());
      has_neg.push_back(negative);
      // Intra mining without a candidate: the pair contributes nothing.
      const bool dropped = ranking && !use_queue && !negative;
      weights.push_back(dropped ? T(0) : static_cast<T>(w));
      if (ranking && !negative) ++res.diag.no_negative;
    }
  }
  const std::size_t r = rows.size();
  const Tensor<T> gathered = tape.gather_rows(c_hat, rows);
  const Tensor<T> pos = tape.rowdot(gathered, Tensor<T>({r, dim}, std::move(pos_target)));
  const Tensor<T> w = Tensor<T>({r}, std::move(weights));
  Tensor<T> terms;
  if (ranking) {
    const Tensor<T> neg = tape.rowdot(gathered, Tensor<T>({r, dim}, std::move(neg_target)));
    const Tensor<T> pre = tape.add_scalar(tape.sub(neg, tape.scale(pos, static_cast<T>(ranking->scale))),
                                          static_cast<T>(ranking->margin));
    terms = tape.relu(pre);
    for (std::size_t k = 0; k < r; ++k) {
      if (pre[k] > T(0)) ++res.diag.hinge_active;
      if (has_neg[k]) {
        res.diag.sigma_neg_sum += neg[k];
        ++res.diag.n_neg;
      }
    }
  } else {
    terms = tape.add_scalar(tape.scale(pos, T(-2)), T(2));
  }
  for (std::size_t k = 0; k < r; ++k) res.diag.sigma_pos_sum += pos[k];
  res.diag.n_matches = r;
  res.loss = tape.sum(tape.mul(terms, w));
  return res;
}

}  // namespace

template <typename T>
LossResult<T> rank_loss(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& f_t, std::span<const MatchSet> matches,
                        const LossConfig& cfg, const NegativeQueue<T>* queue, Rng* rng) {
  return pairwise_loss(tape, c, f_t, matches, &cfg, queue, rng);
}

template <typename T>
LossResult<T> l2_loss(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& f_t, std::span<const MatchSet> matches) {
  return pairwise_loss<T>(tape, c, f_t, matches, nullptr, nullptr, nullptr);
}

template <typename T>
LossResult<T> contextual_loss(Tape<T>& tape, const Tensor<T>& c, const Tensor<T>& f_t,
                              std::span<const MatchSet> matches, const LossConfig& cfg,
                              const NegativeQueue<T>* queue, Rng* rng) {
  if (cfg.mode == LossMode::l2) return l2_loss(tape, c, f_t, matches);
  return rank_loss(tape, c, f_t, matches, cfg, queue, rng);
}

#define CLOVE_INSTANTIATE(T)                                                                                      \
  template double cosine<T>(std::span<const T>, std::span<const T>);                                              \
  template std::optional<std::vector<T>> select_intra_negative<T>(std::span<const T>, std::span<const T>,        \
                                                                  std::size_t, std::size_t,                      \
                                                                  std::span<const std::size_t>);                 \
  template class NegativeQueue<T>;                                                                                \
  template LossResult<T> rank_loss<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const MatchSet>,   \
                                      const LossConfig&, const NegativeQueue<T>*, Rng*);                          \
  template LossResult<T> l2_loss<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, std::span<const MatchSet>);    \
  template LossResult<T> contextual_loss<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                         \
                                            std::span<const MatchSet>, const LossConfig&, const NegativeQueue<T>*, \
                                            Rng*);

CLOVE_INSTANTIATE(float)
CLOVE_INSTANTIATE(double)

#undef CLOVE_INSTANTIATE

}  // namespace clove
