#pragma once

#include <cstddef>
#include <vector>

#include "clove/params.hpp"
#include "clove/rng.hpp"
#include "clove/tape.hpp"

namespace clove {

struct AttentionConfig {
  std::size_t n_heads = 8;
  std::size_t head_dim = 8;
  double temperature = 0.2;
  /// Unit-normalize queries and keys so that scores are cosine similarities
  /// (NMHSA); off gives plain dot-product multi-head self-attention.
  bool normalize_qk = true;

  std::size_t model_dim() const { return n_heads * head_dim; }
  void validate(std::size_t d) const;
};

/// Pre- and post-softmax attention for inspection, both [N, heads, L, L].
template <typename T>
struct AttentionTrace {
  Tensor<T> scores;
  Tensor<T> weights;
};

/// Contextualized prediction head: one self-attention layer over the L
/// local embeddings of a view, no positional encoding and no residual.
///
/// W^q, W^k, W^v are stored as [D, heads * head_dim]; columns
/// [h * head_dim, (h + 1) * head_dim) belong to head h. The concatenated head
/// outputs go through W^o [D, D] plus bias.
template <typename T>
class Predictor {
 public:
  Predictor(AttentionConfig cfg, std::size_t dim, Rng& rng);

  /// [N, L, D] -> [N, L, D].
  Tensor<T> forward(Tape<T>& tape, const Tensor<T>& seq) const;
  AttentionTrace<T> attention(Tape<T>& tape, const Tensor<T>& seq) const;

  const AttentionConfig& config() const { return cfg_; }
  std::size_t dim() const { return dim_; }
  std::vector<NamedParam<T>>& parameters() { return params_; }
  const std::vector<NamedParam<T>>& parameters() const { return params_; }

 private:
  Tensor<T> run(Tape<T>& tape, const Tensor<T>& seq, AttentionTrace<T>* trace) const;
  const Tensor<T>& param(std::size_t i) const { return params_[i].value; }

  AttentionConfig cfg_;
  std::size_t dim_;
  std::vector<NamedParam<T>> params_;
};

extern template class Predictor<float>;
extern template class Predictor<double>;

}  // namespace clove
