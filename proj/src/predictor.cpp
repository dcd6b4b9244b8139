#include "clove/predictor.hpp"

#include <array>
#include <cmath>

namespace clove {

void AttentionConfig::validate(std::size_t d) const {
  if (n_heads == 0 || head_dim == 0) throw ConfigError("attention: heads and head_dim must be positive");
  if (n_heads * head_dim != d) {
    throw DimensionError("attention: heads * head_dim = " + std::to_string(n_heads * head_dim) +
                         " but feature dim is " + std::to_string(d));
  }
  if (!(temperature > 0)) throw ConfigError("attention: temperature must be positive");
}

template <typename T>
Predictor<T>::Predictor(AttentionConfig cfg, std::size_t dim, Rng& rng) : cfg_(cfg), dim_(dim) {
  cfg_.validate(dim_);
  const double bound = std::sqrt(1.0 / static_cast<double>(dim_));
  auto uniform = [&](Shape shape) {
    std::vector<T> v(shape_size(shape));
    for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::parameter(std::move(shape), std::move(v));
  };
  const std::size_t proj = cfg_.model_dim();
  params_.push_back({"predictor.wq", uniform({dim_, proj}), ParamKind::weight});
  params_.push_back({"predictor.wk", uniform({dim_, proj}), ParamKind::weight});
  params_.push_back({"predictor.wv", uniform({dim_, proj}), ParamKind::weight});
  params_.push_back({"predictor.wo", uniform({proj, dim_}), ParamKind::weight});
  params_.push_back({"predictor.bo", Tensor<T>::parameter({dim_}, std::vector<T>(dim_, T(0))), ParamKind::bias});
}

template <typename T>
Tensor<T> Predictor<T>::run(Tape<T>& tape, const Tensor<T>& seq, AttentionTrace<T>* trace) const {
  if (seq.rank() != 3 || seq.dim(2) != dim_) {
    throw DimensionError("predictor: expected [N,L," + std::to_string(dim_) + "], got " + shape_string(seq.shape()));
  }
  const std::size_t n = seq.dim(0), l = seq.dim(1), h = cfg_.n_heads, hd = cfg_.head_dim;
  const std::array<std::size_t, 4> split{0, 2, 1, 3};  // [N,L,H,hd] <-> [N,H,L,hd]
  const Tensor<T> rows = tape.reshape(seq, {n * l, dim_});
  auto heads = [&](const Tensor<T>& w) {
    const Tensor<T> proj = tape.reshape(tape.matmul(rows, w), {n, l, h, hd});
    return tape.reshape(tape.permute(proj, split), {n * h, l, hd});
  };
  Tensor<T> q = heads(param(0));
  Tensor<T> k = heads(param(1));
  const Tensor<T> v = heads(param(2));
  if (cfg_.normalize_qk) {
    q = tape.l2_normalize(q);
    k = tape.l2_normalize(k);
  }
  Tensor<T> similarity = tape.bmm(q, k, true);
  // Rounding can push a unit-vector dot product a hair past 1.
  if (cfg_.normalize_qk) similarity = tape.clamp(similarity, T(-1), T(1));
  const Tensor<T> scores = tape.scale(similarity, static_cast<T>(1.0 / cfg_.temperature));
  const Tensor<T> weights = tape.softmax(scores);
  if (trace) {
    trace->scores = tape.reshape(scores, {n, h, l, l});
    trace->weights = tape.reshape(weights, {n, h, l, l});
  }
  const Tensor<T> mixed = tape.reshape(tape.bmm(weights, v), {n, h, l, hd});
  const Tensor<T> concat = tape.reshape(tape.permute(mixed, split), {n * l, h * hd});
  return tape.reshape(tape.linear(concat, param(3), param(4)), {n, l, dim_});
}

template <typename T>
Tensor<T> Predictor<T>::forward(Tape<T>& tape, const Tensor<T>& seq) const {
  return run(tape, seq, nullptr);
}

template <typename T>
AttentionTrace<T> Predictor<T>::attention(Tape<T>& tape, const Tensor<T>& seq) const {
  AttentionTrace<T> trace;
  run(tape, seq, &trace);
  return trace;
}

template class Predictor<float>;
template class Predictor<double>;

}  // namespace clove
