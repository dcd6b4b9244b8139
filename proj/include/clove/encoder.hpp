#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "clove/augment.hpp"
#include "clove/params.hpp"
#include "clove/rng.hpp"
#include "clove/tape.hpp"

namespace clove {

struct EncoderConfig {
  /// One 3x3 conv -> BN -> ReLU stage per entry.
  std::vector<std::size_t> channels{32, 64, 128, 128};
  std::vector<std::size_t> strides{1, 2, 2, 2};
  std::size_t head_hidden = 256;
  std::size_t embed_dim = 64;
  double bn_momentum = 0.9;

  std::size_t total_stride() const;
  void validate() const;
};

enum class Role { student, teacher };

/// Projected local embeddings [N, D, F_h, F_w].
template <typename T>
struct FeatureMap {
  Tensor<T> map;
  Role role = Role::student;

  std::size_t batch() const { return map.dim(0); }
  std::size_t dim() const { return map.dim(1); }
  std::size_t rows() const { return map.dim(2); }
  std::size_t cols() const { return map.dim(3); }
  std::size_t length() const { return rows() * cols(); }
};

/// [N, D, F_h, F_w] -> [N, L, D] with L index r * F_w + c.
template <typename T>
Tensor<T> to_sequence(Tape<T>& tape, const Tensor<T>& map);

/// Convolutional trunk followed by a per-location two-layer projection head
/// (1x1 conv -> BN -> ReLU -> 1x1 conv). Output is not normalized.
template <typename T>
class Encoder {
 public:
  Encoder(EncoderConfig cfg, Rng& rng);

  FeatureMap<T> forward(Tape<T>& tape, const Tensor<T>& views);
  Tensor<T> trunk(Tape<T>& tape, const Tensor<T>& views);
  Tensor<T> head(Tape<T>& tape, const Tensor<T>& features);

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  void set_role(Role r) { role_ = r; }
  Role role() const { return role_; }

  /// Deep copy with independent storage.
  Encoder clone() const;
  /// Turns gradient tracking on or off for every parameter.
  void set_trainable(bool on);

  std::vector<NamedParam<T>>& parameters() { return params_; }
  const std::vector<NamedParam<T>>& parameters() const { return params_; }
  std::vector<NamedBuffer<T>>& buffers() { return buffers_; }
  const std::vector<NamedBuffer<T>>& buffers() const { return buffers_; }
  const EncoderConfig& config() const { return cfg_; }

 private:
  Encoder() = default;
  Tensor<T>& param(std::size_t i) { return params_[i].value; }
  Tensor<T>& buffer(std::size_t i) { return buffers_[i].value; }

  EncoderConfig cfg_;
  bool training_ = true;
  Role role_ = Role::student;
  std::vector<NamedParam<T>> params_;
  std::vector<NamedBuffer<T>> buffers_;
};

/// teacher <- alpha * teacher + (1 - alpha) * student, parameter-wise;
/// batchnorm running statistics are copied from the student.
template <typename T>
void ema_update(Encoder<T>& teacher, const Encoder<T>& student, double alpha);

/// Stacks rendered views into an [N,3,H,W] batch normalized to roughly
/// zero mean and unit scale ((x - 0.5) / 0.25).
template <typename T>
Tensor<T> make_batch(std::span<const ViewRecord* const> views);

extern template class Encoder<float>;
extern template class Encoder<double>;

}  // namespace clove
