#include "clove/encoder.hpp"

#include <array>
#include <cmath>
#include <string>

namespace clove {

std::size_t EncoderConfig::total_stride() const {
  std::size_t s = 1;
  for (std::size_t v : strides) s *= v;
  return s;
}

void EncoderConfig::validate() const {
  if (channels.empty() || channels.size() != strides.size()) {
    throw ConfigError("encoder: channels and strides must be non-empty lists of equal length");
  }
  for (std::size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] == 0 || strides[i] == 0) throw ConfigError("encoder: channel counts and strides must be positive");
  }
  if (head_hidden == 0 || embed_dim == 0) throw ConfigError("encoder: head dimensions must be positive");
  if (!(bn_momentum >= 0 && bn_momentum < 1)) throw ConfigError("encoder: bn_momentum must lie in [0, 1)");
}

template <typename T>
Tensor<T> to_sequence(Tape<T>& tape, const Tensor<T>& map) {
  if (map.rank() != 4) throw DimensionError("to_sequence: expected [N,D,Fh,Fw]");
  const std::size_t n = map.dim(0), d = map.dim(1), l = map.dim(2) * map.dim(3);
  const std::array<std::size_t, 3> perm{0, 2, 1};
  return tape.permute(tape.reshape(map, {n, d, l}), perm);
}

namespace {

template <typename T>
Tensor<T> normal_init(Rng& rng, Shape shape, double stddev) {
  std::vector<T> v(shape_size(shape));
  for (T& x : v) x = static_cast<T>(rng.normal() * stddev);
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> uniform_init(Rng& rng, Shape shape, double bound) {
  std::vector<T> v(shape_size(shape));
  for (T& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> constant_param(std::size_t n, T value) {
  return Tensor<T>::parameter({n}, std::vector<T>(n, value));
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(EncoderConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::size_t in = 3;
  for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
    const std::size_t out = cfg_.channels[s];
    const std::string p = "trunk." + std::to_string(s) + ".";
    params_.push_back({p + "conv.weight", normal_init<T>(rng, {out, in, 3, 3}, std::sqrt(2.0 / (in * 9.0))),
                       ParamKind::weight});
    params_.push_back({p + "bn.gamma", constant_param<T>(out, T(1)), ParamKind::norm});
    params_.push_back({p + "bn.beta", constant_param<T>(out, T(0)), ParamKind::norm});
    buffers_.push_back({p + "bn.running_mean", Tensor<T>({out}, T(0))});
    buffers_.push_back({p + "bn.running_var", Tensor<T>({out}, T(1))});
    in = out;
  }
  const std::size_t hid = cfg_.head_hidden, d = cfg_.embed_dim;
  const double b1 = 1.0 / std::sqrt(static_cast<double>(in));
  const double b2 = 1.0 / std::sqrt(static_cast<double>(hid));
  params_.push_back({"head.fc1.weight", uniform_init<T>(rng, {hid, in, 1, 1}, b1), ParamKind::weight});
  params_.push_back({"head.fc1.bias", uniform_init<T>(rng, {hid}, b1), ParamKind::bias});
  params_.push_back({"head.bn.gamma", constant_param<T>(hid, T(1)), ParamKind::norm});
  params_.push_back({"head.bn.beta", constant_param<T>(hid, T(0)), ParamKind::norm});
  params_.push_back({"head.fc2.weight", uniform_init<T>(rng, {d, hid, 1, 1}, b2), ParamKind::weight});
  params_.push_back({"head.fc2.bias", uniform_init<T>(rng, {d}, b2), ParamKind::bias});
  buffers_.push_back({"head.bn.running_mean", Tensor<T>({hid}, T(0))});
  buffers_.push_back({"head.bn.running_var", Tensor<T>({hid}, T(1))});
}

template <typename T>
Tensor<T> Encoder<T>::trunk(Tape<T>& tape, const Tensor<T>& views) {
  if (views.rank() != 4 || views.dim(1) != 3) {
    throw DimensionError("encoder: expected [N,3,H,W] views, got " + shape_string(views.shape()));
  }
  const std::size_t stride = cfg_.total_stride();
  if (views.dim(2) % stride != 0 || views.dim(3) % stride != 0) {
    throw DimensionError("encoder: resolution " + std::to_string(views.dim(2)) + "x" + std::to_string(views.dim(3)) +
                         " not divisible by trunk stride " + std::to_string(stride));
  }
  Tensor<T> x = views;
  for (std::size_t s = 0; s < cfg_.channels.size(); ++s) {
    x = tape.conv2d(x, param(3 * s), std::nullopt, cfg_.strides[s], 1);
    x = tape.batchnorm(x, param(3 * s + 1), param(3 * s + 2), buffer(2 * s), buffer(2 * s + 1), training_,
                       cfg_.bn_momentum);
    x = tape.relu(x);
  }
  return x;
}

template <typename T>
Tensor<T> Encoder<T>::head(Tape<T>& tape, const Tensor<T>& features) {
  const std::size_t h = 3 * cfg_.channels.size();
  const std::size_t hb = 2 * cfg_.channels.size();
  Tensor<T> x = tape.conv2d(features, param(h), param(h + 1), 1, 0);
  x = tape.batchnorm(x, param(h + 2), param(h + 3), buffer(hb), buffer(hb + 1), training_, cfg_.bn_momentum);
  x = tape.relu(x);
  return tape.conv2d(x, param(h + 4), param(h + 5), 1, 0);
}

template <typename T>
FeatureMap<T> Encoder<T>::forward(Tape<T>& tape, const Tensor<T>& views) {
  return {head(tape, trunk(tape, views)), role_};
}

template <typename T>
Encoder<T> Encoder<T>::clone() const {
  Encoder out;
  out.cfg_ = cfg_;
  out.training_ = training_;
  out.role_ = role_;
  for (const auto& p : params_) {
    Tensor<T> v = p.value.detach();
    v.set_requires_grad(p.value.requires_grad());
    out.params_.push_back({p.name, v, p.kind});
  }
  for (const auto& b : buffers_) out.buffers_.push_back({b.name, b.value.detach()});
  return out;
}

template <typename T>
void Encoder<T>::set_trainable(bool on) {
  for (auto& p : params_) p.value.set_requires_grad(on);
}

template <typename T>
void ema_update(Encoder<T>& teacher, const Encoder<T>& student, double alpha) {
  if (!(alpha >= 0 && alpha <= 1)) throw ContractError("ema_update: alpha must lie in [0, 1]");
  auto& tp = teacher.parameters();
  const auto& sp = student.parameters();
  if (tp.size() != sp.size()) throw ContractError("ema_update: parameter lists differ");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    if (tp[i].value.shape() != sp[i].value.shape()) {
      throw ContractError("ema_update: shape mismatch at " + tp[i].name);
    }
    auto t = tp[i].value.data();
    const auto s = sp[i].value.data();
    if (alpha == 0.0) {
      std::copy(s.begin(), s.end(), t.begin());
      continue;
    }
    for (std::size_t k = 0; k < t.size(); ++k) {
      t[k] = static_cast<T>(alpha * t[k] + (1.0 - alpha) * s[k]);
    }
  }
  auto& tb = teacher.buffers();
  const auto& sb = student.buffers();
  if (tb.size() != sb.size()) throw ContractError("ema_update: buffer lists differ");
  for (std::size_t i = 0; i < tb.size(); ++i) {
    if (tb[i].value.shape() != sb[i].value.shape()) throw ContractError("ema_update: shape mismatch at " + tb[i].name);
    std::copy(sb[i].value.data().begin(), sb[i].value.data().end(), tb[i].value.data().begin());
  }
}

template <typename T>
Tensor<T> make_batch(std::span<const ViewRecord* const> views) {
  if (views.empty()) throw DimensionError("make_batch: no views");
  const Shape& s = views.front()->image.shape();
  const std::size_t per = shape_size(s);
  std::vector<T> data(views.size() * per);
  for (std::size_t i = 0; i < views.size(); ++i) {
    if (views[i]->image.shape() != s) throw DimensionError("make_batch: views differ in resolution");
    const auto src = views[i]->image.data();
    for (std::size_t k = 0; k < per; ++k) data[i * per + k] = static_cast<T>((src[k] - 0.5) / 0.25);
  }
  return Tensor<T>({views.size(), s[0], s[1], s[2]}, std::move(data));
}

template class Encoder<float>;
template class Encoder<double>;
template Tensor<float> to_sequence(Tape<float>&, const Tensor<float>&);
template Tensor<double> to_sequence(Tape<double>&, const Tensor<double>&);
template void ema_update(Encoder<float>&, const Encoder<float>&, double);
template void ema_update(Encoder<double>&, const Encoder<double>&, double);
template Tensor<float> make_batch(std::span<const ViewRecord* const>);
template Tensor<double> make_batch(std::span<const ViewRecord* const>);

}  // namespace clove
