#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "clove/encoder.hpp"
#include "gradcheck.hpp"

namespace clove {
namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.channels = {4, 5};
  cfg.strides = {1, 2};
  cfg.head_hidden = 6;
  cfg.embed_dim = 3;
  return cfg;
}

Tensor<float> random_images(Rng& rng, std::size_t n, std::size_t res) {
  std::vector<float> v(n * 3 * res * res);
  for (float& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return Tensor<float>({n, 3, res, res}, std::move(v));
}

TEST(Encoder, DeskScaleShape) {
  Rng rng(1);
  Encoder<float> enc(EncoderConfig{}, rng);
  Tape<float> tape;
  const FeatureMap<float> f = enc.forward(tape, random_images(rng, 1, 32));
  EXPECT_EQ(f.map.shape(), (Shape{1, 64, 4, 4}));
  EXPECT_EQ(f.length(), 16u);
}

TEST(Encoder, PaperScaleShape) {
  EncoderConfig cfg;
  cfg.channels = {8, 8, 8, 8, 8};
  cfg.strides = {2, 2, 2, 2, 2};
  cfg.head_hidden = 16;
  cfg.embed_dim = 256;
  Rng rng(2);
  Encoder<float> enc(cfg, rng);
  enc.set_training(false);
  Tape<float> tape(false);
  EXPECT_EQ(enc.forward(tape, random_images(rng, 1, 224)).map.shape(), (Shape{1, 256, 7, 7}));
}

TEST(Encoder, StrideMismatchThrows) {
  Rng rng(3);
  Encoder<float> enc(EncoderConfig{}, rng);
  Tape<float> tape;
  EXPECT_THROW(enc.forward(tape, random_images(rng, 1, 30)), DimensionError);
  EXPECT_THROW(enc.forward(tape, Tensor<float>({1, 1, 32, 32}, 0.f)), DimensionError);
}

TEST(Encoder, BadConfigRejected) {
  EncoderConfig cfg;
  cfg.strides = {1, 2};
  Rng rng(4);
  EXPECT_THROW(Encoder<float>(cfg, rng), ConfigError);
}

TEST(Encoder, IdenticalInputsIdenticalMapsInEval) {
  Rng rng(5);
  Encoder<float> enc(EncoderConfig{}, rng);
  enc.set_training(false);
  Tensor<float> one = random_images(rng, 1, 32);
  std::vector<float> two(one.values());
  two.insert(two.end(), one.values().begin(), one.values().end());
  Tape<float> tape(false);
  const Tensor<float> m = enc.forward(tape, Tensor<float>({2, 3, 32, 32}, two)).map;
  const std::size_t per = m.size() / 2;
  for (std::size_t i = 0; i < per; ++i) EXPECT_EQ(m[i], m[per + i]);
}

TEST(Encoder, SameSeedSameParameters) {
  Rng a(6), b(6);
  Encoder<float> ea(EncoderConfig{}, a), eb(EncoderConfig{}, b);
  ASSERT_EQ(ea.parameters().size(), eb.parameters().size());
  for (std::size_t i = 0; i < ea.parameters().size(); ++i) {
    EXPECT_EQ(ea.parameters()[i].name, eb.parameters()[i].name);
    EXPECT_EQ(ea.parameters()[i].value.values(), eb.parameters()[i].value.values());
  }
  EXPECT_EQ(ea.parameters().front().name, "trunk.0.conv.weight");
}

TEST(Encoder, CloneIsIndependent) {
  Rng rng(7);
  Encoder<float> s(tiny_config(), rng);
  Encoder<float> t = s.clone();
  t.parameters()[0].value[0] += 1.f;
  t.buffers()[0].value[0] += 1.f;
  EXPECT_NE(t.parameters()[0].value[0], s.parameters()[0].value[0]);
  EXPECT_NE(t.buffers()[0].value[0], s.buffers()[0].value[0]);
}

TEST(Encoder, ToSequenceLayout) {
  Rng rng(8);
  Tensor<double> map = test::random_tensor(rng, {2, 3, 2, 4});
  Tape<double> tape(false);
  const Tensor<double> seq = to_sequence(tape, map);
  ASSERT_EQ(seq.shape(), (Shape{2, 8, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t d = 0; d < 3; ++d)
      for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 4; ++c)
          EXPECT_EQ(seq[(n * 8 + r * 4 + c) * 3 + d], map[((n * 3 + d) * 2 + r) * 4 + c]);
}

TEST(Encoder, MakeBatchNormalizes) {
  ViewRecord a{Tensor<float>({3, 2, 2}, 0.5f), ViewGeometry::identity(2, 2), {}};
  ViewRecord b{Tensor<float>({3, 2, 2}, 1.0f), ViewGeometry::identity(2, 2), {}};
  const std::array<const ViewRecord*, 2> views{&a, &b};
  const Tensor<float> batch = make_batch<float>(views);
  ASSERT_EQ(batch.shape(), (Shape{2, 3, 2, 2}));
  EXPECT_FLOAT_EQ(batch[0], 0.f);
  EXPECT_FLOAT_EQ(batch[12], 2.f);
}

TEST(Ema, ExamplesFromRule) {
  Rng rng(9);
  Encoder<double> s(tiny_config(), rng);
  Encoder<double> t = s.clone();
  for (auto& p : t.parameters()) std::fill(p.value.values().begin(), p.value.values().end(), 2.0);
  for (auto& p : s.parameters()) std::fill(p.value.values().begin(), p.value.values().end(), 4.0);
  ema_update(t, s, 1.0);
  EXPECT_EQ(t.parameters()[0].value[0], 2.0);
  ema_update(t, s, 0.5);
  for (auto& p : t.parameters())
    for (double v : p.value.values()) EXPECT_EQ(v, 3.0);
  ema_update(t, s, 0.0);
  for (auto& p : t.parameters())
    for (double v : p.value.values()) EXPECT_EQ(v, 4.0);
}

TEST(Ema, StrictlyMovesTowardStudent) {
  Rng rng(10);
  Encoder<float> s(tiny_config(), rng);
  Encoder<float> t(tiny_config(), rng);
  for (double alpha : {0.01, 0.5, 0.99}) {
    Encoder<float> before = t.clone();
    Encoder<float> after = t.clone();
    ema_update(after, s, alpha);
    for (std::size_t i = 0; i < s.parameters().size(); ++i) {
      const auto& sv = s.parameters()[i].value.values();
      const auto& bv = before.parameters()[i].value.values();
      const auto& av = after.parameters()[i].value.values();
      for (std::size_t k = 0; k < sv.size(); ++k) {
        if (sv[k] == bv[k]) continue;
        EXPECT_LT(std::abs(av[k] - sv[k]), std::abs(bv[k] - sv[k])) << s.parameters()[i].name;
        EXPECT_GE(av[k], std::min(sv[k], bv[k]));
        EXPECT_LE(av[k], std::max(sv[k], bv[k]));
      }
    }
  }
}

TEST(Ema, CopiesBatchnormBuffers) {
  Rng rng(11);
  Encoder<float> s(tiny_config(), rng);
  Encoder<float> t = s.clone();
  Tape<float> tape;
  s.forward(tape, random_images(rng, 2, 8));
  ema_update(t, s, 0.9);
  for (std::size_t i = 0; i < s.buffers().size(); ++i)
    EXPECT_EQ(t.buffers()[i].value.values(), s.buffers()[i].value.values());
}

TEST(Ema, RejectsBadInputs) {
  Rng rng(12);
  Encoder<float> s(tiny_config(), rng);
  Encoder<float> t = s.clone();
  EXPECT_THROW(ema_update(t, s, 1.5), ContractError);
  EXPECT_THROW(ema_update(t, s, -0.1), ContractError);
  EncoderConfig other = tiny_config();
  other.embed_dim = 4;
  Encoder<float> wrong(other, rng);
  EXPECT_THROW(ema_update(wrong, s, 0.5), ContractError);
}

TEST(Encoder, TeacherNeverReceivesGradients) {
  Rng rng(13);
  Encoder<double> student(tiny_config(), rng);
  Encoder<double> teacher = student.clone();
  teacher.set_trainable(false);
  teacher.set_training(false);
  teacher.set_role(Role::teacher);
  const Tensor<double> x = test::random_tensor(rng, {2, 3, 4, 4});
  Tape<double> tape;
  const Tensor<double> fs = student.forward(tape, x).map;
  const Tensor<double> ft = teacher.forward(tape, x).map;
  EXPECT_FALSE(ft.requires_grad());
  tape.backward(tape.sum(tape.mul(fs, ft)));
  for (const auto& p : teacher.parameters()) EXPECT_FALSE(p.value.has_grad()) << p.name;
  bool any = false;
  for (const auto& p : student.parameters())
    for (double g : p.value.grad()) any = any || g != 0.0;
  EXPECT_TRUE(any);
}

TEST(Encoder, HeadHasNoSpatialMixing) {
  Rng rng(14);
  Encoder<double> enc(tiny_config(), rng);
  enc.set_training(false);
  const std::size_t c = tiny_config().channels.back();
  const Tensor<double> feats = test::random_tensor(rng, {1, c, 2, 3});
  // Swap two spatial locations: (0,0) <-> (1,2).
  Tensor<double> swapped = feats.clone();
  for (std::size_t k = 0; k < c; ++k) std::swap(swapped[k * 6 + 0], swapped[k * 6 + 5]);
  Tape<double> tape(false);
  const Tensor<double> a = enc.head(tape, feats);
  const Tensor<double> b = enc.head(tape, swapped);
  const std::size_t d = a.dim(1);
  for (std::size_t k = 0; k < d; ++k) {
    EXPECT_NEAR(a[k * 6 + 0], b[k * 6 + 5], 1e-12);
    EXPECT_NEAR(a[k * 6 + 5], b[k * 6 + 0], 1e-12);
    for (std::size_t l = 1; l < 5; ++l) EXPECT_NEAR(a[k * 6 + l], b[k * 6 + l], 1e-12);
  }
}

TEST(Encoder, GradientsMatchFiniteDifferences) {
  Rng rng(15);
  Encoder<double> enc(tiny_config(), rng);
  const Tensor<double> x = test::random_tensor(rng, {2, 3, 4, 4});
  const Tensor<double> probe = test::random_tensor(rng, {2, 3, 2, 2});
  std::vector<Tensor<double>*> wrt;
  for (auto& p : enc.parameters()) wrt.push_back(&p.value);
  const auto res = test::grad_check(
      [&](Tape<double>& tape) { return tape.sum(tape.mul(enc.forward(tape, x).map, probe)); }, wrt, 1e-4);
  EXPECT_LT(res.max_rel_error, 1e-3) << res.worst;
  EXPECT_GT(res.checked, 100u);
}

}  // namespace
}  // namespace clove
