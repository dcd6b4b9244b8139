#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "clove/evalkit.hpp"
#include "clove/rng.hpp"
#include "tiny.hpp"

namespace clove {
namespace {

bool same_image(const SyntheticImage& a, const SyntheticImage& b) {
  return a.id == b.id && a.image.values() == b.image.values() && a.regions == b.regions && a.label == b.label;
}

TEST(Corpus, SameSeedSameCorpus) {
  const auto a = generate_corpus(20, 3), b = generate_corpus(20, 3), c = generate_corpus(20, 4);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_image(a[i], b[i]));
  EXPECT_NE(a[0].image.values(), c[0].image.values());
}

TEST(Corpus, ImageDependsOnlyOnSeedAndId) {
  const auto whole = generate_corpus(8, 9);
  const auto tail = generate_corpus(5, 9, {}, 3);
  for (std::size_t i = 0; i < tail.size(); ++i) EXPECT_TRUE(same_image(tail[i], whole[i + 3]));
}

TEST(Corpus, InvariantsHoldOverAThousandImages) {
  const CorpusProfile prof;
  const auto corpus = generate_corpus(1000, 21, prof);
  ASSERT_EQ(corpus.size(), 1000u);
  std::size_t kinds[kShapeClasses] = {};
  for (const auto& img : corpus) {
    ASSERT_EQ(img.image.shape(), (Shape{3, prof.height, prof.width}));
    ASSERT_EQ(img.regions.size(), prof.height * prof.width);
    ASSERT_GE(img.shapes.size(), prof.min_shapes);
    ASSERT_LE(img.shapes.size(), prof.max_shapes);
    for (float v : img.image.values()) ASSERT_TRUE(v >= 0.f && v <= 1.f);

    std::set<double> hues;
    for (const auto& s : img.shapes) {
      hues.insert(s.hue);
      ++kinds[static_cast<int>(s.kind)];
    }
    EXPECT_EQ(hues.size(), img.shapes.size()) << "image " << img.id;

    std::vector<std::size_t> area(img.shapes.size() + 1, 0), by_class(kShapeClasses, 0);
    for (auto r : img.regions) {
      ASSERT_LE(r, img.shapes.size());
      ++area[r];
      if (r) by_class[static_cast<int>(img.shapes[r - 1].kind)] += 1;
    }
    const auto label = static_cast<std::size_t>(std::max_element(by_class.begin(), by_class.end()) - by_class.begin());
    EXPECT_EQ(img.label, label);
    EXPECT_GT(area[0], 0u);
  }
  // Shape kinds: chi-square against uniform, 2 degrees of freedom, p = 0.001.
  const double total = static_cast<double>(kinds[0] + kinds[1] + kinds[2]);
  double chi2 = 0;
  for (std::size_t k : kinds) chi2 += std::pow(static_cast<double>(k) - total / 3, 2) / (total / 3);
  EXPECT_LT(chi2, 13.816);
}

TEST(Corpus, RegionsFollowTheRenderedPixels) {
  // Inside one region the texture is gentle; across a shape border colors jump.
  const auto corpus = generate_corpus(50, 2);
  std::size_t same_region = 0, border = 0;
  double same_diff = 0, border_diff = 0;
  for (const auto& img : corpus) {
    const std::size_t h = img.image.dim(1), w = img.image.dim(2);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x + 1 < w; ++x) {
        double d = 0;
        for (std::size_t c = 0; c < 3; ++c) d += std::abs(img.image[(c * h + y) * w + x] - img.image[(c * h + y) * w + x + 1]);
        if (img.regions[y * w + x] == img.regions[y * w + x + 1]) {
          same_diff += d;
          ++same_region;
        } else {
          border_diff += d;
          ++border;
        }
      }
    }
  }
  ASSERT_GT(border, 0u);
  EXPECT_GT(border_diff / static_cast<double>(border), 3 * same_diff / static_cast<double>(same_region));
}

ViewPairFeatures pair_with(const ViewGeometry& g1, const ViewGeometry& g2, std::size_t r, std::size_t c,
                           std::vector<float> f1, std::vector<float> f2, std::size_t dim) {
  ViewPairFeatures p;
  p.g1 = g1;
  p.g2 = g2;
  p.rows1 = p.rows2 = r;
  p.cols1 = p.cols2 = c;
  p.dim = dim;
  p.f1 = std::move(f1);
  p.f2 = std::move(f2);
  return p;
}

std::vector<float> one_hot(std::size_t n) {
  std::vector<float> f(n * n, 0.f);
  for (std::size_t i = 0; i < n; ++i) f[i * n + i] = 1.f;
  return f;
}

TEST(Correspondence, IdenticalViewsWithDistinctFeaturesAreExact) {
  const auto g = ViewGeometry::identity(32, 32);
  const std::vector<ViewPairFeatures> pairs{pair_with(g, g, 4, 4, one_hot(16), one_hot(16), 16)};
  CorrespondenceConfig cfg;
  const auto rep = score_correspondence(pairs, cfg);
  EXPECT_EQ(rep.queries, 16u);
  EXPECT_DOUBLE_EQ(rep.top1, 1.0);
  EXPECT_DOUBLE_EQ(rep.mean_error, 0.0);
  EXPECT_DOUBLE_EQ(rep.baseline, 1.0 / 16);
  EXPECT_FALSE(rep.degenerate);
}

TEST(Correspondence, IdenticalFeaturesAreFlaggedDegenerate) {
  const auto g = ViewGeometry::identity(32, 32);
  const std::vector<float> flat(16 * 8, 0.3f);
  const std::vector<ViewPairFeatures> pairs{pair_with(g, g, 4, 4, flat, flat, 8)};
  const auto rep = score_correspondence(pairs, CorrespondenceConfig{});
  EXPECT_TRUE(rep.degenerate);
  EXPECT_EQ(rep.top1, 0.0);
}

TEST(Correspondence, ReversedFeaturesMissEverything) {
  const auto g = ViewGeometry::identity(32, 32);
  auto f2 = one_hot(16);
  std::vector<float> rev(f2.size());
  for (std::size_t i = 0; i < 16; ++i) std::copy_n(f2.begin() + (15 - i) * 16, 16, rev.begin() + i * 16);
  const std::vector<ViewPairFeatures> pairs{pair_with(g, g, 4, 4, one_hot(16), rev, 16)};
  const auto rep = score_correspondence(pairs, CorrespondenceConfig{});
  EXPECT_EQ(rep.top1, 0.0);
  EXPECT_GT(rep.mean_error, 0.0);
}

TEST(Correspondence, GroundTruthDistanceIsSymmetric) {
  Rng rng(4);
  const AugmentProfile prof;
  const Tensor<float> img(Shape{3, 32, 32}, 0.5f);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = sample_view(img, rng, prof).geometry, b = sample_view(img, rng, prof).geometry;
    const GridPoints ga = build_grid(a, 4, 4), gb = build_grid(b, 4, 4);
    for (auto unit : {DistanceUnit::cell_diagonal, DistanceUnit::canonical}) {
      const double sab = distance_scale(ga, gb, unit), sba = distance_scale(gb, ga, unit);
      EXPECT_DOUBLE_EQ(sab, sba);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        for (std::size_t j = 0; j < gb.size(); ++j) {
          EXPECT_DOUBLE_EQ(point_distance(ga.points[i], gb.points[j]) * sab,
                           point_distance(gb.points[j], ga.points[i]) * sba);
        }
      }
    }
  }
}

TEST(Correspondence, ReportIgnoresCorpusOrderAndRepeats) {
  const TrainConfig tc = testing::tiny_train();
  Rng rng(2);
  Encoder<float> enc(tc.encoder, rng);
  auto corpus = generate_corpus(12, 6);
  CorrespondenceConfig cfg;
  cfg.batch = 5;
  const auto a = correspondence_eval(enc, corpus, cfg);
  std::reverse(corpus.begin(), corpus.end());
  std::swap(corpus[2], corpus[7]);
  const auto b = correspondence_eval(enc, corpus, cfg);
  cfg.batch = 64;
  const auto c = correspondence_eval(enc, corpus, cfg);
  for (const auto* r : {&b, &c}) {
    EXPECT_EQ(a.top1, r->top1);
    EXPECT_EQ(a.mean_error, r->mean_error);
    EXPECT_EQ(a.queries, r->queries);
  }
  EXPECT_GE(a.top1, 0.0);
  EXPECT_LE(a.top1, 1.0);
  EXPECT_EQ(a.images, 12u);
  EXPECT_TRUE(enc.training());
}

TEST(Probe, OneHotFeaturesSeparate) {
  std::vector<std::vector<double>> x;
  std::vector<std::size_t> y;
  for (std::size_t i = 0; i < 60; ++i) {
    y.push_back(i % 3);
    std::vector<double> f(3, 0.0);
    f[i % 3] = 1.0;
    x.push_back(f);
  }
  const auto r = linear_probe(x, y, x, y, 3);
  EXPECT_DOUBLE_EQ(r.train_accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r.test_accuracy, 1.0);
}

TEST(Probe, ConstantFeaturesGiveTheMajorityRate) {
  std::vector<std::vector<double>> x(40, std::vector<double>{2.0, -1.0});
  std::vector<std::size_t> y, ty;
  for (std::size_t i = 0; i < 40; ++i) y.push_back(i < 25 ? 1 : (i < 33 ? 0 : 2));
  for (std::size_t i = 0; i < 20; ++i) ty.push_back(i < 7 ? 1 : 0);
  const auto r = linear_probe(x, y, std::vector<std::vector<double>>(20, x[0]), ty, 3);
  EXPECT_DOUBLE_EQ(r.train_accuracy, 25.0 / 40);
  EXPECT_DOUBLE_EQ(r.test_accuracy, 7.0 / 20);
}

TEST(Probe, PooledFeaturesShapeAndLabels) {
  const TrainConfig tc = testing::tiny_train();
  Rng rng(2);
  Encoder<float> enc(tc.encoder, rng);
  const auto corpus = generate_corpus(7, 1);
  const auto f = pooled_features(enc, corpus, 3);
  ASSERT_EQ(f.size(), 7u);
  for (const auto& row : f) EXPECT_EQ(row.size(), tc.encoder.channels.back());
  const auto labels = corpus_labels(corpus);
  for (std::size_t i = 0; i < corpus.size(); ++i) EXPECT_EQ(labels[i], corpus[i].label);
}

}  // namespace
}  // namespace clove
