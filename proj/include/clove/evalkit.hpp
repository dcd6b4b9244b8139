#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clove/augment.hpp"
#include "clove/encoder.hpp"
#include "clove/matching.hpp"

namespace clove {

enum class ShapeKind : int { circle = 0, rectangle = 1, triangle = 2 };
inline constexpr std::size_t kShapeClasses = 3;

struct ShapeSpec {
  ShapeKind kind = ShapeKind::circle;
  double cx = 0.5;  // normalized center
  double cy = 0.5;
  double size = 0.3;  // normalized extent (diameter / side)
  double angle = 0.0;
  double hue = 0.0;
};

struct SyntheticImage {
  std::uint64_t id = 0;
  Tensor<float> image;  // [3, H, W] in [0, 1]
  std::vector<ShapeSpec> shapes;
  /// Per-pixel region id: 0 background, k + 1 for shapes[k] (topmost wins).
  std::vector<std::uint8_t> regions;
  /// Class of the shape covering the most pixels.
  std::size_t label = 0;
};

struct CorpusProfile {
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  double min_size = 0.2;
  double max_size = 0.45;
  double texture = 0.12;
};

/// Images with ids first_id, first_id + 1, ...; image k depends only on
/// (seed, first_id + k).
std::vector<SyntheticImage> generate_corpus(std::size_t n, std::uint64_t seed, const CorpusProfile& profile = {},
                                            std::uint64_t first_id = 0);

std::vector<Tensor<float>> corpus_images(std::span<const SyntheticImage> corpus);

/// Which map dense retrieval reads: the projection head output or the trunk
/// (backbone) output beneath it.
enum class FeatureLevel { head, trunk };

struct CorrespondenceConfig {
  AugmentProfile views;
  FeatureLevel features = FeatureLevel::trunk;
  /// A view-1 cell is queried when its nearest view-2 cell lies closer than
  /// this (in `unit`); that nearest cell is the ground truth.
  double t_pos = 0.5;
  std::vector<double> breakdown{0.25, 0.5, 0.75, 1.0};
  DistanceUnit unit = DistanceUnit::cell_diagonal;
  std::uint64_t seed = 0;
  std::size_t batch = 64;

  CorrespondenceConfig();
};

struct ThresholdAccuracy {
  double t_pos = 0.0;
  double top1 = 0.0;
  std::size_t queries = 0;
};

struct CorrespondenceReport {
  double top1 = 0.0;
  /// Mean canonical distance between a query point and the retrieved point.
  double mean_error = 0.0;
  /// 1 / L, the expected accuracy of uniform retrieval.
  double baseline = 0.0;
  std::size_t queries = 0;
  std::size_t images = 0;
  std::vector<ThresholdAccuracy> by_tpos;
  /// Every feature vector identical: retrieval carries no information.
  bool degenerate = false;
};

/// Dense retrieval between two views of each image using `encoder` in eval
/// mode. Images are visited in id order and views are keyed by
/// (cfg.seed, image id), so the report ignores corpus order.
CorrespondenceReport correspondence_eval(Encoder<float>& encoder, std::span<const SyntheticImage> corpus,
                                         const CorrespondenceConfig& cfg);

/// Same protocol on already-rendered views and their feature sequences; the
/// building block of correspondence_eval, exposed for tests.
struct ViewPairFeatures {
  ViewGeometry g1;
  ViewGeometry g2;
  std::vector<float> f1;  // [L1, D]
  std::vector<float> f2;  // [L2, D]
  std::size_t rows1 = 0, cols1 = 0, rows2 = 0, cols2 = 0, dim = 0;
};
CorrespondenceReport score_correspondence(std::span<const ViewPairFeatures> pairs, const CorrespondenceConfig& cfg);

/// Global average of the encoder's trunk output on the full image, [N][C].
std::vector<std::vector<double>> pooled_features(Encoder<float>& encoder, std::span<const SyntheticImage> corpus,
                                                 std::size_t batch = 64);

struct ProbeConfig {
  std::size_t iterations = 300;
  double lr = 0.5;
  double l2 = 1e-4;
};

struct ProbeResult {
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
};

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent.
ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<std::size_t>& train_y,
                         const std::vector<std::vector<double>>& test_x, const std::vector<std::size_t>& test_y,
                         std::size_t n_classes, const ProbeConfig& cfg = {});

std::vector<std::size_t> corpus_labels(std::span<const SyntheticImage> corpus);

}  // namespace clove
