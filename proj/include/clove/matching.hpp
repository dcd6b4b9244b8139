#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "clove/augment.hpp"

namespace clove {

/// Canonical position of every feature-map cell of a view, row-major
/// (index r * cols + c), i.e. the same order as the FeatureMap sequence.
struct GridPoints {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<CanonicalPoint> points;
  /// Extent of one cell in the canonical frame.
  double cell_width = 0.0;
  double cell_height = 0.0;

  std::size_t size() const { return points.size(); }
  double cell_diagonal() const;
};

/// How the matching threshold is measured.
///   canonical:     plain Euclidean distance in the [0,1]^2 frame.
///   cell_diagonal: the same distance divided by the larger cell diagonal of
///                  the two grids, so the threshold is in feature-cell units
///                  regardless of crop scale.
enum class DistanceUnit { canonical, cell_diagonal };

struct MatchSet {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  double t_pos = 0.0;

  bool empty() const { return pairs.empty(); }
  std::size_t size() const { return pairs.size(); }
};

GridPoints build_grid(const ViewGeometry& geom, std::size_t f_h, std::size_t f_w);

double point_distance(const CanonicalPoint& a, const CanonicalPoint& b);
/// Scale that converts canonical distances between g1 and g2 into the
/// threshold's unit.
double distance_scale(const GridPoints& g1, const GridPoints& g2, DistanceUnit unit);

/// All (i, j) with distance(g1[i], g2[j]) < t_pos; pairs are ordered by i
/// then j.
MatchSet match_pairs(const GridPoints& g1, const GridPoints& g2, double t_pos,
                     DistanceUnit unit = DistanceUnit::cell_diagonal);

}  // namespace clove
