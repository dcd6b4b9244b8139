#include "clove/matching.hpp"

#include <algorithm>
#include <cmath>

#include "clove/error.hpp"

namespace clove {

double GridPoints::cell_diagonal() const { return std::hypot(cell_width, cell_height); }

GridPoints build_grid(const ViewGeometry& geom, std::size_t f_h, std::size_t f_w) {
  if (f_h == 0 || f_w == 0) throw DimensionError("build_grid: grid extents must be positive");
  GridPoints g;
  g.rows = f_h;
  g.cols = f_w;
  g.cell_width = geom.width / static_cast<double>(f_w);
  g.cell_height = geom.height / static_cast<double>(f_h);
  g.points.reserve(f_h * f_w);
  for (std::size_t r = 0; r < f_h; ++r)
    for (std::size_t c = 0; c < f_w; ++c) {
      const ViewPoint center{(static_cast<double>(c) + 0.5) / static_cast<double>(f_w) * static_cast<double>(geom.out_w),
                             (static_cast<double>(r) + 0.5) / static_cast<double>(f_h) * static_cast<double>(geom.out_h)};
      g.points.push_back(view_point_to_canonical(geom, center));
    }
  return g;
}

double point_distance(const CanonicalPoint& a, const CanonicalPoint& b) { return std::hypot(a.x - b.x, a.y - b.y); }

double distance_scale(const GridPoints& g1, const GridPoints& g2, DistanceUnit unit) {
  if (unit == DistanceUnit::canonical) return 1.0;
  return 1.0 / std::max(g1.cell_diagonal(), g2.cell_diagonal());
}

MatchSet match_pairs(const GridPoints& g1, const GridPoints& g2, double t_pos, DistanceUnit unit) {
  if (!(t_pos > 0)) throw ContractError("match_pairs: t_pos must be positive");
  MatchSet m;
  m.t_pos = t_pos;
  const double scale = distance_scale(g1, g2, unit);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    const CanonicalPoint& a = g1.points[i];
    if (!a.valid) continue;
    for (std::size_t j = 0; j < g2.size(); ++j) {
      const CanonicalPoint& b = g2.points[j];
      if (!b.valid) continue;
      if (point_distance(a, b) * scale < t_pos) {
        m.pairs.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
      }
    }
  }
  return m;
}

}  // namespace clove
