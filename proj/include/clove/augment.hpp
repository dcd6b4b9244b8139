#pragma once

#include <cstddef>
#include <vector>

#include "clove/rng.hpp"
#include "clove/tensor.hpp"

namespace clove {

/// Location in the original image, normalized by its width/height.
struct CanonicalPoint {
  double x = 0.0;
  double y = 0.0;
  bool valid = true;
};

/// Continuous point in view pixel coordinates: x in [0, W_v], y in [0, H_v].
struct ViewPoint {
  double x = 0.0;
  double y = 0.0;
};

/// Geometric part of an augmentation: crop (fractions of the original),
/// resize to out_h x out_w, then optional horizontal flip.
struct ViewGeometry {
  double left = 0.0;
  double top = 0.0;
  double width = 1.0;
  double height = 1.0;
  bool flip = false;
  std::size_t out_h = 1;
  std::size_t out_w = 1;

  static ViewGeometry identity(std::size_t out_h, std::size_t out_w) { return {0, 0, 1, 1, false, out_h, out_w}; }
  bool in_frame() const;
};

/// Photometric draws actually applied (kept for reproducibility logs).
struct PhotometricParams {
  bool jittered = false;
  double brightness = 1.0;
  double contrast = 1.0;
  double saturation = 1.0;
  bool grayscale = false;
};

struct ViewRecord {
  Tensor<float> image;  // [3, out_h, out_w], values in [0, 1]
  ViewGeometry geometry;
  PhotometricParams photometric;
};

struct AugmentProfile {
  double crop_min = 0.08;  // fraction of the original area
  double crop_max = 1.0;
  double ratio_min = 3.0 / 4.0;
  double ratio_max = 4.0 / 3.0;
  double flip_prob = 0.5;
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;
  double saturation = 0.2;
  double grayscale_prob = 0.2;
  std::size_t out_h = 32;
  std::size_t out_w = 32;

  /// Full crop, no flip, no photometric change.
  static AugmentProfile identity(std::size_t out_h, std::size_t out_w);
};

struct MultiCropProfile {
  AugmentProfile global;
  AugmentProfile local;
};

/// Global views at full resolution and local views at half resolution with
/// a smaller crop-scale range.
MultiCropProfile default_multicrop(const AugmentProfile& global);

constexpr std::size_t kMinImageExtent = 2;

ViewRecord sample_view(const Tensor<float>& image, Rng& rng, const AugmentProfile& profile);

/// Deterministic rendering of a view from fixed geometry and photometric draws.
Tensor<float> render_view(const Tensor<float>& image, const ViewGeometry& geom, const PhotometricParams& photo);

/// Inverse flip, then inverse crop/resize.
CanonicalPoint view_point_to_canonical(const ViewGeometry& geom, ViewPoint p);
/// Forward map (crop, resize, flip); the inverse of view_point_to_canonical.
ViewPoint canonical_to_view_point(const ViewGeometry& geom, CanonicalPoint c);

/// n_global global views followed by n_local local views.
std::vector<ViewRecord> make_multicrop(const Tensor<float>& image, Rng& rng, const MultiCropProfile& profile,
                                       std::size_t n_global, std::size_t n_local);

}  // namespace clove
