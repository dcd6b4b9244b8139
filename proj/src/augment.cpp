#include "clove/augment.hpp"

#include <algorithm>
#include <cmath>

namespace clove {

bool ViewGeometry::in_frame() const {
  constexpr double tol = 1e-12;
  return width > 0 && height > 0 && left >= -tol && top >= -tol && left + width <= 1 + tol &&
         top + height <= 1 + tol && out_h > 0 && out_w > 0;
}

AugmentProfile AugmentProfile::identity(std::size_t out_h, std::size_t out_w) {
  AugmentProfile p;
  p.crop_min = p.crop_max = 1.0;
  p.ratio_min = p.ratio_max = 1.0;
  p.flip_prob = 0.0;
  p.jitter_prob = 0.0;
  p.grayscale_prob = 0.0;
  p.out_h = out_h;
  p.out_w = out_w;
  return p;
}

MultiCropProfile default_multicrop(const AugmentProfile& global) {
  MultiCropProfile mc{global, global};
  mc.local.crop_min = 0.05;
  mc.local.crop_max = 0.4;
  mc.local.out_h = std::max<std::size_t>(1, global.out_h / 2);
  mc.local.out_w = std::max<std::size_t>(1, global.out_w / 2);
  return mc;
}

CanonicalPoint view_point_to_canonical(const ViewGeometry& geom, ViewPoint p) {
  double u = p.x / static_cast<double>(geom.out_w);
  const double v = p.y / static_cast<double>(geom.out_h);
  if (geom.flip) u = 1.0 - u;
  CanonicalPoint c{geom.left + u * geom.width, geom.top + v * geom.height, true};
  c.valid = c.x >= 0 && c.x <= 1 && c.y >= 0 && c.y <= 1;
  return c;
}

ViewPoint canonical_to_view_point(const ViewGeometry& geom, CanonicalPoint c) {
  double u = (c.x - geom.left) / geom.width;
  const double v = (c.y - geom.top) / geom.height;
  if (geom.flip) u = 1.0 - u;
  return {u * static_cast<double>(geom.out_w), v * static_cast<double>(geom.out_h)};
}

namespace {

float bilinear(const float* plane, std::size_t h, std::size_t w, double sx, double sy) {
  sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
  sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
  const std::size_t x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
  const std::size_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
  const double top = plane[y0 * w + x0] * (1 - fx) + plane[y0 * w + x1] * fx;
  const double bot = plane[y1 * w + x0] * (1 - fx) + plane[y1 * w + x1] * fx;
  return static_cast<float>(top * (1 - fy) + bot * fy);
}

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

void apply_photometric(Tensor<float>& img, const PhotometricParams& photo) {
  const std::size_t plane = img.dim(1) * img.dim(2);
  float* r = img.data().data();
  float* g = r + plane;
  float* b = g + plane;
  auto clamp01 = [](float v) { return std::clamp(v, 0.0f, 1.0f); };
  if (photo.jittered) {
    const float br = static_cast<float>(photo.brightness);
    for (float& v : img.data()) v = clamp01(v * br);
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += luma(r[i], g[i], b[i]);
    const float m = static_cast<float>(mean / static_cast<double>(plane));
    const float ct = static_cast<float>(photo.contrast);
    for (float& v : img.data()) v = clamp01((v - m) * ct + m);
    const float st = static_cast<float>(photo.saturation);
    for (std::size_t i = 0; i < plane; ++i) {
      const float y = luma(r[i], g[i], b[i]);
      r[i] = clamp01((r[i] - y) * st + y);
      g[i] = clamp01((g[i] - y) * st + y);
      b[i] = clamp01((b[i] - y) * st + y);
    }
  }
  if (photo.grayscale) {
    for (std::size_t i = 0; i < plane; ++i) r[i] = g[i] = b[i] = luma(r[i], g[i], b[i]);
  }
}

ViewGeometry sample_geometry(std::size_t h, std::size_t w, Rng& rng, const AugmentProfile& profile) {
  const double area = static_cast<double>(h * w);
  const double log_lo = std::log(profile.ratio_min), log_hi = std::log(profile.ratio_max);
  ViewGeometry geom{0, 0, 1, 1, false, profile.out_h, profile.out_w};
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * rng.uniform(profile.crop_min, profile.crop_max);
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const double cw = std::sqrt(target * ratio);
    const double ch = std::sqrt(target / ratio);
    // Crops thinner than a pixel are degenerate; draw again.
    if (cw < 1.0 || ch < 1.0 || cw > static_cast<double>(w) || ch > static_cast<double>(h)) continue;
    geom.width = cw / static_cast<double>(w);
    geom.height = ch / static_cast<double>(h);
    geom.left = rng.uniform(0.0, 1.0 - geom.width);
    geom.top = rng.uniform(0.0, 1.0 - geom.height);
    found = true;
  }
  if (!found) {
    // Fallback: full image.
    geom.left = geom.top = 0.0;
    geom.width = geom.height = 1.0;
  }
  geom.flip = rng.bernoulli(profile.flip_prob);
  return geom;
}

}  // namespace

Tensor<float> render_view(const Tensor<float>& image, const ViewGeometry& geom, const PhotometricParams& photo) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("render_view: expected [3,H,W] image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  Tensor<float> out({3, geom.out_h, geom.out_w});
  for (std::size_t vy = 0; vy < geom.out_h; ++vy)
    for (std::size_t vx = 0; vx < geom.out_w; ++vx) {
      const CanonicalPoint c =
          view_point_to_canonical(geom, {static_cast<double>(vx) + 0.5, static_cast<double>(vy) + 0.5});
      const double sx = c.x * static_cast<double>(w) - 0.5;
      const double sy = c.y * static_cast<double>(h) - 0.5;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        out[(ch * geom.out_h + vy) * geom.out_w + vx] = bilinear(image.data().data() + ch * h * w, h, w, sx, sy);
      }
    }
  apply_photometric(out, photo);
  return out;
}

ViewRecord sample_view(const Tensor<float>& image, Rng& rng, const AugmentProfile& profile) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("sample_view: expected [3,H,W] image");
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h < kMinImageExtent || w < kMinImageExtent) {
    throw DimensionError("sample_view: image smaller than the minimum crop extent");
  }
  ViewRecord rec;
  rec.geometry = sample_geometry(h, w, rng, profile);
  PhotometricParams& p = rec.photometric;
  p.jittered = rng.bernoulli(profile.jitter_prob);
  if (p.jittered) {
    p.brightness = rng.uniform(std::max(0.0, 1 - profile.brightness), 1 + profile.brightness);
    p.contrast = rng.uniform(std::max(0.0, 1 - profile.contrast), 1 + profile.contrast);
    p.saturation = rng.uniform(std::max(0.0, 1 - profile.saturation), 1 + profile.saturation);
  }
  p.grayscale = rng.bernoulli(profile.grayscale_prob);
  rec.image = render_view(image, rec.geometry, p);
  return rec;
}

std::vector<ViewRecord> make_multicrop(const Tensor<float>& image, Rng& rng, const MultiCropProfile& profile,
                                       std::size_t n_global, std::size_t n_local) {
  std::vector<ViewRecord> views;
  views.reserve(n_global + n_local);
  for (std::size_t i = 0; i < n_global; ++i) views.push_back(sample_view(image, rng, profile.global));
  for (std::size_t i = 0; i < n_local; ++i) views.push_back(sample_view(image, rng, profile.local));
  return views;
}

}  // namespace clove
