#include "clove/evalkit.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>

namespace clove {

namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hp) % 6) {
    case 0: rgb = {c, x, 0}; break;
    case 1: rgb = {x, c, 0}; break;
    case 2: rgb = {0, c, x}; break;
    case 3: rgb = {0, x, c}; break;
    case 4: rgb = {x, 0, c}; break;
    default: rgb = {c, 0, x}; break;
  }
  const double m = v - c;
  for (double& ch : rgb) ch += m;
  return rgb;
}

struct Placed {
  ShapeSpec spec;
  double aspect = 1.0;
  std::array<double, 3> color{};
  double shade = 0.0;
};

// Position relative to the shape center in its rotated frame.
std::pair<double, double> local_coords(const ShapeSpec& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  return {c * dx + sn * dy, -sn * dx + c * dy};
}

bool covers(const Placed& p, double x, double y) {
  const auto [u, v] = local_coords(p.spec, x, y);
  const double r = p.spec.size / 2;
  switch (p.spec.kind) {
    case ShapeKind::circle:
      return u * u + v * v < r * r;
    case ShapeKind::rectangle:
      return std::abs(u) < r && std::abs(v) < r * p.aspect;
    case ShapeKind::triangle: {
      std::array<std::pair<double, double>, 3> pts;
      for (int k = 0; k < 3; ++k) {
        const double a = std::numbers::pi / 2 + k * 2 * std::numbers::pi / 3;
        pts[k] = {r * std::cos(a), -r * std::sin(a)};
      }
      auto side = [&](int i, int j) {
        return (pts[j].first - pts[i].first) * (v - pts[i].second) - (pts[j].second - pts[i].second) * (u - pts[i].first);
      };
      const double s0 = side(0, 1), s1 = side(1, 2), s2 = side(2, 0);
      return (s0 >= 0 && s1 >= 0 && s2 >= 0) || (s0 <= 0 && s1 <= 0 && s2 <= 0);
    }
  }
  return false;
}

SyntheticImage render_image(std::uint64_t id, std::uint64_t seed, const CorpusProfile& prof) {
  Rng rng = Rng::stream(seed, {id});
  const std::size_t h = prof.height, w = prof.width;
  SyntheticImage out;
  out.id = id;

  const auto base = hsv_to_rgb(rng.uniform(), rng.uniform(0.1, 0.4), rng.uniform(0.3, 0.6));
  struct Wave {
    double fx, fy, phase, amp;
    std::array<double, 3> tint;
  };
  std::array<Wave, 3> waves;
  for (auto& wv : waves) {
    const double freq = rng.uniform(1.5, 5.0), theta = rng.uniform(0, std::numbers::pi);
    wv = {freq * std::cos(theta), freq * std::sin(theta), rng.uniform(0, 2 * std::numbers::pi),
          prof.texture * rng.uniform(0.5, 1.0), {rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5), rng.uniform(0.5, 1.5)}};
  }

  const std::size_t count = prof.min_shapes + rng.below(prof.max_shapes - prof.min_shapes + 1);
  const double hue0 = rng.uniform();
  std::vector<Placed> shapes(count);
  for (std::size_t k = 0; k < count; ++k) {
    Placed& p = shapes[k];
    p.spec.kind = static_cast<ShapeKind>(rng.below(kShapeClasses));
    p.spec.size = rng.uniform(prof.min_size, prof.max_size);
    p.spec.cx = rng.uniform(0.1, 0.9);
    p.spec.cy = rng.uniform(0.1, 0.9);
    p.spec.angle = rng.uniform(0, 2 * std::numbers::pi);
    // Evenly spaced hues with a small jitter keep every shape's hue distinct.
    p.spec.hue = hue0 + (static_cast<double>(k) + rng.uniform(-0.25, 0.25)) / static_cast<double>(count);
    p.spec.hue -= std::floor(p.spec.hue);
    p.aspect = rng.uniform(0.5, 1.0);
    p.color = hsv_to_rgb(p.spec.hue, rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0));
    p.shade = rng.uniform(0.2, 0.4);
    out.shapes.push_back(p.spec);
  }

  std::vector<float> img(3 * h * w);
  out.regions.assign(h * w, 0);
  std::array<std::size_t, kShapeClasses> area{};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
      const double py = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      std::array<double, 3> rgb = base;
      for (const auto& wv : waves) {
        const double s = wv.amp * std::sin(2 * std::numbers::pi * (wv.fx * px + wv.fy * py) + wv.phase);
        for (int c = 0; c < 3; ++c) rgb[c] += s * wv.tint[c];
      }
      for (std::size_t k = count; k-- > 0;) {
        if (!covers(shapes[k], px, py)) continue;
        const auto [u, v] = local_coords(shapes[k].spec, px, py);
        // Directional shading makes positions inside a shape distinguishable.
        const double g = 1.0 + shapes[k].shade * (u + 0.5 * v) / std::max(shapes[k].spec.size, 1e-9);
        for (int c = 0; c < 3; ++c) rgb[c] = shapes[k].color[c] * g;
        out.regions[y * w + x] = static_cast<std::uint8_t>(k + 1);
        ++area[static_cast<std::size_t>(shapes[k].spec.kind)];
        break;
      }
      for (int c = 0; c < 3; ++c) img[(c * h + y) * w + x] = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
    }
  }
  out.label = static_cast<std::size_t>(std::max_element(area.begin(), area.end()) - area.begin());
  out.image = Tensor<float>({3, h, w}, std::move(img));
  return out;
}

}  // namespace

std::vector<SyntheticImage> generate_corpus(std::size_t n, std::uint64_t seed, const CorpusProfile& profile,
                                            std::uint64_t first_id) {
  if (n == 0) throw ConfigError("corpus: need at least one image");
  if (profile.min_shapes < 1 || profile.max_shapes < profile.min_shapes || profile.max_shapes > 250) {
    throw ConfigError("corpus: bad shape-count range");
  }
  if (profile.height < kMinImageExtent || profile.width < kMinImageExtent) throw ConfigError("corpus: image too small");
  std::vector<SyntheticImage> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) out.push_back(render_image(first_id + k, seed, profile));
  return out;
}

std::vector<Tensor<float>> corpus_images(std::span<const SyntheticImage> corpus) {
  std::vector<Tensor<float>> out;
  for (const auto& s : corpus) out.push_back(s.image);
  return out;
}

std::vector<std::size_t> corpus_labels(std::span<const SyntheticImage> corpus) {
  std::vector<std::size_t> out;
  for (const auto& s : corpus) out.push_back(s.label);
  return out;
}

CorrespondenceConfig::CorrespondenceConfig() { views.crop_min = 0.25; }

namespace {

std::vector<const SyntheticImage*> by_id(std::span<const SyntheticImage> corpus) {
  std::vector<const SyntheticImage*> out;
  for (const auto& s : corpus) out.push_back(&s);
  std::stable_sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->id < b->id; });
  return out;
}

// Restores the encoder's mode when evaluation ends.
class EvalMode {
 public:
  explicit EvalMode(Encoder<float>& e) : e_(e), was_(e.training()) { e_.set_training(false); }
  ~EvalMode() { e_.set_training(was_); }

 private:
  Encoder<float>& e_;
  bool was_;
};

std::vector<double> unit_rows(const std::vector<float>& f, std::size_t dim) {
  std::vector<double> out(f.begin(), f.end());
  for (std::size_t r = 0; r < f.size() / dim; ++r) {
    double sq = 0;
    for (std::size_t d = 0; d < dim; ++d) sq += out[r * dim + d] * out[r * dim + d];
    const double n = std::max(std::sqrt(sq), 1e-6);
    for (std::size_t d = 0; d < dim; ++d) out[r * dim + d] /= n;
  }
  return out;
}

}  // namespace

CorrespondenceReport score_correspondence(std::span<const ViewPairFeatures> pairs, const CorrespondenceConfig& cfg) {
  CorrespondenceReport rep;
  rep.images = pairs.size();
  std::vector<std::size_t> hits(cfg.breakdown.size(), 0), asked(cfg.breakdown.size(), 0);
  std::size_t correct = 0;
  double error = 0;
  double widest = cfg.t_pos;
  for (double t : cfg.breakdown) widest = std::max(widest, t);

  // Degeneracy: every feature of every view equal to the first one.
  bool identical = true;
  const float* ref = pairs.empty() ? nullptr : pairs.front().f1.data();
  for (const auto& p : pairs) {
    for (const auto* f : {&p.f1, &p.f2}) {
      for (std::size_t k = 0; k < f->size() && identical; ++k) {
        const float a = (*f)[k], b = ref[k % p.dim];
        if (std::abs(a - b) > 1e-6f * std::max(1.f, std::abs(b))) identical = false;
      }
    }
  }
  rep.degenerate = !pairs.empty() && identical;

  for (const auto& p : pairs) {
    const GridPoints g1 = build_grid(p.g1, p.rows1, p.cols1);
    const GridPoints g2 = build_grid(p.g2, p.rows2, p.cols2);
    if (rep.baseline == 0.0) rep.baseline = 1.0 / static_cast<double>(g2.size());
    const double scale = distance_scale(g1, g2, cfg.unit);
    const auto u1 = unit_rows(p.f1, p.dim);
    const auto u2 = unit_rows(p.f2, p.dim);
    for (std::size_t i = 0; i < g1.size(); ++i) {
      if (!g1.points[i].valid) continue;
      std::size_t truth = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < g2.size(); ++j) {
        if (!g2.points[j].valid) continue;
        const double d = point_distance(g1.points[i], g2.points[j]) * scale;
        if (d < best) {
          best = d;
          truth = j;
        }
      }
      if (!(best < widest)) continue;
      std::size_t got = 0;
      double top = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < g2.size(); ++j) {
        double s = 0;
        for (std::size_t d = 0; d < p.dim; ++d) s += u1[i * p.dim + d] * u2[j * p.dim + d];
        if (s > top) {
          top = s;
          got = j;
        }
      }
      const bool ok = !rep.degenerate && got == truth;
      if (best < cfg.t_pos) {
        ++rep.queries;
        correct += ok;
        error += point_distance(g1.points[i], g2.points[got]);
      }
      for (std::size_t t = 0; t < cfg.breakdown.size(); ++t) {
        if (best < cfg.breakdown[t]) {
          ++asked[t];
          hits[t] += ok;
        }
      }
    }
  }
  if (rep.queries) {
    rep.top1 = static_cast<double>(correct) / static_cast<double>(rep.queries);
    rep.mean_error = error / static_cast<double>(rep.queries);
  }
  for (std::size_t t = 0; t < cfg.breakdown.size(); ++t) {
    rep.by_tpos.push_back({cfg.breakdown[t], asked[t] ? static_cast<double>(hits[t]) / static_cast<double>(asked[t]) : 0.0,
                           asked[t]});
  }
  return rep;
}

CorrespondenceReport correspondence_eval(Encoder<float>& encoder, std::span<const SyntheticImage> corpus,
                                         const CorrespondenceConfig& cfg) {
  if (cfg.batch == 0) throw ConfigError("correspondence: batch must be positive");
  EvalMode mode(encoder);
  const auto order = by_id(corpus);
  std::vector<ViewPairFeatures> pairs;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
    const std::size_t end = std::min(order.size(), start + cfg.batch);
    std::vector<ViewRecord> v1, v2;
    for (std::size_t k = start; k < end; ++k) {
      Rng rng = Rng::stream(cfg.seed, {order[k]->id});
      v1.push_back(sample_view(order[k]->image, rng, cfg.views));
      v2.push_back(sample_view(order[k]->image, rng, cfg.views));
    }
    auto features = [&](const std::vector<ViewRecord>& views) {
      std::vector<const ViewRecord*> ptrs;
      for (const auto& v : views) ptrs.push_back(&v);
      Tape<float> tape(false);
      const Tensor<float> batch = make_batch<float>(ptrs);
      const FeatureMap<float> f{cfg.features == FeatureLevel::trunk ? encoder.trunk(tape, batch)
                                                                    : encoder.forward(tape, batch).map};
      return std::pair{to_sequence(tape, f.map), f};
    };
    const auto [s1, f1] = features(v1);
    const auto [s2, f2] = features(v2);
    const std::size_t per1 = s1.size() / v1.size(), per2 = s2.size() / v2.size();
    for (std::size_t b = 0; b < v1.size(); ++b) {
      ViewPairFeatures p;
      p.g1 = v1[b].geometry;
      p.g2 = v2[b].geometry;
      p.f1.assign(s1.values().begin() + b * per1, s1.values().begin() + (b + 1) * per1);
      p.f2.assign(s2.values().begin() + b * per2, s2.values().begin() + (b + 1) * per2);
      p.rows1 = f1.rows();
      p.cols1 = f1.cols();
      p.rows2 = f2.rows();
      p.cols2 = f2.cols();
      p.dim = f1.dim();
      pairs.push_back(std::move(p));
    }
  }
  return score_correspondence(pairs, cfg);
}

std::vector<std::vector<double>> pooled_features(Encoder<float>& encoder, std::span<const SyntheticImage> corpus,
                                                 std::size_t batch) {
  EvalMode mode(encoder);
  std::vector<std::vector<double>> out;
  for (std::size_t start = 0; start < corpus.size(); start += batch) {
    const std::size_t end = std::min(corpus.size(), start + batch);
    std::vector<ViewRecord> views;
    for (std::size_t k = start; k < end; ++k) {
      const auto& img = corpus[k].image;
      views.push_back({img, ViewGeometry::identity(img.dim(1), img.dim(2)), {}});
    }
    std::vector<const ViewRecord*> ptrs;
    for (const auto& v : views) ptrs.push_back(&v);
    Tape<float> tape(false);
    const Tensor<float> t = encoder.trunk(tape, make_batch<float>(ptrs));
    const std::size_t c = t.dim(1), hw = t.dim(2) * t.dim(3);
    for (std::size_t b = 0; b < views.size(); ++b) {
      std::vector<double> row(c, 0.0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t k = 0; k < hw; ++k) row[ch] += t[(b * c + ch) * hw + k];
        row[ch] /= static_cast<double>(hw);
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, const std::vector<std::size_t>& train_y,
                         const std::vector<std::vector<double>>& test_x, const std::vector<std::size_t>& test_y,
                         std::size_t n_classes, const ProbeConfig& cfg) {
  if (train_x.empty() || train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
    throw DimensionError("linear_probe: features and labels disagree in count");
  }
  const std::size_t f = train_x[0].size(), n = train_x.size();
  for (const auto* set : {&train_x, &test_x})
    for (const auto& row : *set)
      if (row.size() != f) throw DimensionError("linear_probe: ragged feature rows");
  for (const auto* ys : {&train_y, &test_y})
    for (std::size_t y : *ys)
      if (y >= n_classes) throw DimensionError("linear_probe: label out of range");

  std::vector<double> mean(f, 0.0), scale(f, 0.0);
  for (const auto& row : train_x)
    for (std::size_t k = 0; k < f; ++k) mean[k] += row[k] / static_cast<double>(n);
  for (const auto& row : train_x)
    for (std::size_t k = 0; k < f; ++k) scale[k] += (row[k] - mean[k]) * (row[k] - mean[k]) / static_cast<double>(n);
  for (double& s : scale) s = s > 1e-16 ? 1.0 / std::sqrt(s) : 0.0;
  auto standardize = [&](const std::vector<double>& row) {
    std::vector<double> z(f);
    for (std::size_t k = 0; k < f; ++k) z[k] = (row[k] - mean[k]) * scale[k];
    return z;
  };
  std::vector<std::vector<double>> z;
  for (const auto& row : train_x) z.push_back(standardize(row));

  std::vector<double> w(n_classes * f, 0.0), b(n_classes, 0.0);
  auto logits = [&](const std::vector<double>& x) {
    std::vector<double> out(b);
    for (std::size_t c = 0; c < n_classes; ++c)
      for (std::size_t k = 0; k < f; ++k) out[c] += w[c * f + k] * x[k];
    return out;
  };
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::vector<double> gw(w.size(), 0.0), gb(n_classes, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto p = logits(z[i]);
      const double mx = *std::max_element(p.begin(), p.end());
      double sum = 0;
      for (double& v : p) sum += (v = std::exp(v - mx));
      for (std::size_t c = 0; c < n_classes; ++c) {
        const double g = p[c] / sum - (c == train_y[i] ? 1.0 : 0.0);
        gb[c] += g / static_cast<double>(n);
        for (std::size_t k = 0; k < f; ++k) gw[c * f + k] += g * z[i][k] / static_cast<double>(n);
      }
    }
    for (std::size_t k = 0; k < w.size(); ++k) w[k] -= cfg.lr * (gw[k] + cfg.l2 * w[k]);
    for (std::size_t c = 0; c < n_classes; ++c) b[c] -= cfg.lr * gb[c];
  }
  auto accuracy = [&](const std::vector<std::vector<double>>& xs, const std::vector<std::size_t>& ys) {
    if (xs.empty()) return 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto l = logits(standardize(xs[i]));
      ok += static_cast<std::size_t>(std::max_element(l.begin(), l.end()) - l.begin()) == ys[i];
    }
    return static_cast<double>(ok) / static_cast<double>(xs.size());
  };
  return {accuracy(train_x, train_y), accuracy(test_x, test_y)};
}

}  // namespace clove
