#pragma once

// Synthetic thorax-like slices with an analytic beam dose.
//
// Coordinates are continuous with pixel (i, j) centred at (j + 0.5, i + 0.5).
// Condition channel order is fixed: CT, PTV, OAR_1..OAR_O.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "dosediff/tensor.hpp"
#include "dosediff/rng.hpp"

namespace dosediff::data {

inline constexpr int kGeneratorVersion = 1;
inline constexpr double kDoseScale = 1.25;  // prescription units mapped to +1

struct Ellipse {
  double cx = 0.0, cy = 0.0, a = 1.0, b = 1.0, phi = 0.0;

  /// Point in the ellipse frame, scaled so the boundary is the unit circle.
  std::pair<double, double> local(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(phi), s = std::sin(phi);
    return {(c * dx + s * dy) / a, (-s * dx + c * dy) / b};
  }

  double radius2(double x, double y) const {
    const auto [u, v] = local(x, y);
    return u * u + v * v;
  }

  bool contains(double x, double y) const { return radius2(x, y) <= 1.0; }

  /// Distance travelled inside the ellipse by a ray with unit direction
  /// (ux, uy) before it reaches (x, y). Zero when (x, y) is outside.
  double depth(double x, double y, double ux, double uy) const {
    const double c = std::cos(phi), s = std::sin(phi);
    const double px = (c * (x - cx) + s * (y - cy)) / a, py = (-s * (x - cx) + c * (y - cy)) / b;
    const double dx = (c * ux + s * uy) / a, dy = (-s * ux + c * uy) / b;
    const double A = dx * dx + dy * dy, B = 2.0 * (px * dx + py * dy), C = px * px + py * py - 1.0;
    if (C > 0.0) return 0.0;
    const double disc = std::max(B * B - 4.0 * A * C, 0.0);
    return (B + std::sqrt(disc)) / (2.0 * A);
  }
};

struct PhantomOptions {
  double mu = 0.02;            // attenuation per pixel
  double sigma_fraction = 0.06;  // lateral beam sigma as a fraction of H
  int max_retries = 100;       // OAR placements avoiding the PTV
};

struct PhantomGeometry {
  std::size_t size = 0;
  Ellipse body, ptv;
  std::vector<Ellipse> oars;
  std::vector<double> beam_angles;  // radians, direction of travel
  double centroid_x = 0.0, centroid_y = 0.0;
  bool oar_overlap = false;
  int oar_retries = 0;
};

struct PhantomSample {
  std::size_t size = 0;
  std::size_t oar_count = 0;
  std::vector<float> ct, ptv, dose;
  std::vector<std::vector<float>> oars;
  std::map<std::string, std::string> meta;

  std::size_t pixels() const { return size * size; }
  bool operator==(const PhantomSample&) const = default;
};

inline std::string format_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace detail {

inline double pixel_centre(std::size_t k) { return static_cast<double>(k) + 0.5; }

inline std::vector<float> rasterize(const Ellipse& e, const std::vector<float>& within, std::size_t H) {
  std::vector<float> m(H * H, 0.0f);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < H; ++j)
      if (within[i * H + j] > 0.0f && e.contains(pixel_centre(j), pixel_centre(i))) m[i * H + j] = 1.0f;
  return m;
}

inline bool touches(const std::vector<float>& a, const std::vector<float>& b, std::size_t H) {
  // 8-neighbourhood contact or overlap.
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      if (a[i * H + j] == 0.0f) continue;
      for (std::size_t di = (i ? i - 1 : 0); di <= std::min(i + 1, H - 1); ++di)
        for (std::size_t dj = (j ? j - 1 : 0); dj <= std::min(j + 1, H - 1); ++dj)
          if (b[di * H + dj] > 0.0f) return true;
    }
  return false;
}

// Ellipse centred on a random pixel of `region`, with semi-axes drawn as
// fractions of H. The centre pixel is always covered.
inline Ellipse random_inner_ellipse(Rng& rng, const std::vector<float>& region, std::size_t H, double lo, double hi) {
  std::vector<std::size_t> candidates;
  for (std::size_t k = 0; k < region.size(); ++k)
    if (region[k] > 0.0f) candidates.push_back(k);
  const std::size_t k = candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
  Ellipse e;
  e.cx = pixel_centre(k % H);
  e.cy = pixel_centre(k / H);
  e.a = std::max(0.75, rng.uniform(lo, hi) * static_cast<double>(H));
  e.b = std::max(0.75, rng.uniform(lo, hi) * static_cast<double>(H));
  e.phi = rng.uniform(0.0, std::numbers::pi);
  return e;
}

// Body pixels at least `margin` (in normalized radius) away from the boundary.
inline std::vector<float> shrink(const Ellipse& body, std::size_t H, double scale) {
  Ellipse inner = body;
  inner.a *= scale;
  inner.b *= scale;
  std::vector<float> all(H * H, 1.0f);
  auto m = rasterize(inner, all, H);
  if (std::none_of(m.begin(), m.end(), [](float v) { return v > 0.0f; })) m = rasterize(body, all, H);
  return m;
}

}  // namespace detail

inline PhantomGeometry make_geometry(std::uint64_t seed, std::size_t H, std::size_t O, std::size_t beam_count,
                                     const PhantomOptions& opt = {}) {
  if (H < 16) throw std::invalid_argument("phantom: H must be >= 16, got " + std::to_string(H));
  if (O < 1) throw std::invalid_argument("phantom: need at least one OAR");
  if (beam_count < 1) throw std::invalid_argument("phantom: need at least one beam");
  Rng rng(seed);
  const double h = static_cast<double>(H);
  PhantomGeometry g;
  g.size = H;
  g.body.cx = h / 2.0 + rng.uniform(-0.04, 0.04) * h;
  g.body.cy = h / 2.0 + rng.uniform(-0.04, 0.04) * h;
  g.body.a = rng.uniform(0.36, 0.44) * h;
  g.body.b = rng.uniform(0.28, 0.36) * h;
  g.body.phi = rng.uniform(-0.15, 0.15);

  const std::vector<float> all(H * H, 1.0f);
  const auto body = detail::rasterize(g.body, all, H);
  g.ptv = detail::random_inner_ellipse(rng, detail::shrink(g.body, H, 0.6), H, 0.05, 0.09);
  const auto ptv = detail::rasterize(g.ptv, body, H);

  const auto oar_region = detail::shrink(g.body, H, 0.8);
  for (std::size_t k = 0; k < O; ++k) {
    Ellipse e;
    bool placed = false;
    for (int attempt = 0; attempt <= opt.max_retries; ++attempt) {
      e = detail::random_inner_ellipse(rng, oar_region, H, 0.04, 0.1);
      if (!detail::touches(detail::rasterize(e, body, H), ptv, H)) {
        placed = true;
        break;
      }
      ++g.oar_retries;
    }
    if (!placed) g.oar_overlap = true;
    g.oars.push_back(e);
  }

  double sx = 0.0, sy = 0.0, n = 0.0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < H; ++j)
      if (ptv[i * H + j] > 0.0f) {
        sx += detail::pixel_centre(j);
        sy += detail::pixel_centre(i);
        n += 1.0;
      }
  g.centroid_x = sx / n;
  g.centroid_y = sy / n;

  const double spacing = 2.0 * std::numbers::pi / static_cast<double>(beam_count);
  const double offset = rng.uniform(0.0, spacing);
  for (std::size_t k = 0; k < beam_count; ++k)
    g.beam_angles.push_back(offset + spacing * static_cast<double>(k) + rng.uniform(-0.1, 0.1) * spacing);
  return g;
}

/// Un-normalized dose at a point: sum over beams of a Gaussian lateral
/// profile about the ray through the PTV centroid, attenuated by depth.
inline double beam_dose(const PhantomGeometry& g, double x, double y, const PhantomOptions& opt = {}) {
  if (!g.body.contains(x, y)) return 0.0;
  const double sigma = opt.sigma_fraction * static_cast<double>(g.size);
  double d = 0.0;
  for (double theta : g.beam_angles) {
    const double ux = std::cos(theta), uy = std::sin(theta);
    const double rx = x - g.centroid_x, ry = y - g.centroid_y;
    const double lateral = rx * uy - ry * ux;
    d += std::exp(-lateral * lateral / (2.0 * sigma * sigma)) * std::exp(-opt.mu * g.body.depth(x, y, ux, uy));
  }
  return d;
}

inline PhantomSample render_phantom(const PhantomGeometry& g, std::uint64_t seed, const PhantomOptions& opt = {}) {
  const std::size_t H = g.size;
  PhantomSample s;
  s.size = H;
  s.oar_count = g.oars.size();
  const std::vector<float> all(H * H, 1.0f);
  const auto body = detail::rasterize(g.body, all, H);
  s.ptv = detail::rasterize(g.ptv, body, H);
  for (const auto& e : g.oars) s.oars.push_back(detail::rasterize(e, body, H));

  // CT: smooth radial falloff, a few low-frequency ripples, faint pixel
  // noise, and a per-structure density offset.
  Rng tex(seed ^ 0x9e3779b97f4a7c15ULL);
  struct Ripple {
    double fx, fy, phase, amp;
  };
  std::vector<Ripple> ripples;
  for (int k = 0; k < 3; ++k)
    ripples.push_back({tex.uniform(0.5, 2.5), tex.uniform(0.5, 2.5), tex.uniform(0.0, 2.0 * std::numbers::pi),
                       tex.uniform(0.01, 0.03)});
  std::vector<double> oar_density;
  for (std::size_t k = 0; k < g.oars.size(); ++k) oar_density.push_back(tex.uniform(-0.25, 0.2));
  s.ct.assign(H * H, 0.0f);
  const double h = static_cast<double>(H);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t p = i * H + j;
      if (body[p] == 0.0f) {
        tex.normal();  // keep the stream position independent of geometry
        continue;
      }
      const double x = detail::pixel_centre(j), y = detail::pixel_centre(i);
      double v = 0.6 - 0.2 * g.body.radius2(x, y);
      for (const auto& r : ripples)
        v += r.amp * std::sin(2.0 * std::numbers::pi * (r.fx * x + r.fy * y) / h + r.phase);
      v += 0.01 * tex.normal();
      for (std::size_t k = 0; k < g.oars.size(); ++k)
        if (s.oars[k][p] > 0.0f) v += oar_density[k];
      if (s.ptv[p] > 0.0f) v += 0.15;
      s.ct[p] = static_cast<float>(std::clamp(v, 0.05, 1.0));
    }

  std::vector<double> dose(H * H, 0.0);
  double ptv_sum = 0.0, ptv_n = 0.0;
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < H; ++j) {
      const std::size_t p = i * H + j;
      if (body[p] == 0.0f) continue;
      dose[p] = beam_dose(g, detail::pixel_centre(j), detail::pixel_centre(i), opt);
      if (s.ptv[p] > 0.0f) {
        ptv_sum += dose[p];
        ptv_n += 1.0;
      }
    }
  const double scale = ptv_n / ptv_sum;
  s.dose.resize(H * H);
  for (std::size_t p = 0; p < H * H; ++p) s.dose[p] = static_cast<float>(dose[p] * scale);

  std::string angles;
  for (double a : g.beam_angles) angles += (angles.empty() ? "" : ",") + format_double(a);
  s.meta = {
      {"beam_angles", angles},
      {"beam_count", std::to_string(g.beam_angles.size())},
      {"generator_version", std::to_string(kGeneratorVersion)},
      {"mu", format_double(opt.mu)},
      {"oar_overlap", g.oar_overlap ? "1" : "0"},
      {"oar_retries", std::to_string(g.oar_retries)},
      {"seed", std::to_string(seed)},
      {"sigma", format_double(opt.sigma_fraction * h)},
  };
  return s;
}

inline PhantomSample generate_phantom(std::uint64_t seed, std::size_t H, std::size_t O, std::size_t beam_count = 5,
                                      const PhantomOptions& opt = {}) {
  return render_phantom(make_geometry(seed, H, O, beam_count, opt), seed, opt);
}

/// Body support, i.e. ct > 0.
inline std::vector<float> body_mask(const PhantomSample& s) {
  std::vector<float> m(s.ct.size());
  for (std::size_t p = 0; p < m.size(); ++p) m[p] = s.ct[p] > 0.0f ? 1.0f : 0.0f;
  return m;
}

// ---------------------------------------------------------------------------
// Splits.

struct SplitRatios {
  double train = 220, val = 20, test = 80;
};

struct DatasetSplit {
  std::vector<std::size_t> train, val, test;
  std::uint64_t seed = 0;
  bool operator==(const DatasetSplit&) const = default;
};

/// Shuffles ids 0..n-1 with `seed` and cuts by rounded proportions; each
/// list is returned sorted.
inline DatasetSplit make_split(std::size_t n, std::uint64_t seed, const SplitRatios& r = {}) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || r.train + r.val + r.test <= 0)
    throw std::invalid_argument("split ratios must be nonnegative with a positive sum");
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i)
    std::swap(ids[i - 1], ids[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  const double total = r.train + r.val + r.test;
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.train / total)));
  const auto n_val =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(static_cast<double>(n) * r.val / total)));
  DatasetSplit s;
  s.seed = seed;
  s.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
               ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

/// Per-case generator seed derived from the dataset seed.
inline std::uint64_t case_seed(std::uint64_t dataset_seed, std::size_t id) {
  return Rng::derived(dataset_seed, id).next_u64();
}

// ---------------------------------------------------------------------------
// Network tensors.

struct NormalizedBatch {
  Tensor condition;  // [N, 2+O, H, W]
  Tensor dose;       // [N, 1, H, W] in [-1, 1]
  std::size_t clamped = 0;  // voxels above kDoseScale
};

inline double normalize_dose(double d) { return d / kDoseScale * 2.0 - 1.0; }
inline float denormalize_dose(double x) { return static_cast<float>((x + 1.0) / 2.0 * kDoseScale); }

inline Tensor condition_tensor(const std::vector<const PhantomSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("condition_tensor: empty batch");
  const std::size_t H = samples[0]->size, O = samples[0]->oar_count, P = H * H;
  std::vector<double> y;
  y.reserve(samples.size() * (2 + O) * P);
  for (const auto* s : samples) {
    if (s->size != H || s->oar_count != O) throw ShapeError("normalize_batch: mixed sizes or OAR counts in batch");
    y.insert(y.end(), s->ct.begin(), s->ct.end());
    y.insert(y.end(), s->ptv.begin(), s->ptv.end());
    for (const auto& m : s->oars) y.insert(y.end(), m.begin(), m.end());
  }
  return Tensor({samples.size(), 2 + O, H, H}, std::move(y));
}

inline NormalizedBatch normalize_batch(const std::vector<const PhantomSample*>& samples) {
  NormalizedBatch b;
  b.condition = condition_tensor(samples);
  const std::size_t H = samples[0]->size;
  std::vector<double> x;
  x.reserve(samples.size() * H * H);
  for (const auto* s : samples)
    for (float d : s->dose) {
      if (d > kDoseScale) ++b.clamped;
      x.push_back(normalize_dose(std::min<double>(d, kDoseScale)));
    }
  b.dose = Tensor({samples.size(), 1, H, H}, std::move(x));
  return b;
}

inline NormalizedBatch normalize_batch(const std::vector<PhantomSample>& samples) {
  std::vector<const PhantomSample*> ptrs;
  for (const auto& s : samples) ptrs.push_back(&s);
  return normalize_batch(ptrs);
}

}  // namespace dosediff::data
