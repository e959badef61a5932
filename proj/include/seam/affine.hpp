#pragma once

#include <array>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "seam/ops.hpp"
#include "seam/tensor.hpp"

namespace seam {

/// Spatial transform applied identically to images and activation maps.
///
/// Composition order is fixed: horizontal flip, rotation about the map center,
/// translation, then rescaling. Coordinates are pixel centers with corners
/// aligned, so a pure rescale maps the four corner pixels onto each other.
/// Positive rotation turns clockwise on screen (x right, y down). Translation
/// is a viewport offset: output pixel u reads the source at u + (dx, dy), so
/// a positive dx exposes empty columns on the right.
struct AffineTransform {
  double scale = 1.0;
  double rotation_deg = 0.0;
  std::array<double, 2> translation_px{0.0, 0.0};
  bool hflip = false;

  bool is_identity() const {
    return scale == 1.0 && rotation_deg == 0.0 && translation_px[0] == 0.0 && translation_px[1] == 0.0 && !hflip;
  }

  /// The same transform expressed on a grid `factor` times as fine (e.g. 0.25 for a stride-4 map).
  AffineTransform at_resolution(double factor) const {
    AffineTransform t = *this;
    t.translation_px = {translation_px[0] * factor, translation_px[1] * factor};
    return t;
  }

  bool operator==(const AffineTransform&) const = default;
};

inline std::string describe(const AffineTransform& t) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "scale=%g rotation_deg=%g translation_px=(%g,%g) hflip=%d", t.scale, t.rotation_deg,
                t.translation_px[0], t.translation_px[1], t.hflip ? 1 : 0);
  return buf;
}

enum class Sampling { bilinear, nearest };

inline std::size_t scaled_extent(double scale, std::size_t extent) {
  if (!(scale > 0.0)) throw ParameterError("affine transform scale must be > 0, got " + std::to_string(scale));
  const double v = std::round(scale * static_cast<double>(extent));
  if (v < 1.0) {
    throw ParameterError("affine transform scale " + std::to_string(scale) + " maps extent " + std::to_string(extent) +
                         " to a non-positive size");
  }
  return static_cast<std::size_t>(v);
}

namespace detail {

struct SourcePoint {
  double x, y;
};

/// Inverse map from an output pixel to continuous source coordinates.
class InverseMap {
 public:
  InverseMap(const AffineTransform& t, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w)
      : t_(t), h_(h), w_(w), out_h_(out_h), out_w_(out_w) {
    const double rad = t.rotation_deg * std::numbers::pi / 180.0;
    cos_ = std::cos(rad);
    sin_ = std::sin(rad);
    cx_ = (static_cast<double>(w) - 1.0) / 2.0;
    cy_ = (static_cast<double>(h) - 1.0) / 2.0;
    fx_ = out_w > 1 ? (static_cast<double>(w) - 1.0) / (static_cast<double>(out_w) - 1.0) : 0.0;
    fy_ = out_h > 1 ? (static_cast<double>(h) - 1.0) / (static_cast<double>(out_h) - 1.0) : 0.0;
  }

  SourcePoint operator()(std::size_t oy, std::size_t ox) const {
    double x = out_w_ > 1 ? static_cast<double>(ox) * fx_ : cx_;
    double y = out_h_ > 1 ? static_cast<double>(oy) * fy_ : cy_;
    x += t_.translation_px[0];
    y += t_.translation_px[1];
    if (t_.rotation_deg != 0.0) {
      const double dx = x - cx_, dy = y - cy_;
      x = cx_ + cos_ * dx + sin_ * dy;
      y = cy_ - sin_ * dx + cos_ * dy;
    }
    if (t_.hflip) x = (static_cast<double>(w_) - 1.0) - x;
    return {x, y};
  }

 private:
  AffineTransform t_;
  std::size_t h_, w_, out_h_, out_w_;
  double cos_ = 1.0, sin_ = 0.0, cx_ = 0.0, cy_ = 0.0, fx_ = 1.0, fy_ = 1.0;
};

inline constexpr double kInsideTolerance = 1e-9;

inline bool inside_source(const SourcePoint& p, std::size_t h, std::size_t w) {
  return p.x >= -kInsideTolerance && p.y >= -kInsideTolerance &&
         p.x <= static_cast<double>(w) - 1.0 + kInsideTolerance &&
         p.y <= static_cast<double>(h) - 1.0 + kInsideTolerance;
}

/// Sparse linear resampling plan: each output pixel is a weighted sum of source pixels.
struct ResamplePlan {
  std::size_t in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  std::vector<std::uint32_t> start;  // out_h*out_w + 1 offsets into src/weight
  std::vector<std::uint32_t> src;
  std::vector<double> weight;
};

inline ResamplePlan build_plan(const AffineTransform& t, std::size_t h, std::size_t w, std::size_t out_h,
                               std::size_t out_w, Sampling sampling) {
  ResamplePlan plan{h, w, out_h, out_w, {}, {}, {}};
  plan.start.reserve(out_h * out_w + 1);
  InverseMap inv(t, h, w, out_h, out_w);
  auto push = [&](long y, long x, double wt) {
    if (wt == 0.0 || x < 0 || y < 0 || x >= static_cast<long>(w) || y >= static_cast<long>(h)) return;
    plan.src.push_back(static_cast<std::uint32_t>(y * static_cast<long>(w) + x));
    plan.weight.push_back(wt);
  };
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      plan.start.push_back(static_cast<std::uint32_t>(plan.src.size()));
      const SourcePoint p = inv(oy, ox);
      if (sampling == Sampling::nearest) {
        push(static_cast<long>(std::floor(p.y + 0.5)), static_cast<long>(std::floor(p.x + 0.5)), 1.0);
        continue;
      }
      const double x0 = std::floor(p.x), y0 = std::floor(p.y);
      const double ax = p.x - x0, ay = p.y - y0;
      const long xi = static_cast<long>(x0), yi = static_cast<long>(y0);
      push(yi, xi, (1.0 - ay) * (1.0 - ax));
      push(yi, xi + 1, (1.0 - ay) * ax);
      push(yi + 1, xi, ay * (1.0 - ax));
      push(yi + 1, xi + 1, ay * ax);
    }
  }
  plan.start.push_back(static_cast<std::uint32_t>(plan.src.size()));
  return plan;
}

/// Applies a plan to every plane of an NCHW tensor; differentiable in the map values.
inline Tensor apply_plan(const Tensor& map, ResamplePlan plan, const char* op) {
  const std::size_t n = map.dim(0), c = map.dim(1);
  const std::size_t in_plane = plan.in_h * plan.in_w, out_plane = plan.out_h * plan.out_w;
  std::vector<double> out(n * c * out_plane, 0.0);
  for (std::size_t k = 0; k < n * c; ++k) {
    const double* src = map.values().data() + k * in_plane;
    double* dst = out.data() + k * out_plane;
    for (std::size_t p = 0; p < out_plane; ++p) {
      const std::uint32_t b = plan.start[p], e = plan.start[p + 1];
      if (b == e) continue;
      double acc = plan.weight[b] * src[plan.src[b]];
      for (std::uint32_t q = b + 1; q < e; ++q) acc += plan.weight[q] * src[plan.src[q]];
      dst[p] = acc;
    }
  }
  Shape shape{n, c, plan.out_h, plan.out_w};
  return Tensor::make_result(std::move(shape), std::move(out), op, {map},
                             [plan = std::move(plan), n, c, in_plane, out_plane](Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t k = 0; k < n * c; ++k) {
                                 double* dst = g.data() + k * in_plane;
                                 const double* gy = self.grad.data() + k * out_plane;
                                 for (std::size_t p = 0; p < out_plane; ++p) {
                                   for (std::uint32_t q = plan.start[p]; q < plan.start[p + 1]; ++q) {
                                     dst[plan.src[q]] += plan.weight[q] * gy[p];
                                   }
                                 }
                               }
                             });
}

}  // namespace detail

/// Inverse-mapped resampling of an NCHW map. Output extent is round(scale * extent);
/// samples outside the source read 0.
inline Tensor warp(const Tensor& map, const AffineTransform& t, Sampling sampling = Sampling::bilinear) {
  require_rank(map, 4, "warp");
  const std::size_t h = map.dim(2), w = map.dim(3);
  if (sampling == Sampling::bilinear && (h < 2 || w < 2)) {
    throw DimensionError("warp: bilinear sampling needs axes 2,3 >= 2, got " + to_string(map.shape()));
  }
  const std::size_t out_h = scaled_extent(t.scale, h), out_w = scaled_extent(t.scale, w);
  return detail::apply_plan(map, detail::build_plan(t, h, w, out_h, out_w, sampling), "warp");
}

/// Bilinear resize to an explicit size with corner-aligned pixel centers.
inline Tensor resize_bilinear(const Tensor& map, std::size_t out_h, std::size_t out_w) {
  require_rank(map, 4, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ParameterError("resize_bilinear: target size must be positive");
  return detail::apply_plan(map, detail::build_plan(AffineTransform{}, map.dim(2), map.dim(3), out_h, out_w,
                                                    Sampling::bilinear),
                            "resize_bilinear");
}

/// [1,1,H',W'] indicator of output pixels whose inverse-mapped sample lies inside the source.
inline Tensor warp_valid_mask(const AffineTransform& t, std::size_t h, std::size_t w) {
  const std::size_t out_h = scaled_extent(t.scale, h), out_w = scaled_extent(t.scale, w);
  detail::InverseMap inv(t, h, w, out_h, out_w);
  std::vector<double> mask(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy)
    for (std::size_t ox = 0; ox < out_w; ++ox) mask[oy * out_w + ox] = detail::inside_source(inv(oy, ox), h, w) ? 1.0 : 0.0;
  return Tensor({1, 1, out_h, out_w}, std::move(mask));
}

/// Which transform families a training run draws from.
struct TransformConfig {
  std::optional<double> rescale = 0.3;        // fixed down-sampling rate
  bool flip = false;                          // horizontal flip with probability 0.5
  std::optional<double> rotation_max_deg;     // uniform in [-r, r]
  std::optional<int> translation_px;          // exactly this far along one of 4 axis directions
  bool identity = false;                      // allow an all-disabled config that yields identity

  bool any_family() const { return rescale || flip || rotation_max_deg || translation_px; }
};

inline std::string describe(const TransformConfig& c) {
  std::string s;
  auto add = [&](const std::string& part) { s += (s.empty() ? "" : "+") + part; };
  if (c.rescale) add("rescale" + std::to_string(*c.rescale).substr(0, 4));
  if (c.flip) add("flip");
  if (c.rotation_max_deg) add("rotation" + std::to_string(static_cast<int>(*c.rotation_max_deg)));
  if (c.translation_px) add("translation" + std::to_string(*c.translation_px));
  return s.empty() ? "identity" : s;
}

namespace detail {
inline double unit_uniform(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }
}  // namespace detail

/// Deterministic draw of one transform from the enabled families.
inline AffineTransform sample_transform(const TransformConfig& config, std::uint64_t seed) {
  if (!config.any_family() && !config.identity) {
    throw ParameterError("sample_transform: no transform family enabled");
  }
  if (config.rescale && !(*config.rescale > 0.0)) throw ParameterError("sample_transform: rescale rate must be > 0");
  std::mt19937_64 rng(seed);
  AffineTransform t;
  if (config.rescale) t.scale = *config.rescale;
  if (config.rotation_max_deg) {
    const double r = *config.rotation_max_deg;
    t.rotation_deg = -r + 2.0 * r * detail::unit_uniform(rng);
  }
  if (config.translation_px) {
    static constexpr int dirs[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    const auto d = rng() % 4;
    t.translation_px = {static_cast<double>(dirs[d][0] * *config.translation_px),
                        static_cast<double>(dirs[d][1] * *config.translation_px)};
  }
  if (config.flip) t.hflip = detail::unit_uniform(rng) < 0.5;
  return t;
}

}  // namespace seam
