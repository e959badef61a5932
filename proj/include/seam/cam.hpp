#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seam/affine.hpp"
#include "seam/ops.hpp"
#include "seam/tensor.hpp"

namespace seam {

/// Per-pixel class ids, 0 = background, foreground class k stored as k + 1.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> ids;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), ids(h * w, fill) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return ids[y * width + x]; }
  bool operator==(const Mask&) const = default;
};

/// Test-time CAM settings.
struct InferenceConfig {
  double alpha = 0.25;  // hard background score used for pseudo labels
  std::vector<double> scales{0.5, 1.0, 1.5, 2.0};
  bool use_flip = true;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ParameterError("inference alpha must lie in (0,1)");
    if (scales.empty()) throw ParameterError("inference scales must be non-empty");
    for (double s : scales)
      if (!(s > 0.0)) throw ParameterError("inference scales must be > 0");
  }
};

/// relu(v) / max(spatial max of relu(v), epsilon), per image and class. Differentiable.
inline Tensor rectify_and_scale(const Tensor& raw, double epsilon = 1e-5) {
  require_rank(raw, 4, "rectify_and_scale");
  const std::size_t planes = raw.dim(0) * raw.dim(1), plane = raw.dim(2) * raw.dim(3);
  std::vector<double> out(raw.numel());
  std::vector<double> denom(planes);
  std::vector<std::size_t> argmax(planes, plane);  // == plane when the max is clamped by epsilon
  for (std::size_t k = 0; k < planes; ++k) {
    const double* src = raw.values().data() + k * plane;
    double best = 0.0;
    std::size_t best_at = plane;
    for (std::size_t p = 0; p < plane; ++p) {
      if (src[p] > best) {
        best = src[p];
        best_at = p;
      }
    }
    const double d = std::max(best, epsilon);
    if (best > epsilon) argmax[k] = best_at;
    denom[k] = d;
    for (std::size_t p = 0; p < plane; ++p) out[k * plane + p] = src[p] > 0.0 ? src[p] / d : 0.0;
  }
  return Tensor::make_result(raw.shape(), std::move(out), "rectify_and_scale", {raw},
                             [denom, argmax, planes, plane](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               auto& g = in.grad_buffer();
                               for (std::size_t k = 0; k < planes; ++k) {
                                 const double d = denom[k];
                                 const double* gy = self.grad.data() + k * plane;
                                 const double* y = self.value.data() + k * plane;
                                 const double* x = in.value.data() + k * plane;
                                 double* gx = g.data() + k * plane;
                                 for (std::size_t p = 0; p < plane; ++p)
                                   if (x[p] > 0.0) gx[p] += gy[p] / d;
                                 if (argmax[k] < plane) {
                                   double dot = 0.0;
                                   for (std::size_t p = 0; p < plane; ++p) dot += gy[p] * y[p];
                                   gx[argmax[k]] -= dot / d;
                                 }
                               }
                             });
}

/// [N,K,H,W] foreground scores in [0,1] -> [N,K+1,H,W] with background at channel 0.
///
/// Per pixel only the largest foreground score survives (ties keep the lowest
/// class index) and the background channel is 1 minus that score.
inline Tensor normalize_with_background(const Tensor& cam) {
  require_rank(cam, 4, "normalize_with_background");
  const std::size_t n = cam.dim(0), k = cam.dim(1), h = cam.dim(2), w = cam.dim(3), plane = h * w;
  if (k == 0) throw DimensionError("normalize_with_background: axis 1 must hold at least one class");
  std::vector<double> out(n * (k + 1) * plane, 0.0);
  std::vector<std::uint32_t> winner(n * plane);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      std::size_t best = 0;
      double best_v = cam[(b * k) * plane + p];
      for (std::size_t c = 1; c < k; ++c) {
        const double v = cam[(b * k + c) * plane + p];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      winner[b * plane + p] = static_cast<std::uint32_t>(best);
      out[(b * (k + 1)) * plane + p] = 1.0 - best_v;
      out[(b * (k + 1) + best + 1) * plane + p] = best_v;
    }
  }
  return Tensor::make_result({n, k + 1, h, w}, std::move(out), "normalize_with_background", {cam},
                             [winner, n, k, plane](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t b = 0; b < n; ++b) {
                                 for (std::size_t p = 0; p < plane; ++p) {
                                   const std::size_t c = winner[b * plane + p];
                                   g[(b * k + c) * plane + p] += self.grad[(b * (k + 1) + c + 1) * plane + p] -
                                                                 self.grad[(b * (k + 1)) * plane + p];
                                 }
                               }
                             });
}

/// Thresholded argmax labels. labels[n] is the multi-hot image label of image n;
/// absent classes never win. Ties go to background, then to the lowest class.
inline std::vector<Mask> pseudo_label(const Tensor& cam, std::span<const std::vector<int>> labels, double alpha) {
  require_rank(cam, 4, "pseudo_label");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ParameterError("pseudo_label: alpha must lie in (0,1)");
  const std::size_t n = cam.dim(0), k = cam.dim(1), h = cam.dim(2), w = cam.dim(3), plane = h * w;
  if (labels.size() != n) {
    throw DimensionError("pseudo_label: " + std::to_string(labels.size()) + " label vectors for batch axis 0 = " +
                         std::to_string(n));
  }
  std::vector<Mask> masks;
  masks.reserve(n);
  for (std::size_t b = 0; b < n; ++b) {
    if (labels[b].size() != k) {
      throw DimensionError("pseudo_label: label " + std::to_string(b) + " has " + std::to_string(labels[b].size()) +
                           " entries for cam axis 1 = " + std::to_string(k));
    }
    Mask m(h, w);
    for (std::size_t p = 0; p < plane; ++p) {
      double best = alpha;
      std::uint8_t id = 0;
      for (std::size_t c = 0; c < k; ++c) {
        if (!labels[b][c]) continue;
        const double v = cam[(b * k + c) * plane + p];
        if (v > best) {
          best = v;
          id = static_cast<std::uint8_t>(c + 1);
        }
      }
      m.ids[p] = id;
    }
    masks.push_back(std::move(m));
  }
  return masks;
}

/// CAMs computed at one test scale. `flipped` (optional) is the CAM of the
/// horizontally flipped input, still in the flipped frame.
struct ScaleCams {
  Tensor cam;
  Tensor flipped;
};

/// Resizes every per-scale CAM (and its un-flipped counterpart) to the target size,
/// averages them and re-normalizes each class plane to peak 1. The result does
/// not depend on the order of `per_scale`.
inline Tensor fuse_multiscale(std::span<const ScaleCams> per_scale, std::size_t target_h, std::size_t target_w,
                              bool use_flip, double epsilon = 1e-5) {
  if (per_scale.empty()) throw ParameterError("fuse_multiscale: no per-scale CAMs given");
  NoGradGuard no_grad;
  std::vector<Tensor> parts;
  for (const auto& s : per_scale) {
    parts.push_back(resize_bilinear(s.cam, target_h, target_w));
    if (use_flip) {
      if (!s.flipped.defined()) throw ParameterError("fuse_multiscale: use_flip set but a flipped CAM is missing");
      AffineTransform flip;
      flip.hflip = true;
      parts.push_back(resize_bilinear(warp(s.flipped, flip), target_h, target_w));
    }
  }
  const Shape& shape = parts[0].shape();
  for (const auto& p : parts) {
    if (p.dim(0) != shape[0] || p.dim(1) != shape[1]) {
      throw DimensionError("fuse_multiscale: stacks disagree on axes 0,1: " + to_string(p.shape()) + " vs " +
                           to_string(shape));
    }
  }
  std::vector<double> mean(parts[0].numel());
  std::vector<double> contrib(parts.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    for (std::size_t q = 0; q < parts.size(); ++q) contrib[q] = parts[q][i];
    std::sort(contrib.begin(), contrib.end());
    double s = 0.0;
    for (double v : contrib) s += v;
    mean[i] = s / static_cast<double>(parts.size());
  }
  return rectify_and_scale(Tensor(shape, std::move(mean)), epsilon);
}

}  // namespace seam
