#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "seam/affine.hpp"
#include "seam/ops.hpp"
#include "seam/tensor.hpp"

namespace seam {

/// Online hard example mining: fraction of valid pixels kept per image.
struct OhemConfig {
  double keep_fraction = 0.2;

  void validate() const {
    if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
      throw ParameterError("OHEM keep_fraction must lie in (0,1], got " + std::to_string(keep_fraction));
    }
  }
};

struct LossWeights {
  double cls = 1.0;
  double er = 1.0;
  double ecr = 1.0;
};

/// Scalar loss components of one step. `graph` is the differentiable total.
struct LossBundle {
  double l_cls = 0.0;
  double l_er = 0.0;
  double l_ecr = 0.0;
  double total = 0.0;
  Tensor graph;
};

inline double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

/// Multi-label soft margin loss over K = C-1 foreground logits, averaged over
/// classes and batch. Evaluated as l*softplus(-z) + (1-l)*softplus(z).
inline Tensor multilabel_soft_margin(const Tensor& z, const Tensor& label) {
  require_rank(z, 2, "multilabel_soft_margin", "z");
  require_same_shape(z, label, "multilabel_soft_margin");
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (n == 0 || k == 0) throw DimensionError("multilabel_soft_margin: empty logits " + to_string(z.shape()));
  for (double l : label.values())
    if (l != 0.0 && l != 1.0) throw DomainError("multilabel_soft_margin: label entries must be 0 or 1");
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    double row = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double v = z[b * k + c], l = label[b * k + c];
      row += l * softplus(-v) + (1.0 - l) * softplus(v);
    }
    total += row / static_cast<double>(k);
  }
  const double scale_factor = 1.0 / static_cast<double>(n * k);
  Tensor lab = label.detach();
  return Tensor::make_result({1}, {total / static_cast<double>(n)}, "multilabel_soft_margin", {z},
                             [lab, scale_factor](detail::Node& self) {
                               auto& in = *self.inputs[0];
                               auto& g = in.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 g[i] += self.grad[0] * scale_factor * (sigmoid_value(in.value[i]) - lab[i]);
                               }
                             });
}

/// Mean of the two branch classification losses.
inline Tensor classification_loss(const Tensor& z_o, const Tensor& z_t, const Tensor& label) {
  require_same_shape(z_o, z_t, "classification_loss");
  return scale(add(multilabel_soft_margin(z_o, label), multilabel_soft_margin(z_t, label)), 0.5);
}

namespace detail {

inline void check_mask(const Tensor& values, const Tensor& valid, const char* op) {
  require_rank(values, 4, op, "values");
  require_rank(valid, 4, op, "valid");
  if (valid.dim(0) != 1 || valid.dim(1) != 1 || valid.dim(2) != values.dim(2) || valid.dim(3) != values.dim(3)) {
    throw DimensionError(std::string(op) + ": mask " + to_string(valid.shape()) + " does not cover values " +
                         to_string(values.shape()) + " on axes 2,3");
  }
}

// Per-pixel channel means of an [N,C,H,W] tensor, image-major.
inline std::vector<double> channel_means(const Tensor& values) {
  const std::size_t n = values.dim(0), c = values.dim(1), plane = values.dim(2) * values.dim(3);
  std::vector<double> out(n * plane, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) s += values[(b * c + k) * plane + p];
      out[b * plane + p] = s / static_cast<double>(c);
    }
  return out;
}

// Shared reduction: per image, the mean over `selected` pixels (visited in pixel
// order) of the channel-mean loss; then the mean over images.
inline Tensor selected_pixel_mean(const Tensor& values, std::vector<std::vector<std::uint32_t>> selected, const char* op) {
  const std::size_t n = values.dim(0), c = values.dim(1), plane = values.dim(2) * values.dim(3);
  const auto pixel = channel_means(values);
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    if (selected[b].empty()) continue;
    double s = 0.0;
    for (auto p : selected[b]) s += pixel[b * plane + p];
    total += s / static_cast<double>(selected[b].size());
  }
  return Tensor::make_result({1}, {total / static_cast<double>(n)}, op, {values},
                             [selected = std::move(selected), n, c, plane](Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t b = 0; b < n; ++b) {
                                 if (selected[b].empty()) continue;
                                 const double share = self.grad[0] / static_cast<double>(n) /
                                                      static_cast<double>(selected[b].size()) / static_cast<double>(c);
                                 for (auto p : selected[b])
                                   for (std::size_t k = 0; k < c; ++k) g[(b * c + k) * plane + p] += share;
                               }
                             });
}

inline std::vector<std::uint32_t> valid_pixels(const Tensor& valid) {
  std::vector<std::uint32_t> idx;
  for (std::size_t p = 0; p < valid.numel(); ++p)
    if (valid[p] != 0.0) idx.push_back(static_cast<std::uint32_t>(p));
  return idx;
}

}  // namespace detail

/// Mean over valid pixels and all channels (per image, then over images).
/// Images without any valid pixel contribute 0.
inline Tensor masked_mean(const Tensor& values, const Tensor& valid) {
  detail::check_mask(values, valid, "masked_mean");
  std::vector<std::vector<std::uint32_t>> selected(values.dim(0), detail::valid_pixels(valid));
  return detail::selected_pixel_mean(values, std::move(selected), "masked_mean");
}

/// Keeps, per image, the ceil(keep_fraction * valid) valid pixels with the largest
/// channel-mean loss (ties: lower pixel index first) and averages them.
inline Tensor ohem_mean(const Tensor& values, const Tensor& valid, const OhemConfig& ohem) {
  ohem.validate();
  detail::check_mask(values, valid, "ohem_mean");
  const std::size_t n = values.dim(0), plane = values.dim(2) * values.dim(3);
  const auto candidates = detail::valid_pixels(valid);
  const auto keep = static_cast<std::size_t>(
      std::ceil(ohem.keep_fraction * static_cast<double>(candidates.size()) - 1e-9));
  const auto pixel = detail::channel_means(values);
  std::vector<std::vector<std::uint32_t>> selected(n);
  for (std::size_t b = 0; b < n; ++b) {
    auto order = candidates;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t c) { return pixel[b * plane + a] > pixel[b * plane + c]; });
    order.resize(std::min(keep, order.size()));
    std::sort(order.begin(), order.end());
    selected[b] = std::move(order);
  }
  return detail::selected_pixel_mean(values, std::move(selected), "ohem_mean");
}

/// L1 distance between the warped original-branch CAM and the transformed-branch CAM,
/// averaged over valid pixels and channels. `t` must already be expressed on the CAM grid.
inline Tensor er_loss(const Tensor& cam_o, const Tensor& cam_t, const AffineTransform& t, const Tensor& valid) {
  Tensor warped = warp(cam_o, t);
  if (warped.shape() != cam_t.shape()) {
    throw DimensionError("er_loss: warped original CAM " + to_string(warped.shape()) + " vs transformed CAM " +
                         to_string(cam_t.shape()));
  }
  return masked_mean(abs(sub(warped, cam_t)), valid);
}

/// Cross regularization between each branch's PCM output and the other branch's
/// original CAM, with OHEM applied to each of the two terms separately.
inline Tensor ecr_loss(const Tensor& y_o, const Tensor& y_t, const Tensor& camhat_o, const Tensor& camhat_t,
                       const AffineTransform& t, const Tensor& valid, const OhemConfig& ohem) {
  ohem.validate();
  Tensor warped_y = warp(y_o, t);
  Tensor warped_hat = warp(camhat_o, t);
  if (warped_y.shape() != camhat_t.shape() || warped_hat.shape() != y_t.shape()) {
    throw DimensionError("ecr_loss: warped original-branch maps " + to_string(warped_y.shape()) +
                         " do not match transformed-branch maps " + to_string(y_t.shape()));
  }
  Tensor term1 = ohem_mean(abs(sub(warped_y, camhat_t)), valid, ohem);
  Tensor term2 = ohem_mean(abs(sub(warped_hat, y_t)), valid, ohem);
  return add(term1, term2);
}

/// Weighted sum of the three components (all weights 1 reproduces the plain sum).
inline LossBundle total_loss(const Tensor& cls, const Tensor& er, const Tensor& ecr, const LossWeights& w = {}) {
  LossBundle b;
  Tensor wc = w.cls == 1.0 ? cls : scale(cls, w.cls);
  Tensor we = w.er == 1.0 ? er : scale(er, w.er);
  Tensor wr = w.ecr == 1.0 ? ecr : scale(ecr, w.ecr);
  b.graph = add(add(wc, we), wr);
  b.l_cls = cls.item();
  b.l_er = er.item();
  b.l_ecr = ecr.item();
  b.total = b.graph.item();
  return b;
}

}  // namespace seam
