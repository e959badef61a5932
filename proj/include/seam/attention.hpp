#pragma once

#include "seam/ops.hpp"
#include "seam/tensor.hpp"

namespace seam {

/// Embedding used by the pixel correlation module: a 1x1 kernel [Ce, Cf, 1, 1].
struct PcmParams {
  Tensor theta;
};

/// Non-local attention with separate query/key/value embeddings (all 1x1 kernels).
/// theta and phi map features to a shared dimension; g maps CAM channels to CAM channels.
struct ClassicalAttentionParams {
  Tensor theta;
  Tensor phi;
  Tensor g;
};

/// Inputs concatenated (in this order) to form the PCM feature stack.
struct FeatureAssembly {
  Tensor image;      // [N,3,H,W], already at CAM resolution
  Tensor shallow_a;  // [N,Ca,H,W]
  Tensor shallow_b;  // [N,Cb,H,W]
};

inline Tensor assemble_features(const FeatureAssembly& fa) {
  return concat_channels({fa.image, fa.shallow_a, fa.shallow_b});
}

namespace detail {

inline void check_attention_inputs(const Tensor& cam, const Tensor& features, const char* op) {
  require_rank(cam, 4, op, "cam");
  require_rank(features, 4, op, "features");
  if (cam.dim(0) != features.dim(0) || cam.dim(2) != features.dim(2) || cam.dim(3) != features.dim(3)) {
    throw DimensionError(std::string(op) + ": cam " + to_string(cam.shape()) + " and features " +
                         to_string(features.shape()) + " disagree on axes 0,2,3");
  }
}

}  // namespace detail

/// Pixel correlation module.
///
/// Each output pixel is a convex combination of all input CAM pixels, weighted by
/// the ReLU of the cosine similarity of their embeddings, L1-normalized per row.
/// There is no residual path. A pixel whose embedding is exactly zero keeps its own value.
inline Tensor pcm_forward(const Tensor& cam, const Tensor& features, const PcmParams& params,
                          double epsilon = 1e-5) {
  detail::check_attention_inputs(cam, features, "pcm_forward");
  const std::size_t n = cam.dim(0), c = cam.dim(1), h = cam.dim(2), w = cam.dim(3), hw = h * w;
  Tensor embed = l2_normalize_channel(conv2d(features, params.theta), epsilon);
  const std::size_t ce = embed.dim(1);
  Tensor flat = reshape(embed, {n, ce, hw});
  Tensor affinity = relu(bmm(transpose_last2(flat), flat));  // [N,HW,HW]
  Tensor weights = normalize_affinity_rows(affinity);
  Tensor cam_flat = reshape(cam, {n, c, hw});
  Tensor refined = bmm(cam_flat, transpose_last2(weights));  // y[c,i] = sum_j cam[c,j] w[i,j]
  return reshape(refined, {n, c, h, w});
}

/// Row-normalized PCM attention weights [N,HW,HW]; exposed for inspection.
inline Tensor pcm_weights(const Tensor& features, const PcmParams& params, double epsilon = 1e-5) {
  require_rank(features, 4, "pcm_weights", "features");
  const std::size_t n = features.dim(0), hw = features.dim(2) * features.dim(3);
  Tensor embed = l2_normalize_channel(conv2d(features, params.theta), epsilon);
  Tensor flat = reshape(embed, {n, embed.dim(1), hw});
  return normalize_affinity_rows(relu(bmm(transpose_last2(flat), flat)));
}

/// Classical self-attention over the CAM with a residual connection:
/// y_i = sum_j softmax_j(theta(x_i) . phi(x_j)) g(cam)_j + cam_i.
inline Tensor classical_attention_forward(const Tensor& cam, const Tensor& features,
                                          const ClassicalAttentionParams& params) {
  detail::check_attention_inputs(cam, features, "classical_attention_forward");
  if (params.theta.dim(0) != params.phi.dim(0)) {
    throw DimensionError("classical_attention_forward: theta axis 0 (" + std::to_string(params.theta.dim(0)) +
                         ") differs from phi axis 0 (" + std::to_string(params.phi.dim(0)) + ")");
  }
  const std::size_t n = cam.dim(0), c = cam.dim(1), h = cam.dim(2), w = cam.dim(3), hw = h * w;
  const std::size_t ce = params.theta.dim(0);
  Tensor query = reshape(conv2d(features, params.theta), {n, ce, hw});
  Tensor key = reshape(conv2d(features, params.phi), {n, ce, hw});
  Tensor attn = softmax_rows(bmm(transpose_last2(query), key));  // [N,HW,HW]
  Tensor value = reshape(conv2d(cam, params.g), {n, c, hw});
  Tensor mixed = reshape(bmm(value, transpose_last2(attn)), {n, c, h, w});
  return add(mixed, cam);
}

}  // namespace seam
