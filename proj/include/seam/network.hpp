#pragma once

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "seam/affine.hpp"
#include "seam/attention.hpp"
#include "seam/cam.hpp"
#include "seam/dataset.hpp"
#include "seam/losses.hpp"
#include "seam/ops.hpp"

namespace seam {

struct ModelDims {
  std::size_t num_classes = 3;  // foreground classes; the head emits one map per class
  std::array<std::size_t, 4> channels{16, 32, 64, 64};
  std::size_t reduce_a = 8;    // shallow PCM features taken from stage 3
  std::size_t reduce_b = 16;   // and from stage 4
  std::size_t embed = 32;      // PCM embedding width

  std::size_t feature_channels() const { return 3 + reduce_a + reduce_b; }
  bool operator==(const ModelDims&) const = default;
};

/// Spatial extent of the CAM grid for an input extent: two ceil-mode 2x2 poolings,
/// so ceil(ceil(x / 2) / 2). Exactly x / 4 when 4 divides x.
inline std::size_t cam_extent(std::size_t image_extent) { return ((image_extent + 1) / 2 + 1) / 2; }

struct NamedParameter {
  std::string name;
  Tensor value;
};

/// Maps [0,1] pixels to roughly zero mean and unit spread, (v - 0.5) / 0.25. Images are
/// constants to the model, so the result carries no graph.
inline Tensor center_pixels(const Tensor& images) {
  std::vector<double> v(images.values().begin(), images.values().end());
  for (double& x : v) x = (x - 0.5) * 4.0;
  return Tensor(images.shape(), std::move(v));
}

/// Outputs of one siamese branch.
struct BranchOutput {
  Tensor cam_raw;   // [N,K,h,w] head output
  Tensor cam_norm;  // [N,K+1,h,w] rectified, background channel first
  Tensor pcm_out;   // [N,K+1,h,w] PCM refinement (undefined unless requested)
  Tensor z;         // [N,K] pooled logits
};

/// Eight 3x3 convolutions in four stages, a bias-free 1x1 classification head,
/// two 1x1 reducers feeding the pixel correlation module, and the PCM embedding.
/// Stages 1 and 2 end in 2x2 average pooling (output stride 4).
class ToyBackbone {
 public:
  explicit ToyBackbone(const ModelDims& dims = {}, std::uint64_t seed = 0) : dims_(dims) {
    if (dims.num_classes < 1 || dims.num_classes > 254) throw ParameterError("model needs 1..254 classes");
    std::size_t in = 3;
    for (std::size_t s = 0; s < 4; ++s) {
      const std::size_t out = dims.channels[s];
      if (out == 0) throw ParameterError("model stage widths must be positive");
      add_conv("stage" + std::to_string(s + 1) + ".conv1", out, in, 3);
      add_conv("stage" + std::to_string(s + 1) + ".conv2", out, out, 3);
      in = out;
    }
    add("head", Tensor({dims.num_classes, dims.channels[3], 1, 1}, true));
    add_conv("reduce_a", dims.reduce_a, dims.channels[2], 1);
    add_conv("reduce_b", dims.reduce_b, dims.channels[3], 1);
    add_conv("pcm.theta", dims.embed, dims.feature_channels(), 1);
    reinitialize(seed);
  }

  /// Centered uniform fan-in init (bound sqrt(6 / fan_in)) for every kernel except
  /// the head, which starts at zero so initial CAMs are neutral.
  void reinitialize(std::uint64_t seed) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto v = params_[i].value.mutable_values();
      if (params_[i].name == "head") {
        std::fill(v.begin(), v.end(), 0.0);
        continue;
      }
      const auto& s = params_[i].value.shape();
      const double bound = std::sqrt(6.0 / static_cast<double>(s[1] * s[2] * s[3]));
      std::mt19937_64 rng(detail::mix_seed(seed, i));
      for (double& x : v) x = bound * (2.0 * detail::unit_uniform(rng) - 1.0);
    }
  }

  /// Copies share parameter storage; clone() does not.
  ToyBackbone clone() const {
    ToyBackbone c = *this;
    for (auto& p : c.params_) {
      const auto v = p.value.values();
      p.value = Tensor(p.value.shape(), std::vector<double>(v.begin(), v.end()), true);
    }
    return c;
  }

  const ModelDims& dims() const { return dims_; }
  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }

  const Tensor& param(const std::string& name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.value;
    throw ParameterError("no parameter named '" + name + "'");
  }

  /// Runs one branch. Gradients from the PCM reach only the reducers and theta:
  /// the CAM entering the PCM and the backbone features feeding the reducers are detached.
  BranchOutput forward(const Tensor& images, bool with_pcm) const {
    require_rank(images, 4, "forward", "images");
    if (images.dim(1) != 3) throw DimensionError("forward: images axis 1 must be 3 channels, got " + to_string(images.shape()));
    if (images.dim(2) < 4 || images.dim(3) < 4) {
      throw DimensionError("forward: spatial axes 2,3 must be >= 4, got " + to_string(images.shape()));
    }
    Tensor x = center_pixels(images);
    const Tensor centered = x;
    std::array<Tensor, 4> stage;
    for (std::size_t s = 0; s < 4; ++s) {
      x = relu(conv2d(x, params_[2 * s].value, 1, 1));
      x = relu(conv2d(x, params_[2 * s + 1].value, 1, 1));
      // Pooling (not strided convs) keeps CAM pixel i centered on image pixel 4i + 1.5,
      // a grid that mirrors onto itself under horizontal flips.
      if (s < 2) x = avg_pool2(x);
      stage[s] = x;
    }
    BranchOutput out;
    out.cam_raw = conv2d(stage[3], params_[kHead].value);
    out.z = global_average_pool(out.cam_raw);
    out.cam_norm = normalize_with_background(rectify_and_scale(out.cam_raw));
    if (with_pcm) {
      const std::size_t h = out.cam_raw.dim(2), w = out.cam_raw.dim(3);
      FeatureAssembly fa;
      fa.image = resize_bilinear(centered, h, w);
      fa.shallow_a = relu(conv2d(stop_gradient(stage[2]), params_[kHead + 1].value));
      fa.shallow_b = relu(conv2d(stop_gradient(stage[3]), params_[kHead + 2].value));
      out.pcm_out = pcm_forward(stop_gradient(out.cam_norm), assemble_features(fa), PcmParams{params_[kHead + 3].value});
    }
    return out;
  }

 private:
  static constexpr std::size_t kHead = 8;

  void add(std::string name, Tensor t) { params_.push_back({std::move(name), std::move(t)}); }
  void add_conv(std::string name, std::size_t out, std::size_t in, std::size_t k) {
    add(std::move(name), Tensor({out, in, k, k}, true));
  }

  ModelDims dims_;
  std::vector<NamedParameter> params_;
};

/// Which loss terms a run optimizes.
enum class TrainMode { baseline, er, seam };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::baseline:
      return "baseline";
    case TrainMode::er:
      return "er";
    default:
      return "seam";
  }
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "baseline") return TrainMode::baseline;
  if (s == "er") return TrainMode::er;
  if (s == "seam") return TrainMode::seam;
  throw ConfigError("unknown mode '" + s + "' (expected baseline, er or seam)");
}

/// Loss-graph settings shared by training and gradient checks.
struct LossConfig {
  TrainMode mode = TrainMode::seam;
  OhemConfig ohem;
  LossWeights weights;
  bool detach_ecr_targets = true;  // original CAMs act as fixed targets inside the cross term
};

/// Stacks samples into an [N,3,H,W] image tensor and an [N,K] label tensor.
inline std::pair<Tensor, Tensor> stack_batch(const std::vector<const ImageSample*>& batch) {
  if (batch.empty()) throw ParameterError("empty batch");
  const Shape& s = batch[0]->image.shape();
  const std::size_t k = batch[0]->label.size();
  std::vector<double> images, labels;
  for (const auto* b : batch) {
    if (b->image.shape() != s) throw DimensionError("batch images disagree in shape: " + to_string(b->image.shape()));
    if (b->label.size() != k) throw DimensionError("batch labels disagree in length");
    images.insert(images.end(), b->image.values().begin(), b->image.values().end());
    for (int l : b->label) labels.push_back(l);
  }
  return {Tensor({batch.size(), s[0], s[1], s[2]}, std::move(images)), Tensor({batch.size(), k}, std::move(labels))};
}

/// Forward pass of both branches and all enabled losses for one batch.
/// `t` is given in image pixels; it is re-expressed on the CAM grid internally.
inline LossBundle siamese_losses(const ToyBackbone& model, const Tensor& images, const Tensor& labels,
                                 const AffineTransform& t, const LossConfig& cfg) {
  const bool pcm = cfg.mode == TrainMode::seam;
  const BranchOutput o = model.forward(images, pcm);
  if (labels.dim(1) != model.dims().num_classes) {
    throw DimensionError("label axis 1 = " + std::to_string(labels.dim(1)) + " but the model has " +
                         std::to_string(model.dims().num_classes) + " classes");
  }
  const Tensor zero = Tensor::scalar(0.0);
  if (cfg.mode == TrainMode::baseline) {
    return total_loss(multilabel_soft_margin(o.z, labels), zero, zero, cfg.weights);
  }
  const BranchOutput tr = model.forward(warp(images, t), pcm);
  const double factor = static_cast<double>(o.cam_raw.dim(3)) / static_cast<double>(images.dim(3));
  const AffineTransform tc = t.at_resolution(factor);
  const Tensor valid = warp_valid_mask(tc, o.cam_raw.dim(2), o.cam_raw.dim(3));
  Tensor cls = classification_loss(o.z, tr.z, labels);
  Tensor er = er_loss(o.cam_norm, tr.cam_norm, tc, valid);
  if (!pcm) return total_loss(cls, er, zero, cfg.weights);
  const Tensor hat_o = cfg.detach_ecr_targets ? stop_gradient(o.cam_norm) : o.cam_norm;
  const Tensor hat_t = cfg.detach_ecr_targets ? stop_gradient(tr.cam_norm) : tr.cam_norm;
  Tensor ecr = ecr_loss(o.pcm_out, tr.pcm_out, hat_o, hat_t, tc, valid, cfg.ohem);
  return total_loss(cls, er, ecr, cfg.weights);
}

/// lr_init * (1 - itr / max_itr)^gamma.
inline double poly_lr(long itr, long max_itr, double lr_init, double gamma) {
  if (max_itr < 1) throw ParameterError("poly_lr: max_itr must be >= 1");
  if (itr < 0 || itr > max_itr) {
    throw ParameterError("poly_lr: itr " + std::to_string(itr) + " outside [0, " + std::to_string(max_itr) + "]");
  }
  return lr_init * std::pow(1.0 - static_cast<double>(itr) / static_cast<double>(max_itr), gamma);
}

/// velocity = momentum * velocity + grad + weight_decay * param; param -= lr * velocity.
inline void sgd_update(Tensor& param, std::span<const double> grad, std::vector<double>& velocity, double lr,
                       double momentum, double weight_decay) {
  if (grad.size() != param.numel() || velocity.size() != param.numel()) {
    throw DimensionError("sgd_update: parameter " + to_string(param.shape()) + " holds " +
                         std::to_string(param.numel()) + " values, grad " + std::to_string(grad.size()) +
                         ", velocity " + std::to_string(velocity.size()));
  }
  auto p = param.mutable_values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * p[i];
    p[i] -= lr * velocity[i];
  }
}

struct SgdConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Momentum state for every parameter of a model.
struct SgdState {
  std::vector<std::vector<double>> velocity;

  static SgdState zeros(const ToyBackbone& m) {
    SgdState s;
    for (const auto& p : m.parameters()) s.velocity.emplace_back(p.value.numel(), 0.0);
    return s;
  }
};

/// Backward through the loss bundle, then one SGD update of every parameter.
inline void apply_gradients(ToyBackbone& model, const LossBundle& loss, SgdState& state, double lr,
                            const SgdConfig& sgd) {
  auto& params = model.parameters();
  for (auto& p : params) p.value.zero_grad();
  backward(loss.graph);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto g = params[i].value.grad();
    sgd_update(params[i].value, g, state.velocity[i], lr, sgd.momentum, sgd.weight_decay);
    params[i].value.zero_grad();
  }
}

/// One training step: both branches, losses, backward and an SGD update.
inline LossBundle siamese_step(ToyBackbone& model, const std::vector<const ImageSample*>& batch,
                               const AffineTransform& t, const LossConfig& cfg, SgdState& state, double lr,
                               const SgdConfig& sgd = {}) {
  auto [images, labels] = stack_batch(batch);
  LossBundle loss = siamese_losses(model, images, labels, t, cfg);
  if (!std::isfinite(loss.total)) {
    throw NumericError("non-finite loss (l_cls=" + std::to_string(loss.l_cls) + ", l_er=" + std::to_string(loss.l_er) +
                       ", l_ecr=" + std::to_string(loss.l_ecr) + ")");
  }
  apply_gradients(model, loss, state, lr, sgd);
  return loss;
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

/// Which map serves as the test-time CAM.
enum class CamSource { trunk, pcm };

/// Foreground CAM of a batch in [0,1] at the CAM grid: either the rectified head
/// output or the foreground channels of the PCM refinement.
inline Tensor inference_cam(const ToyBackbone& model, const Tensor& images, CamSource source) {
  NoGradGuard no_grad;
  const BranchOutput o = model.forward(images, source == CamSource::pcm);
  if (source == CamSource::trunk) return rectify_and_scale(o.cam_raw);
  const std::size_t n = o.pcm_out.dim(0), k1 = o.pcm_out.dim(1), plane = o.pcm_out.dim(2) * o.pcm_out.dim(3);
  std::vector<double> fg(n * (k1 - 1) * plane);
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(o.pcm_out.values().begin() + (b * k1 + 1) * plane, (k1 - 1) * plane, fg.begin() + b * (k1 - 1) * plane);
  return rectify_and_scale(Tensor({n, k1 - 1, o.pcm_out.dim(2), o.pcm_out.dim(3)}, std::move(fg)));
}

/// Per-scale CAMs of a batch (and of its mirror image when requested).
inline std::vector<ScaleCams> multiscale_cams(const ToyBackbone& model, const Tensor& images, CamSource source,
                                              const InferenceConfig& cfg) {
  cfg.validate();
  std::vector<ScaleCams> out;
  AffineTransform flip;
  flip.hflip = true;
  for (double s : cfg.scales) {
    const std::size_t h = scaled_extent(s, images.dim(2)), w = scaled_extent(s, images.dim(3));
    Tensor scaled = (h == images.dim(2) && w == images.dim(3)) ? images : resize_bilinear(images, h, w);
    ScaleCams sc;
    sc.cam = inference_cam(model, scaled, source);
    if (cfg.use_flip) sc.flipped = inference_cam(model, warp(scaled, flip), source);
    out.push_back(std::move(sc));
  }
  return out;
}

/// Fused test-time CAM at the input resolution.
inline Tensor infer_cam(const ToyBackbone& model, const Tensor& images, CamSource source, const InferenceConfig& cfg) {
  const auto per_scale = multiscale_cams(model, images, source, cfg);
  return fuse_multiscale(per_scale, images.dim(2), images.dim(3), cfg.use_flip);
}

}  // namespace seam
