#pragma once

// Finite-difference verification of every differentiable op and of the full
// two-branch training loss.

#include <chrono>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "seam/network.hpp"

namespace seam {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::size_t structural_zeros = 0;  // analytic exactly 0, central difference below 1e-9
  std::size_t kinks = 0;             // one-sided differences disagree: a non-smooth point was straddled
  double seconds = 0.0;

  bool passed() const { return checked > 0 && max_rel_error < tolerance; }
};

struct GradcheckOptions {
  double step = 1e-5;
  std::uint64_t seed = 7;
  std::size_t samples_per_parameter = 24;  // entries probed per parameter in the end-to-end check
  std::size_t image_size = 16;             // side of the two end-to-end images
};

namespace detail {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad = true) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = lo + (hi - lo) * unit_uniform(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Entries at least `margin` away from zero, random sign.
inline Tensor random_signed(Shape shape, std::mt19937_64& rng, double margin = 0.05) {
  std::vector<double> v(numel(shape));
  for (double& x : v) {
    const double mag = margin + (1.0 - margin) * unit_uniform(rng);
    x = (rng() & 1) ? mag : -mag;
  }
  return Tensor(std::move(shape), std::move(v), true);
}

/// Compares the analytic gradient of `loss` with central differences at the chosen
/// entries of each input. `entries[i]` empty means every entry of inputs[i].
/// Detached tensors are held at their unperturbed values, which is what the
/// stop-gradient semantics of the analytic gradient mean.
inline GradcheckResult compare(const std::string& name, std::vector<Tensor> inputs,
                               const std::function<Tensor()>& loss, double tolerance, double h,
                               std::vector<std::vector<std::size_t>> entries = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  GradcheckResult r;
  r.name = name;
  r.tolerance = tolerance;
  entries.resize(inputs.size());
  for (auto& x : inputs) x.zero_grad();
  FrozenStopGradients frozen;
  {
    Tensor l = loss();
    backward(l);
  }
  NoGradGuard no_grad;
  auto eval = [&] {
    frozen.replay();
    return loss().item();
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& x = inputs[k];
    const std::vector<double> analytic = x.has_grad() ? x.grad() : std::vector<double>(x.numel(), 0.0);
    std::vector<std::size_t> idx = entries[k];
    if (idx.empty()) {
      idx.resize(x.numel());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    }
    auto v = x.mutable_values();
    for (std::size_t i : idx) {
      const double keep = v[i];
      const double f0 = eval();
      // A kink inside [x-h, x+h] moves the central difference by up to half the
      // one-sided gap, so the gap has to stay under the tolerance to be scored.
      // A suspect entry gets one retry at h/10 before it is skipped. 1e-13/step covers
      // the rounding noise of a one-sided difference.
      double numeric = 0.0;
      bool smooth = false;
      for (double step : {h, h / 10.0}) {
        v[i] = keep + step;
        const double up = eval();
        v[i] = keep - step;
        const double down = eval();
        v[i] = keep;
        numeric = (up - down) / (2.0 * step);
        const double fwd = (up - f0) / step, bwd = (f0 - down) / step;
        if (std::abs(fwd - bwd) <= tolerance * std::max(std::abs(fwd), std::abs(bwd)) + 1e-13 / step) {
          smooth = true;
          break;
        }
      }
      if (!smooth) {
        ++r.kinks;
        continue;
      }
      if (analytic[i] == 0.0 && std::abs(numeric) < 1e-9) {
        ++r.structural_zeros;
        continue;
      }
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      r.max_rel_error = std::max(r.max_rel_error, std::abs(analytic[i] - numeric) / denom);
      ++r.checked;
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Scalar probe of a tensor-valued op: sum(out * weights) with fixed random weights.
inline Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

}  // namespace detail

/// One check per differentiable op on small random inputs (tolerance 1e-4).
inline std::vector<GradcheckResult> gradcheck_ops(const GradcheckOptions& opt = {}) {
  using detail::compare;
  using detail::probe;
  using detail::random_signed;
  using detail::random_tensor;
  std::mt19937_64 rng(opt.seed);
  const double tol = 1e-4, h = opt.step;
  std::vector<GradcheckResult> out;
  // Probe weights depend only on the shape, so every evaluation of a loss sees the same ones.
  auto weights = [](const Shape& s) {
    std::mt19937_64 r(numel(s) * 7919 + s.size());
    return random_tensor(s, r, -1.0, 1.0, false);
  };

  {
    Tensor a = random_tensor({2, 3, 4}, rng, -1, 1), b = random_tensor({2, 3, 4}, rng, -1, 1), w = weights({2, 3, 4});
    out.push_back(compare("add", {a, b}, [&] { return probe(add(a, b), w); }, tol, h));
    out.push_back(compare("sub", {a, b}, [&] { return probe(sub(a, b), w); }, tol, h));
    out.push_back(compare("mul", {a, b}, [&] { return probe(mul(a, b), w); }, tol, h));
    out.push_back(compare("scale", {a}, [&] { return probe(scale(a, -1.7), w); }, tol, h));
    out.push_back(compare("add_scalar", {a}, [&] { return probe(add_scalar(a, 0.3), w); }, tol, h));
    out.push_back(compare("sigmoid", {a}, [&] { return probe(sigmoid(a), w); }, tol, h));
    out.push_back(compare("sum", {a}, [&] { return mul(sum(a), sum(a)); }, tol, h));
    out.push_back(compare("mean", {a}, [&] { return mul(mean(a), sum(b)); }, tol, h));
    out.push_back(compare("max", {a}, [&] { return mul(max(a), add_scalar(max(a), 1.0)); }, tol, h));
    out.push_back(compare("reshape", {a}, [&] { return probe(reshape(a, {4, 6}), weights({4, 6})); }, tol, h));
  }
  {
    Tensor s = random_signed({3, 5}, rng), w = weights({3, 5});
    out.push_back(compare("relu", {s}, [&] { return probe(relu(s), w); }, tol, h));
    out.push_back(compare("abs", {s}, [&] { return probe(abs(s), w); }, tol, h));
    Tensor p = random_tensor({3, 5}, rng, 0.2, 2.0);
    out.push_back(compare("log", {p}, [&] { return probe(log(p), w); }, tol, h));
  }
  {
    Tensor a = random_tensor({2, 2, 3, 3}, rng, -1, 1), b = random_tensor({2, 3, 3, 3}, rng, -1, 1);
    Tensor w = weights({2, 5, 3, 3});
    out.push_back(compare("concat_channels", {a, b}, [&] { return probe(concat_channels({a, b}), w); }, tol, h));
    out.push_back(compare("global_average_pool", {a}, [&] { return probe(global_average_pool(a), weights({2, 2})); }, tol, h));
    Tensor wn = weights({2, 2, 3, 3});
    out.push_back(compare("l2_normalize_channel", {a}, [&] { return probe(l2_normalize_channel(a), wn); }, tol, h));
  }
  {
    Tensor x = random_tensor({2, 3, 6, 5}, rng, -1, 1), k = random_tensor({4, 3, 3, 3}, rng, -0.5, 0.5);
    Tensor w1 = weights({2, 4, 6, 5}), w2 = weights({2, 4, 3, 3});
    out.push_back(compare("conv2d_3x3_pad1", {x, k}, [&] { return probe(conv2d(x, k, 1, 1), w1); }, tol, h));
    out.push_back(compare("conv2d_3x3_stride2", {x, k}, [&] { return probe(conv2d(x, k, 2, 1), w2); }, tol, h));
    out.push_back(compare("avg_pool2_odd", {x}, [&] { return probe(avg_pool2(x), weights({2, 3, 3, 3})); }, tol, h));
    Tensor k1 = random_tensor({4, 3, 1, 1}, rng, -0.5, 0.5);
    out.push_back(compare("conv2d_1x1", {x, k1}, [&] { return probe(conv2d(x, k1), w1); }, tol, h));
  }
  {
    Tensor a = random_tensor({2, 3, 4}, rng, -1, 1), b = random_tensor({2, 4, 5}, rng, -1, 1);
    out.push_back(compare("transpose_last2", {a}, [&] { return probe(transpose_last2(a), weights({2, 4, 3})); }, tol, h));
    out.push_back(compare("bmm", {a, b}, [&] { return probe(bmm(a, b), weights({2, 3, 5})); }, tol, h));
    out.push_back(compare("softmax_rows", {a}, [&] { return probe(softmax_rows(a), weights({2, 3, 4})); }, tol, h));
    Tensor pos = random_tensor({2, 4, 4}, rng, 0.1, 1.0);
    out.push_back(compare("normalize_affinity_rows", {pos}, [&] { return probe(normalize_affinity_rows(pos), weights({2, 4, 4})); }, tol, h));
  }
  {
    Tensor raw = random_tensor({2, 3, 4, 4}, rng, -1, 1);
    out.push_back(compare("rectify_and_scale", {raw}, [&] { return probe(rectify_and_scale(raw), weights({2, 3, 4, 4})); }, tol, h));
    Tensor cam = random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0);
    out.push_back(compare("normalize_with_background", {cam}, [&] { return probe(normalize_with_background(cam), weights({2, 4, 4, 4})); }, tol, h));
  }
  {
    Tensor m = random_tensor({2, 2, 8, 8}, rng, -1, 1);
    AffineTransform down;
    down.scale = 0.5;
    out.push_back(compare("warp_rescale", {m}, [&] { return probe(warp(m, down), weights({2, 2, 4, 4})); }, tol, h));
    AffineTransform mix;
    mix.hflip = true;
    mix.rotation_deg = 17.0;
    mix.translation_px = {1.0, -2.0};
    out.push_back(compare("warp_flip_rotate_translate", {m}, [&] { return probe(warp(m, mix), weights({2, 2, 8, 8})); }, tol, h));
    out.push_back(compare("resize_bilinear", {m}, [&] { return probe(resize_bilinear(m, 5, 11), weights({2, 2, 5, 11})); }, tol, h));
  }
  {
    Tensor cam = random_tensor({2, 3, 3, 4}, rng, 0.0, 1.0), feat = random_tensor({2, 5, 3, 4}, rng, -1, 1);
    Tensor theta = random_tensor({6, 5, 1, 1}, rng, -1, 1);
    Tensor w = weights({2, 3, 3, 4});
    out.push_back(compare("pcm_forward", {cam, feat, theta}, [&] { return probe(pcm_forward(cam, feat, PcmParams{theta}), w); }, tol, h));
    Tensor phi = random_tensor({6, 5, 1, 1}, rng, -1, 1), g = random_tensor({3, 3, 1, 1}, rng, -1, 1);
    out.push_back(compare("classical_attention", {cam, feat, theta, phi, g}, [&] {
      return probe(classical_attention_forward(cam, feat, ClassicalAttentionParams{theta, phi, g}), w);
    }, tol, h));
  }
  {
    Tensor z = random_tensor({3, 4}, rng, -2, 2);
    const Tensor label({3, 4}, {1, 0, 0, 1, 0, 1, 0, 0, 1, 1, 1, 0});
    out.push_back(compare("multilabel_soft_margin", {z}, [&] { return multilabel_soft_margin(z, label); }, tol, h));
    Tensor z2 = random_tensor({3, 4}, rng, -2, 2);
    out.push_back(compare("classification_loss", {z, z2}, [&] { return classification_loss(z, z2, label); }, tol, h));
  }
  {
    Tensor v = random_tensor({2, 3, 5, 5}, rng, 0.0, 1.0);
    std::vector<double> mask(25);
    for (std::size_t i = 0; i < 25; ++i) mask[i] = (i % 3 == 0) ? 0.0 : 1.0;
    const Tensor valid({1, 1, 5, 5}, mask);
    out.push_back(compare("masked_mean", {v}, [&] { return masked_mean(v, valid); }, tol, h));
    out.push_back(compare("ohem_mean", {v}, [&] { return ohem_mean(v, valid, OhemConfig{0.3}); }, tol, h));
  }
  {
    Tensor co = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0), ct = random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0);
    Tensor yo = random_tensor({2, 3, 8, 8}, rng, 0.0, 1.0), yt = random_tensor({2, 3, 4, 4}, rng, 0.0, 1.0);
    AffineTransform t;
    t.scale = 0.5;
    t.rotation_deg = 9.0;
    const Tensor valid = warp_valid_mask(t, 8, 8);
    out.push_back(compare("er_loss", {co, ct}, [&] { return er_loss(co, ct, t, valid); }, tol, h));
    out.push_back(compare("ecr_loss", {yo, yt, co, ct}, [&] { return ecr_loss(yo, yt, co, ct, t, valid, OhemConfig{0.2}); }, tol, h));
  }
  return out;
}

/// Full training loss (both branches, PCM, ER and ECR) on a 2-image square batch,
/// checked against central differences at sampled entries of every parameter
/// (tolerance 1e-3). The head is randomized so CAMs are not stuck at the ReLU kink.
inline GradcheckResult gradcheck_end_to_end(const GradcheckOptions& opt = {}, TrainMode mode = TrainMode::seam,
                                            bool detach_ecr_targets = true) {
  std::mt19937_64 rng(opt.seed ^ 0xE2EULL);
  ToyBackbone model(ModelDims{}, opt.seed);
  for (auto& p : model.parameters()) {
    if (p.name == "head") {
      for (double& v : p.value.mutable_values()) v = 0.3 * (2.0 * detail::unit_uniform(rng) - 1.0);
    }
  }
  // At 16 px the transformed CAM is 2x2, so OHEM keeps only each map's peak, where the
  // normalized CAM has zero slope. Paths through undetached targets need >= 32 px to carry gradient.
  const std::size_t s = opt.image_size;
  if (s < 8) throw ParameterError("gradcheck_end_to_end: image_size must be >= 8");
  std::vector<double> img(2 * 3 * s * s);
  for (double& v : img) v = detail::unit_uniform(rng);
  const Tensor images({2, 3, s, s}, img);
  const Tensor labels({2, 3}, {1, 0, 1, 0, 1, 1});
  AffineTransform t;
  t.scale = 0.5;
  t.hflip = true;
  LossConfig cfg;
  cfg.mode = mode;
  cfg.detach_ecr_targets = detach_ecr_targets;
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::size_t>> entries;
  for (auto& p : model.parameters()) {
    inputs.push_back(p.value);
    std::vector<std::size_t> idx;
    const std::size_t n = p.value.numel();
    if (n <= opt.samples_per_parameter) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      for (std::size_t i = 0; i < opt.samples_per_parameter; ++i) idx.push_back(rng() % n);
    }
    entries.push_back(std::move(idx));
  }
  return detail::compare("siamese_loss_" + to_string(mode), inputs,
                         [&] { return siamese_losses(model, images, labels, t, cfg).graph; }, 1e-3, opt.step, entries);
}

}  // namespace seam
