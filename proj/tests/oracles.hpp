#pragma once

// Independent reference implementations used by the tests. Nothing here calls
// into the autodiff engine except to read forward values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "seam/tensor.hpp"

namespace oracle {

using seam::Shape;
using seam::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = false) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(seam::numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Random values kept at least `margin` away from zero (for kinked ops).
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double margin = 1e-2) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(seam::numel(shape));
  for (double& x : v) x = sign(rng) ? u(rng) : -u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

/// Central differences of a scalar function with respect to every entry of x.
inline std::vector<double> numeric_grad(Tensor& x, const std::function<double()>& f, double h = 1e-5) {
  auto v = x.mutable_values();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const double up = f();
    v[i] = keep - h;
    const double down = f();
    v[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// |a - n| / max(|a|, |n|, 1e-8), worst case. An exactly zero analytic entry whose
/// central difference is below 1e-9 is a structural zero (e.g. a dead ReLU row);
/// its difference is rounding noise and is not scored.
inline double max_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (analytic[i] == 0.0 && std::abs(numeric[i]) < 1e-9) continue;
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

/// Literal nested-loop convolution (cross-correlation, zero padding).
// Corner-aligned bilinear resize of one plane, written out per pixel.
inline std::vector<double> resize_plane(const double* src, std::size_t h, std::size_t w, std::size_t oh, std::size_t ow) {
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      const double sy = oh > 1 ? y * (h - 1.0) / (oh - 1.0) : (h - 1.0) / 2.0;
      const double sx = ow > 1 ? x * (w - 1.0) / (ow - 1.0) : (w - 1.0) / 2.0;
      const std::size_t y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
      const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double ay = sy - y0, ax = sx - x0;
      out[y * ow + x] = (1 - ay) * ((1 - ax) * src[y0 * w + x0] + ax * src[y0 * w + x1]) +
                        ay * ((1 - ax) * src[y1 * w + x0] + ax * src[y1 * w + x1]);
    }
  return out;
}

inline std::vector<double> conv2d_loops(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<double> out(n * co * oh * ow, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double s = 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t dy = 0; dy < kh; ++dy)
              for (std::size_t dx = 0; dx < kw; ++dx) {
                const long iy = static_cast<long>(y * stride + dy) - static_cast<long>(pad);
                const long ix = static_cast<long>(xx * stride + dx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                s += x[((b * ci + c) * h + iy) * w + ix] * k[((o * ci + c) * kh + dy) * kw + dx];
              }
          out[((b * co + o) * oh + y) * ow + xx] = s;
        }
  return out;
}

/// Pixel correlation written directly from its definition: for every pair of
/// pixels, cosine similarity of 1x1-embedded features, ReLU, row L1 normalization,
/// then a weighted sum of CAM values. theta is [Ce,Cf].
inline std::vector<double> pcm_loops(const Tensor& cam, const Tensor& feat, const Tensor& theta, double eps = 1e-5) {
  const std::size_t n = cam.dim(0), c = cam.dim(1), h = cam.dim(2), w = cam.dim(3), hw = h * w;
  const std::size_t cf = feat.dim(1), ce = theta.dim(0);
  std::vector<double> out(cam.numel(), 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    std::vector<std::vector<double>> e(hw, std::vector<double>(ce, 0.0));
    for (std::size_t p = 0; p < hw; ++p) {
      double norm = 0.0;
      for (std::size_t o = 0; o < ce; ++o) {
        double s = 0.0;
        for (std::size_t q = 0; q < cf; ++q) s += theta[o * cf + q] * feat[(b * cf + q) * hw + p];
        e[p][o] = s;
        norm += s * s;
      }
      norm = std::max(std::sqrt(norm), eps);
      for (auto& v : e[p]) v /= norm;
    }
    for (std::size_t i = 0; i < hw; ++i) {
      std::vector<double> a(hw);
      double total = 0.0;
      for (std::size_t j = 0; j < hw; ++j) {
        double dot = 0.0;
        for (std::size_t o = 0; o < ce; ++o) dot += e[i][o] * e[j][o];
        a[j] = std::max(dot, 0.0);
        total += a[j];
      }
      for (std::size_t k = 0; k < c; ++k) {
        double s = 0.0;
        if (total > 0.0) {
          for (std::size_t j = 0; j < hw; ++j) s += a[j] / total * cam[(b * c + k) * hw + j];
        } else {
          s = cam[(b * c + k) * hw + i];
        }
        out[(b * c + k) * hw + i] = s;
      }
    }
  }
  return out;
}

/// Non-local attention from its definition: softmax over j of theta(x_i).phi(x_j),
/// weighted sum of g(cam)_j, plus the residual cam_i. theta/phi are [Ce,Cf], g is [C,C].
inline std::vector<double> classical_loops(const Tensor& cam, const Tensor& feat, const Tensor& theta,
                                           const Tensor& phi, const Tensor& g) {
  const std::size_t n = cam.dim(0), c = cam.dim(1), hw = cam.dim(2) * cam.dim(3);
  const std::size_t cf = feat.dim(1), ce = theta.dim(0);
  std::vector<double> out(cam.numel(), 0.0);
  for (std::size_t b = 0; b < n; ++b) {
    auto embed = [&](const Tensor& m, std::size_t p) {
      std::vector<double> e(ce, 0.0);
      for (std::size_t o = 0; o < ce; ++o)
        for (std::size_t q = 0; q < cf; ++q) e[o] += m[o * cf + q] * feat[(b * cf + q) * hw + p];
      return e;
    };
    for (std::size_t i = 0; i < hw; ++i) {
      const auto qi = embed(theta, i);
      std::vector<double> s(hw);
      double mx = -1e300;
      for (std::size_t j = 0; j < hw; ++j) {
        const auto kj = embed(phi, j);
        double dot = 0.0;
        for (std::size_t o = 0; o < ce; ++o) dot += qi[o] * kj[o];
        s[j] = dot;
        mx = std::max(mx, dot);
      }
      double z = 0.0;
      for (double& v : s) z += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < c; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) {
          double gv = 0.0;
          for (std::size_t q = 0; q < c; ++q) gv += g[k * c + q] * cam[(b * c + q) * hw + j];
          acc += s[j] / z * gv;
        }
        out[(b * c + k) * hw + i] = acc + cam[(b * c + k) * hw + i];
      }
    }
  }
  return out;
}

}  // namespace oracle
