#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "seam/tensor.hpp"

namespace seam {

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

// y = f(x) elementwise; dfdx(x, y) gives the local derivative.
template <class F, class D>
Tensor unary(const Tensor& x, const char* op, F f, D dfdx) {
  std::vector<double> out(x.numel());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), op, {x}, [dfdx](Node& self) {
    Node& in = *self.inputs[0];
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * dfdx(in.value[i], self.value[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Broadcasting is limited to identical shapes or a
// tensor against a plain scalar.
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), "add", {a, b}, [](detail::Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      auto& g = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), "sub", {a, b}, [](detail::Node& self) {
    for (std::size_t side = 0; side < 2; ++side) {
      auto& in = *self.inputs[side];
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      const double sign = side == 0 ? 1.0 : -1.0;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor ca = a, cb = b;
  return Tensor::make_result(a.shape(), std::move(out), "mul", {a, b}, [ca, cb](detail::Node& self) {
    auto route = [&](const Tensor& target, const Tensor& other) {
      auto& node = target.node();
      if (!node.requires_grad) return;
      auto& g = node.grad_buffer();
      auto ov = other.values();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ov[i];
    };
    route(ca, cb);
    route(cb, ca);
  });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary(x, "scale", [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary(x, "add_scalar", [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

/// Subgradient 0 at the kink.
inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid_value(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(x, "sigmoid", sigmoid_value, [](double, double y) { return y * (1.0 - y); });
}

inline Tensor log(const Tensor& x) {
  for (std::size_t i = 0; i < x.numel(); ++i) {
    if (!(x[i] > 0.0)) {
      throw DomainError("log: non-positive input " + std::to_string(x[i]) + " at flat index " + std::to_string(i));
    }
  }
  return detail::unary(x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Subgradient 0 at the kink.
inline Tensor abs(const Tensor& x) {
  return detail::unary(
      x, "abs", [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return Tensor::make_result({1}, {s}, "sum", {x}, [](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean of an empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  return Tensor::make_result({1}, {s / n}, "mean", {x}, [n](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (double& v : g) v += self.grad[0] / n;
  });
}

/// Global maximum. The gradient goes to the first maximal element only.
inline Tensor max(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("max of an empty tensor");
  std::size_t at = 0;
  for (std::size_t i = 1; i < x.numel(); ++i)
    if (x[i] > x[at]) at = i;
  return Tensor::make_result({1}, {x[at]}, "max", {x}, [at](detail::Node& self) {
    self.inputs[0]->grad_buffer()[at] += self.grad[0];
  });
}

namespace detail {

/// Values produced by stop_gradient during one evaluation, so later evaluations can
/// reuse them. Finite differences of a stop-gradient graph are only meaningful when
/// the detached tensors stay constant while a parameter is perturbed.
struct DetachTape {
  std::vector<Tensor> values;
  std::size_t cursor = 0;
  bool replaying = false;
};

inline thread_local DetachTape* active_detach_tape = nullptr;

}  // namespace detail

/// Forward identity; the result is a fresh leaf so no gradient reaches x.
inline Tensor stop_gradient(const Tensor& x) {
  detail::DetachTape* tape = detail::active_detach_tape;
  if (!tape) return x.detach();
  if (!tape->replaying) {
    tape->values.push_back(x.detach());
    return tape->values.back();
  }
  if (tape->cursor >= tape->values.size() || tape->values[tape->cursor].shape() != x.shape()) {
    throw GraphError("stop_gradient: replayed graph differs from the recorded one");
  }
  return tape->values[tape->cursor++];
}

/// While alive, the first evaluation records every stop_gradient output; after
/// replay(), each evaluation receives the recorded constants in the same order.
class FrozenStopGradients {
 public:
  FrozenStopGradients() : previous_(detail::active_detach_tape) { detail::active_detach_tape = &tape_; }
  ~FrozenStopGradients() { detail::active_detach_tape = previous_; }
  FrozenStopGradients(const FrozenStopGradients&) = delete;
  FrozenStopGradients& operator=(const FrozenStopGradients&) = delete;

  void replay() {
    tape_.replaying = true;
    tape_.cursor = 0;
  }
  std::size_t recorded() const { return tape_.values.size(); }

 private:
  detail::DetachTape tape_;
  detail::DetachTape* previous_;
};

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (seam::numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), "reshape", {x}, [](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Channel / spatial structure on NCHW tensors.
// ---------------------------------------------------------------------------

/// Concatenates NCHW tensors along channels; zero-channel parts are allowed.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3);
  std::size_t c_total = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& p = parts[k];
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) {
      throw DimensionError("concat_channels: part " + std::to_string(k) + " has shape " + to_string(p.shape()) +
                           ", expected N=" + std::to_string(n) + " H=" + std::to_string(h) + " W=" + std::to_string(w) +
                           " on axes 0,2,3");
    }
    c_total += p.dim(1);
  }
  const std::size_t plane = h * w;
  std::vector<double> out(n * c_total * plane);
  std::vector<std::size_t> offsets;
  std::size_t c_off = 0;
  for (const auto& p : parts) {
    offsets.push_back(c_off);
    const std::size_t c = p.dim(1);
    for (std::size_t b = 0; b < n; ++b) {
      std::copy_n(p.values().begin() + b * c * plane, c * plane, out.begin() + (b * c_total + c_off) * plane);
    }
    c_off += c;
  }
  std::vector<Tensor> kept = parts;
  return Tensor::make_result({n, c_total, h, w}, std::move(out), "concat_channels", parts,
                             [kept, offsets, n, c_total, plane](detail::Node& self) {
                               for (std::size_t k = 0; k < kept.size(); ++k) {
                                 auto& node = kept[k].node();
                                 if (!node.requires_grad) continue;
                                 const std::size_t c = kept[k].dim(1);
                                 auto& g = node.grad_buffer();
                                 for (std::size_t b = 0; b < n; ++b) {
                                   const double* src = self.grad.data() + (b * c_total + offsets[k]) * plane;
                                   double* dst = g.data() + b * c * plane;
                                   for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                                 }
                               }
                             });
}

/// [N,C,H,W] -> [N,C], mean over the spatial plane.
inline Tensor global_average_pool(const Tensor& x) {
  require_rank(x, 4, "global_average_pool");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (plane == 0) throw DimensionError("global_average_pool: empty spatial plane " + to_string(x.shape()));
  std::vector<double> out(n * c);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < plane; ++p) s += x[i * plane + p];
    out[i] = s / static_cast<double>(plane);
  }
  return Tensor::make_result({n, c}, std::move(out), "global_average_pool", {x}, [plane](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double gi = self.grad[i] * inv;
      for (std::size_t p = 0; p < plane; ++p) g[i * plane + p] += gi;
    }
  });
}

/// 2x2 average pooling with stride 2, ceil mode: [N,C,H,W] -> [N,C,ceil(H/2),ceil(W/2)].
/// A window hanging over an odd border averages only the pixels it covers. On even
/// sizes the output grid is symmetric, so pooling commutes with a horizontal flip.
inline Tensor avg_pool2(const Tensor& x) {
  require_rank(x, 4, "avg_pool2");
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == 0 || w == 0) throw DimensionError("avg_pool2: empty spatial plane " + to_string(x.shape()));
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  std::vector<double> out(planes * oh * ow);
  for (std::size_t k = 0; k < planes; ++k) {
    const double* src = x.values().data() + k * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t y1 = std::min(2 * oy + 2, h), x1 = std::min(2 * ox + 2, w);
        double s = 0.0;
        for (std::size_t y = 2 * oy; y < y1; ++y)
          for (std::size_t xx = 2 * ox; xx < x1; ++xx) s += src[y * w + xx];
        out[(k * oh + oy) * ow + ox] = s / static_cast<double>((y1 - 2 * oy) * (x1 - 2 * ox));
      }
  }
  return Tensor::make_result({x.dim(0), x.dim(1), oh, ow}, std::move(out), "avg_pool2", {x},
                             [planes, h, w, oh, ow](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t k = 0; k < planes; ++k)
                                 for (std::size_t oy = 0; oy < oh; ++oy)
                                   for (std::size_t ox = 0; ox < ow; ++ox) {
                                     const std::size_t y1 = std::min(2 * oy + 2, h), x1 = std::min(2 * ox + 2, w);
                                     const double gi = self.grad[(k * oh + oy) * ow + ox] /
                                                       static_cast<double>((y1 - 2 * oy) * (x1 - 2 * ox));
                                     for (std::size_t y = 2 * oy; y < y1; ++y)
                                       for (std::size_t xx = 2 * ox; xx < x1; ++xx) g[(k * h + y) * w + xx] += gi;
                                   }
                             });
}

/// Divides each pixel's channel vector by max(||v||_2, epsilon).
inline Tensor l2_normalize_channel(const Tensor& x, double epsilon = 1e-5) {
  require_rank(x, 4, "l2_normalize_channel");
  if (!(epsilon > 0.0)) throw ParameterError("l2_normalize_channel: epsilon must be > 0");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  std::vector<double> out(x.numel());
  std::vector<double> denom(n * plane);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      double ss = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double v = x[(b * c + k) * plane + p];
        ss += v * v;
      }
      const double d = std::max(std::sqrt(ss), epsilon);
      denom[b * plane + p] = d;
      for (std::size_t k = 0; k < c; ++k) out[(b * c + k) * plane + p] = x[(b * c + k) * plane + p] / d;
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), "l2_normalize_channel", {x},
                             [denom, epsilon, n, c, plane](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t b = 0; b < n; ++b) {
                                 for (std::size_t p = 0; p < plane; ++p) {
                                   const double d = denom[b * plane + p];
                                   const bool on_sphere = d > epsilon;
                                   double dot = 0.0;
                                   if (on_sphere) {
                                     for (std::size_t k = 0; k < c; ++k) {
                                       const std::size_t i = (b * c + k) * plane + p;
                                       dot += self.value[i] * self.grad[i];
                                     }
                                   }
                                   for (std::size_t k = 0; k < c; ++k) {
                                     const std::size_t i = (b * c + k) * plane + p;
                                     g[i] += (self.grad[i] - (on_sphere ? self.value[i] * dot : 0.0)) / d;
                                   }
                                 }
                               }
                             });
}

// ---------------------------------------------------------------------------
// Convolution and batched matrix products.
// ---------------------------------------------------------------------------

/// 2-D cross-correlation without bias: [N,Cin,H,W] * [Cout,Cin,kh,kw] -> [N,Cout,H',W'],
/// H' = (H + 2*padding - kh)/stride + 1.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride = 1, std::size_t padding = 0) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != cin) {
    throw DimensionError("conv2d: input axis 1 (channels) = " + std::to_string(cin) + " but kernel axis 1 = " +
                         std::to_string(kernel.dim(1)));
  }
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw DimensionError("conv2d: kernel axes 2,3 (" + std::to_string(kh) + "x" + std::to_string(kw) +
                         ") exceed padded input axes 2,3 (" + std::to_string(h + 2 * padding) + "x" +
                         std::to_string(w + 2 * padding) + ")");
  }
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t rows = cin * kh * kw, cols = ho * wo, plane_in = h * w;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  // im2col per image; the pointwise case reads the input planes directly.
  std::vector<double> columns;
  if (!pointwise) {
    columns.assign(n * rows * cols, 0.0);
    for (std::size_t b = 0; b < n; ++b) {
      double* cbase = columns.data() + b * rows * cols;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* src = input.values().data() + (b * cin + ci) * plane_in;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          for (std::size_t kx = 0; kx < kw; ++kx) {
            double* dst = cbase + ((ci * kh + ky) * kw + kx) * cols;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                dst[oy * wo + ox] = src[iy * static_cast<long>(w) + ix];
              }
            }
          }
        }
      }
    }
  }

  std::vector<double> out(n * cout * cols);
  detail::ConstMatrixMap kmat(kernel.values().data(), cout, rows);
  for (std::size_t b = 0; b < n; ++b) {
    const double* cptr = pointwise ? input.values().data() + b * cin * plane_in : columns.data() + b * rows * cols;
    detail::ConstMatrixMap cmat(cptr, rows, cols);
    detail::MatrixMap omat(out.data() + b * cout * cols, cout, cols);
    omat.noalias() = kmat * cmat;
  }

  Tensor in_ref = input, k_ref = kernel;
  return Tensor::make_result(
      {n, cout, ho, wo}, std::move(out), "conv2d", {input, kernel},
      [in_ref, k_ref, columns = std::move(columns), pointwise, n, cin, h, w, cout, kh, kw, ho, wo, rows, cols, stride,
       padding](detail::Node& self) {
        auto& in_node = in_ref.node();
        auto& k_node = k_ref.node();
        detail::ConstMatrixMap kmat(k_node.value.data(), cout, rows);
        const std::size_t plane_in = h * w;
        if (k_node.requires_grad) {
          auto& gk = k_node.grad_buffer();
          detail::MatrixMap gkmat(gk.data(), cout, rows);
          for (std::size_t b = 0; b < n; ++b) {
            const double* cptr = pointwise ? in_node.value.data() + b * cin * plane_in : columns.data() + b * rows * cols;
            detail::ConstMatrixMap cmat(cptr, rows, cols);
            detail::ConstMatrixMap gy(self.grad.data() + b * cout * cols, cout, cols);
            gkmat.noalias() += gy * cmat.transpose();
          }
        }
        if (in_node.requires_grad) {
          auto& gi = in_node.grad_buffer();
          detail::RowMatrix gcol(rows, cols);
          for (std::size_t b = 0; b < n; ++b) {
            detail::ConstMatrixMap gy(self.grad.data() + b * cout * cols, cout, cols);
            if (pointwise) {
              detail::MatrixMap gimat(gi.data() + b * cin * plane_in, cin, plane_in);
              gimat.noalias() += kmat.transpose() * gy;
              continue;
            }
            gcol.noalias() = kmat.transpose() * gy;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              double* dst = gi.data() + (b * cin + ci) * plane_in;
              for (std::size_t ky = 0; ky < kh; ++ky) {
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const double* src = gcol.data() + ((ci * kh + ky) * kw + kx) * cols;
                  for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                      const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                      if (ix < 0 || ix >= static_cast<long>(w)) continue;
                      dst[iy * static_cast<long>(w) + ix] += src[oy * wo + ox];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

/// [N,A,B] -> [N,B,A].
inline Tensor transpose_last2(const Tensor& x) {
  require_rank(x, 3, "transpose_last2");
  const std::size_t n = x.dim(0), a = x.dim(1), b = x.dim(2);
  std::vector<double> out(x.numel());
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) out[(k * b + j) * a + i] = x[(k * a + i) * b + j];
  return Tensor::make_result({n, b, a}, std::move(out), "transpose_last2", {x}, [n, a, b](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j) g[(k * a + i) * b + j] += self.grad[(k * b + j) * a + i];
  });
}

/// Batched matrix product [N,A,B] x [N,B,C] -> [N,A,C].
inline Tensor bmm(const Tensor& lhs, const Tensor& rhs) {
  require_rank(lhs, 3, "bmm", "lhs");
  require_rank(rhs, 3, "bmm", "rhs");
  if (lhs.dim(0) != rhs.dim(0) || lhs.dim(2) != rhs.dim(1)) {
    throw DimensionError("bmm: lhs " + to_string(lhs.shape()) + " and rhs " + to_string(rhs.shape()) +
                         " disagree on axis 0 or on lhs axis 2 vs rhs axis 1");
  }
  const std::size_t n = lhs.dim(0), a = lhs.dim(1), b = lhs.dim(2), c = rhs.dim(2);
  std::vector<double> out(n * a * c);
  for (std::size_t k = 0; k < n; ++k) {
    detail::ConstMatrixMap l(lhs.values().data() + k * a * b, a, b);
    detail::ConstMatrixMap r(rhs.values().data() + k * b * c, b, c);
    detail::MatrixMap o(out.data() + k * a * c, a, c);
    o.noalias() = l * r;
  }
  Tensor lref = lhs, rref = rhs;
  return Tensor::make_result({n, a, c}, std::move(out), "bmm", {lhs, rhs}, [lref, rref, n, a, b, c](detail::Node& self) {
    auto& ln = lref.node();
    auto& rn = rref.node();
    for (std::size_t k = 0; k < n; ++k) {
      detail::ConstMatrixMap gy(self.grad.data() + k * a * c, a, c);
      if (ln.requires_grad) {
        detail::MatrixMap gl(ln.grad_buffer().data() + k * a * b, a, b);
        detail::ConstMatrixMap r(rn.value.data() + k * b * c, b, c);
        gl.noalias() += gy * r.transpose();
      }
      if (rn.requires_grad) {
        detail::MatrixMap gr(rn.grad_buffer().data() + k * b * c, b, c);
        detail::ConstMatrixMap l(ln.value.data() + k * a * b, a, b);
        gr.noalias() += l.transpose() * gy;
      }
    }
  });
}

/// Softmax over the last axis with per-row max subtraction.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() == 0) throw DimensionError("softmax_rows: empty last axis");
  const std::size_t len = x.shape().back(), rows = x.numel() / len;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.values().data() + r * len;
    double* dst = out.data() + r * len;
    const double mx = *std::max_element(src, src + len);
    double s = 0.0;
    for (std::size_t j = 0; j < len; ++j) s += dst[j] = std::exp(src[j] - mx);
    for (std::size_t j = 0; j < len; ++j) dst[j] /= s;
  }
  return Tensor::make_result(x.shape(), std::move(out), "softmax_rows", {x}, [rows, len](detail::Node& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < len; ++j) dot += self.grad[r * len + j] * self.value[r * len + j];
      for (std::size_t j = 0; j < len; ++j) {
        const std::size_t i = r * len + j;
        g[i] += self.value[i] * (self.grad[i] - dot);
      }
    }
  });
}

/// Row-wise L1 normalization of a nonnegative [N,R,R] affinity. Rows summing to
/// zero become identity rows.
inline Tensor normalize_affinity_rows(const Tensor& a) {
  require_rank(a, 3, "normalize_affinity_rows");
  if (a.dim(1) != a.dim(2)) throw DimensionError("normalize_affinity_rows: axes 1 and 2 differ in " + to_string(a.shape()));
  const std::size_t n = a.dim(0), r = a.dim(1);
  std::vector<double> out(a.numel(), 0.0);
  std::vector<double> sums(n * r);
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t i = 0; i < r; ++i) {
      const double* row = a.values().data() + (k * r + i) * r;
      double s = 0.0;
      for (std::size_t j = 0; j < r; ++j) s += row[j];
      sums[k * r + i] = s;
      double* dst = out.data() + (k * r + i) * r;
      if (s > 0.0) {
        for (std::size_t j = 0; j < r; ++j) dst[j] = row[j] / s;
      } else {
        dst[i] = 1.0;
      }
    }
  }
  return Tensor::make_result(a.shape(), std::move(out), "normalize_affinity_rows", {a},
                             [sums, n, r](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t k = 0; k < n * r; ++k) {
                                 const double s = sums[k];
                                 if (!(s > 0.0)) continue;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < r; ++j) dot += self.grad[k * r + j] * self.value[k * r + j];
                                 for (std::size_t j = 0; j < r; ++j) g[k * r + j] += (self.grad[k * r + j] - dot) / s;
                               }
                             });
}

}  // namespace seam
