#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "seam/affine.hpp"
#include "seam/cam.hpp"
#include "seam/errors.hpp"
#include "seam/losses.hpp"

namespace seam {

struct ClassCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;

  bool present() const { return tp + fp + fn > 0; }
  bool operator==(const ClassCounts&) const = default;
};

/// Index 0 is background, index k + 1 is foreground class k.
using Confusion = std::vector<ClassCounts>;

/// Per-class TP/FP/FN of one prediction against ground truth. `num_ids` counts the background.
inline Confusion confusion_counts(const Mask& pred, const Mask& gt, std::size_t num_ids) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("confusion_counts: prediction is " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + ", ground truth is " + std::to_string(gt.height) + "x" +
                         std::to_string(gt.width));
  }
  Confusion c(num_ids);
  for (std::size_t i = 0; i < pred.ids.size(); ++i) {
    const std::size_t p = pred.ids[i], g = gt.ids[i];
    if (p >= num_ids || g >= num_ids) {
      throw DataError("confusion_counts: class id " + std::to_string(std::max(p, g)) + " at pixel " +
                      std::to_string(i) + " is outside [0," + std::to_string(num_ids) + ")");
    }
    if (p == g) {
      ++c[p].tp;
    } else {
      ++c[p].fp;
      ++c[g].fn;
    }
  }
  return c;
}

inline void accumulate(Confusion& total, const Confusion& part) {
  if (total.empty()) total.resize(part.size());
  if (total.size() != part.size()) throw DimensionError("accumulate: confusion sizes differ");
  for (std::size_t i = 0; i < part.size(); ++i) {
    total[i].tp += part[i].tp;
    total[i].fp += part[i].fp;
    total[i].fn += part[i].fn;
  }
}

/// IoU per class; empty for a class absent from both predictions and ground truth.
inline std::vector<std::optional<double>> per_class_iou(const Confusion& c) {
  std::vector<std::optional<double>> out(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c[i].present()) out[i] = static_cast<double>(c[i].tp) / static_cast<double>(c[i].tp + c[i].fp + c[i].fn);
  }
  return out;
}

/// Mean IoU over classes (background included) that occur anywhere.
inline double miou(const Confusion& c) {
  double s = 0.0;
  std::size_t k = 0;
  for (const auto& v : per_class_iou(c)) {
    if (v) {
      s += *v;
      ++k;
    }
  }
  if (k == 0) throw DataError("miou: no class occurs in the evaluation set");
  return s / static_cast<double>(k);
}

/// Mean false-negative and false-positive ratios over foreground classes, each
/// relative to that class's true positives. Classes with no true positive are
/// listed as degenerate and left out of the means.
struct ActivationMetrics {
  double m_fn = 0.0;
  double m_fp = 0.0;
  std::vector<std::size_t> degenerate;  // class ids (k + 1)
};

inline ActivationMetrics activation_metrics(const Confusion& c) {
  ActivationMetrics a;
  std::size_t k = 0;
  for (std::size_t i = 1; i < c.size(); ++i) {
    if (c[i].tp == 0) {
      a.degenerate.push_back(i);
      continue;
    }
    a.m_fn += static_cast<double>(c[i].fn) / static_cast<double>(c[i].tp);
    a.m_fp += static_cast<double>(c[i].fp) / static_cast<double>(c[i].tp);
    ++k;
  }
  if (k > 0) {
    a.m_fn /= static_cast<double>(k);
    a.m_fp /= static_cast<double>(k);
  }
  return a;
}

inline std::uint64_t foreground_fn(const Confusion& c) {
  std::uint64_t s = 0;
  for (std::size_t i = 1; i < c.size(); ++i) s += c[i].fn;
  return s;
}

inline std::uint64_t foreground_fp(const Confusion& c) {
  std::uint64_t s = 0;
  for (std::size_t i = 1; i < c.size(); ++i) s += c[i].fp;
  return s;
}

// ---------------------------------------------------------------------------
// Background threshold sweep
// ---------------------------------------------------------------------------

/// 0.05, 0.10, ..., 0.95.
inline std::vector<double> default_alpha_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 19; ++k) g.push_back(k / 20.0);
  return g;
}

struct SweepPoint {
  double alpha = 0.0;
  double miou = 0.0;
  ActivationMetrics activation;
  std::uint64_t fn = 0;  // foreground totals
  std::uint64_t fp = 0;
  Confusion counts;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  std::size_t best = 0;  // index of the highest mIoU; ties go to the smaller alpha

  const SweepPoint& best_point() const { return points.at(best); }
};

/// One evaluation image: its fused foreground CAM [1,K,H,W] (or a [K,H,W] slice of a
/// batch), multi-hot label and ground truth.
struct CamRecord {
  Tensor cam;
  std::vector<int> label;
  Mask gt;
};

inline Confusion confusion_at(const std::vector<CamRecord>& records, double alpha) {
  Confusion total;
  for (const auto& r : records) {
    const std::size_t k = r.cam.dim(1);
    const std::vector<std::vector<int>> labels{r.label};
    const auto pred = pseudo_label(r.cam, labels, alpha);
    accumulate(total, confusion_counts(pred[0], r.gt, k + 1));
  }
  return total;
}

inline SweepResult threshold_sweep(const std::vector<CamRecord>& records, std::vector<double> alphas = default_alpha_grid()) {
  if (records.empty()) throw DataError("threshold_sweep: no evaluation images");
  if (alphas.empty()) throw ParameterError("threshold_sweep: empty alpha grid");
  std::sort(alphas.begin(), alphas.end());
  SweepResult r;
  for (double a : alphas) {
    SweepPoint p;
    p.alpha = a;
    p.counts = confusion_at(records, a);
    p.miou = miou(p.counts);
    p.activation = activation_metrics(p.counts);
    p.fn = foreground_fn(p.counts);
    p.fp = foreground_fp(p.counts);
    if (p.miou > (r.points.empty() ? -1.0 : r.points[r.best].miou)) r.best = r.points.size();
    r.points.push_back(std::move(p));
  }
  return r;
}

inline std::string sweep_csv(const SweepResult& r) {
  std::string out = "alpha,miou,m_fn,m_fp,fn,fp\n";
  char buf[200];
  for (const auto& p : r.points) {
    std::snprintf(buf, sizeof buf, "%.2f,%.6f,%.6f,%.6f,%llu,%llu\n", p.alpha, p.miou, p.activation.m_fn,
                  p.activation.m_fp, static_cast<unsigned long long>(p.fn), static_cast<unsigned long long>(p.fp));
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Equivariance error
// ---------------------------------------------------------------------------

/// Mean over images and transforms of the valid-region mean of |A(F(I)) - F(A(I))|,
/// where F maps images [N,3,H,W] to normalized CAMs [N,C,h,w] and A acts on the CAM
/// grid at the CAM-to-image resolution ratio.
template <class CamFn>
double equivariance_error(CamFn&& cam_of, const Tensor& images, const std::vector<AffineTransform>& transforms) {
  if (transforms.empty()) throw ParameterError("equivariance_error: no transforms");
  NoGradGuard no_grad;
  const Tensor base = cam_of(images);
  const double factor = static_cast<double>(base.dim(3)) / static_cast<double>(images.dim(3));
  double total = 0.0;
  for (const auto& t : transforms) {
    const AffineTransform tc = t.at_resolution(factor);
    const Tensor warped = warp(base, tc);
    const Tensor direct = cam_of(warp(images, t));
    if (warped.shape() != direct.shape()) {
      throw DimensionError("equivariance_error: warped CAM " + to_string(warped.shape()) + " vs CAM of warped image " +
                           to_string(direct.shape()) + " for " + describe(t));
    }
    const Tensor valid = warp_valid_mask(tc, base.dim(2), base.dim(3));
    total += masked_mean(abs(sub(warped, direct)), valid).item();
  }
  return total / static_cast<double>(transforms.size());
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// key=value text, one entry per line, keys in insertion order.
class Report {
 public:
  void set(const std::string& key, const std::string& value) {
    for (auto& [k, v] : entries_) {
      if (k == key) {
        v = value;
        return;
      }
    }
    entries_.emplace_back(key, value);
  }
  void set(const std::string& key, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", value);
    set(key, std::string(buf));
  }
  void set_count(const std::string& key, std::uint64_t value) { set(key, std::to_string(value)); }

  const std::string& get(const std::string& key) const {
    for (const auto& [k, v] : entries_)
      if (k == key) return v;
    throw DataError("report has no key '" + key + "'");
  }
  double number(const std::string& key) const { return std::stod(get(key)); }
  bool has(const std::string& key) const {
    for (const auto& e : entries_)
      if (e.first == key) return true;
    return false;
  }

  std::string text() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
    return out;
  }

  static Report parse(const std::string& text) {
    Report r;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      const std::string line = text.substr(pos, end - pos);
      if (!line.empty()) {
        const auto eq = line.find('=');
        if (eq == std::string::npos || eq == 0) throw ParseError("report line without key=value", pos);
        r.set(line.substr(0, eq), line.substr(eq + 1));
      }
      pos = end + 1;
    }
    return r;
  }

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace seam
