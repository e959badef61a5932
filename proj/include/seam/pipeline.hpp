#pragma once

// Command-level workflows shared by the CLI and the acceptance harness: training
// into a run directory, CAM export, evaluation and ablation tables.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "seam/config.hpp"
#include "seam/metrics.hpp"
#include "seam/trainer.hpp"

namespace seam {

namespace fs = std::filesystem;

/// Outputs always go to a fresh (missing or empty) directory.
inline void prepare_fresh_dir(const fs::path& dir) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir)) throw ConfigError("output path " + dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) throw ConfigError("output directory " + dir.string() + " is not empty");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline ModelDims dims_for(const RunConfig& cfg, std::size_t num_classes) {
  ModelDims d = cfg.model;
  d.num_classes = num_classes;
  return d;
}

/// Trains `cfg.train` on the dataset at data_dir into run_dir. A fresh run writes
/// config.json first; a resumed run continues from run_dir's checkpoint.
inline TrainResult run_train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& run_dir, bool resume,
                             const std::function<void(long, const LossBundle&)>& on_step = {}) {
  cfg.validate();
  const Dataset ds = load_dataset(data_dir);
  if (!resume) {
    prepare_fresh_dir(run_dir);
    detail::write_file(run_dir / "config.json", config_text(cfg));
  } else if (!fs::exists(run_dir / "checkpoint.idx")) {
    throw DataError("nothing to resume in " + run_dir.string());
  }
  ToyBackbone model(dims_for(cfg, ds.num_classes()), cfg.train.seed);
  return train(model, ds.samples, cfg.train, run_dir, resume, on_step);
}

struct TrainedRun {
  RunConfig config;
  ToyBackbone model;
};

/// Loads config.json and the checkpoint of a run for a dataset with `num_classes` classes.
inline TrainedRun load_run(const fs::path& run_dir, std::size_t num_classes) {
  if (!fs::is_directory(run_dir)) throw DataError("run directory " + run_dir.string() + " does not exist");
  if (!fs::exists(run_dir / "config.json")) throw DataError(run_dir.string() + " has no config.json");
  TrainedRun r{load_config(run_dir / "config.json"), ToyBackbone()};
  r.model = ToyBackbone(dims_for(r.config, num_classes), r.config.train.seed);
  load_checkpoint(run_dir, r.model);
  return r;
}

/// Fused test-time CAMs of every sample, one record per image.
inline std::vector<CamRecord> collect_cams(const ToyBackbone& model, const std::vector<ImageSample>& samples,
                                           CamSource source, const InferenceConfig& infer, std::size_t batch_size,
                                           bool need_masks = true) {
  std::vector<CamRecord> out;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const ImageSample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) batch.push_back(&samples[i]);
    const Tensor images = stack_batch(batch).first;
    const Tensor cams = infer_cam(model, images, source, infer);
    const std::size_t k = cams.dim(1), h = cams.dim(2), w = cams.dim(3), per = k * h * w;
    for (std::size_t b = 0; b < batch.size(); ++b) {
      if (need_masks && !batch[b]->gt) throw DataError("sample " + batch[b]->id + " has no ground-truth mask");
      CamRecord r;
      r.cam = Tensor({1, k, h, w}, std::vector<double>(cams.values().begin() + b * per, cams.values().begin() + (b + 1) * per));
      r.label = batch[b]->label;
      if (batch[b]->gt) r.gt = *batch[b]->gt;
      out.push_back(std::move(r));
    }
  }
  return out;
}

/// Equivariance error of the trunk's normalized CAM under a rescale, averaged over images.
inline double rescale_equivariance(const ToyBackbone& model, const std::vector<ImageSample>& samples, double scale,
                                   std::size_t batch_size) {
  AffineTransform t;
  t.scale = scale;
  auto cam_of = [&](const Tensor& images) { return model.forward(images, false).cam_norm; };
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    std::vector<const ImageSample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch_size); ++i) batch.push_back(&samples[i]);
    total += equivariance_error(cam_of, stack_batch(batch).first, {t}) * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(samples.size());
}

struct EvalOutcome {
  Report report;
  SweepResult sweep;
};

inline std::string join_numbers(const std::vector<double>& v) {
  std::string s;
  char buf[32];
  for (double x : v) {
    std::snprintf(buf, sizeof buf, "%g", x);
    s += (s.empty() ? "" : ",") + std::string(buf);
  }
  return s;
}

/// Evaluates a trained model: fused CAMs, threshold sweep, activation metrics and
/// rescale equivariance. `infer` and `eval` settings come from `cfg`.
inline EvalOutcome evaluate_model(const ToyBackbone& model, TrainMode mode, const RunConfig& cfg, const Dataset& ds,
                                  bool with_equivariance = true) {
  const CamSource source = resolve(cfg.cam_source, mode);
  const auto records = collect_cams(model, ds.samples, source, cfg.infer, cfg.eval.batch_size);
  EvalOutcome out;
  out.sweep = threshold_sweep(records, cfg.eval.alphas);
  const SweepPoint& best = out.sweep.best_point();
  Report& r = out.report;
  r.set("mode", to_string(mode));
  r.set("transform", describe(cfg.train.transform));
  r.set("cam_source", source == CamSource::pcm ? "pcm" : "trunk");
  r.set("scales", join_numbers(cfg.infer.scales));
  r.set("flip", cfg.infer.use_flip ? "1" : "0");
  r.set_count("images", ds.samples.size());
  r.set("best_alpha", best.alpha);
  r.set("miou", best.miou);
  r.set("m_fn", best.activation.m_fn);
  r.set("m_fp", best.activation.m_fp);
  r.set_count("fn", best.fn);
  r.set_count("fp", best.fp);
  std::string degenerate;
  for (auto id : best.activation.degenerate) degenerate += (degenerate.empty() ? "" : ",") + ds.manifest.class_names.at(id - 1);
  r.set("degenerate_classes", degenerate);
  const auto ious = per_class_iou(best.counts);
  for (std::size_t i = 0; i < ious.size(); ++i) {
    const std::string name = i == 0 ? "background" : ds.manifest.class_names.at(i - 1);
    if (ious[i]) {
      r.set("iou." + name, *ious[i]);
    } else {
      r.set("iou." + name, "absent");
    }
  }
  r.set("alpha_infer", cfg.infer.alpha);
  r.set("miou_at_alpha_infer", miou(confusion_at(records, cfg.infer.alpha)));
  if (with_equivariance) {
    r.set("equivariance_scale", cfg.eval.equivariance_scale);
    r.set("equivariance_error", rescale_equivariance(model, ds.samples, cfg.eval.equivariance_scale, cfg.eval.batch_size));
  }
  return out;
}

/// Evaluates run_dir on the dataset at data_dir and writes report.txt, sweep.csv and
/// config.json into out_dir. `overrides` are applied on top of the run's own config.
inline EvalOutcome run_eval(const fs::path& run_dir, const fs::path& data_dir, const fs::path& out_dir,
                            const std::function<void(RunConfig&)>& overrides = {}) {
  const Dataset ds = load_dataset(data_dir);
  TrainedRun run = load_run(run_dir, ds.num_classes());
  if (overrides) overrides(run.config);
  run.config.validate();
  prepare_fresh_dir(out_dir);
  EvalOutcome out = evaluate_model(run.model, run.config.train.mode, run.config, ds);
  detail::write_file(out_dir / "config.json", config_text(run.config));
  detail::write_file(out_dir / "report.txt", out.report.text());
  detail::write_file(out_dir / "sweep.csv", sweep_csv(out.sweep));
  return out;
}

/// Writes fused CAMs (tensor format, float32) and pseudo-label masks for every sample.
/// out_dir is itself a dataset whose masks are the pseudo labels.
inline void run_infer(const fs::path& run_dir, const fs::path& data_dir, const fs::path& out_dir,
                      const std::function<void(RunConfig&)>& overrides = {}) {
  const Dataset ds = load_dataset(data_dir);
  TrainedRun run = load_run(run_dir, ds.num_classes());
  if (overrides) overrides(run.config);
  run.config.validate();
  prepare_fresh_dir(out_dir);
  const CamSource source = resolve(run.config.cam_source, run.config.train.mode);
  const auto records = collect_cams(run.model, ds.samples, source, run.config.infer, run.config.eval.batch_size, false);
  DatasetManifest m = ds.manifest;
  m.samples.clear();
  std::vector<ImageSample> written;
  for (const char* sub : {"cams", "images", "masks"}) fs::create_directories(out_dir / sub);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& s = ds.samples[i];
    const std::vector<std::vector<int>> labels{s.label};
    ImageSample p;
    p.id = s.id;
    p.image = s.image;
    p.gt = pseudo_label(records[i].cam, labels, run.config.infer.alpha)[0];
    p.label = label_from_mask(*p.gt, ds.num_classes());
    const std::string img = "images/" + s.id + ".ppm", mask = "masks/" + s.id + ".pgm";
    save_sample(p, out_dir / img, out_dir / mask);
    save_tensor(out_dir / "cams" / (s.id + ".bin"), records[i].cam);
    m.samples.push_back({s.id, img, mask});
    written.push_back(std::move(p));
  }
  write_manifest(out_dir, m);
  write_labels_csv(out_dir, m, written);
  detail::write_file(out_dir / "config.json", config_text(run.config));
}

// ---------------------------------------------------------------------------
// Ablation tables
// ---------------------------------------------------------------------------

struct ScaleRow {
  double scale = 0.0;
  double best_alpha = 0.0;
  double miou = 0.0;
  double m_fn = 0.0;
  double m_fp = 0.0;
};

struct AblationRow {
  std::string run;
  std::string mode;
  std::string transform;
  double best_alpha = 0.0;
  double miou = 0.0;
  double m_fn = 0.0;
  double m_fp = 0.0;
  double equivariance_error = 0.0;
  std::vector<ScaleRow> scales;
};

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Population variance.
inline double variance_of(const std::vector<double>& v) {
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size());
}

/// Multi-scale evaluation plus one single-scale, unflipped sweep per test scale.
inline AblationRow ablate_run(const std::string& name, const TrainedRun& run, const Dataset& ds,
                              const std::vector<double>& test_scales) {
  const EvalOutcome full = evaluate_model(run.model, run.config.train.mode, run.config, ds);
  AblationRow row;
  row.run = name;
  row.mode = to_string(run.config.train.mode);
  row.transform = run.config.train.mode == TrainMode::baseline ? "none" : describe(run.config.train.transform);
  row.best_alpha = full.report.number("best_alpha");
  row.miou = full.sweep.best_point().miou;
  row.m_fn = full.sweep.best_point().activation.m_fn;
  row.m_fp = full.sweep.best_point().activation.m_fp;
  row.equivariance_error = full.report.number("equivariance_error");
  for (double s : test_scales) {
    RunConfig single = run.config;
    single.infer.scales = {s};
    single.infer.use_flip = false;
    const EvalOutcome e = evaluate_model(run.model, run.config.train.mode, single, ds, false);
    const auto& b = e.sweep.best_point();
    row.scales.push_back({s, b.alpha, b.miou, b.activation.m_fn, b.activation.m_fp});
  }
  return row;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "run,mode,transform,best_alpha,miou,m_fn,m_fp,equivariance_error,m_fn_var,m_fp_var\n";
  char buf[512];
  for (const auto& r : rows) {
    std::vector<double> fn, fp;
    for (const auto& s : r.scales) {
      fn.push_back(s.m_fn);
      fp.push_back(s.m_fp);
    }
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.2f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.run.c_str(), r.mode.c_str(),
                  r.transform.c_str(), r.best_alpha, r.miou, r.m_fn, r.m_fp, r.equivariance_error,
                  fn.empty() ? 0.0 : variance_of(fn), fp.empty() ? 0.0 : variance_of(fp));
    out += buf;
  }
  return out;
}

inline std::string scales_csv(const std::vector<AblationRow>& rows) {
  std::string out = "run,mode,scale,best_alpha,miou,m_fn,m_fp\n";
  char buf[512];
  for (const auto& r : rows) {
    for (const auto& s : r.scales) {
      std::snprintf(buf, sizeof buf, "%s,%s,%g,%.2f,%.6f,%.6f,%.6f\n", r.run.c_str(), r.mode.c_str(), s.scale,
                    s.best_alpha, s.miou, s.m_fn, s.m_fp);
      out += buf;
    }
  }
  return out;
}

inline std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::string out;
  char buf[512];
  std::snprintf(buf, sizeof buf, "%-16s %-9s %-22s %6s %8s %8s %8s %8s\n", "run", "mode", "transform", "alpha", "mIoU",
                "m_FN", "m_FP", "equiv");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-16s %-9s %-22s %6.2f %8.4f %8.4f %8.4f %8.4f\n", r.run.c_str(), r.mode.c_str(),
                  r.transform.c_str(), r.best_alpha, r.miou, r.m_fn, r.m_fp, r.equivariance_error);
    out += buf;
  }
  out += "\nper test scale (single scale, no flip, best threshold each)\n";
  std::snprintf(buf, sizeof buf, "%-16s %6s %6s %8s %8s %8s\n", "run", "scale", "alpha", "mIoU", "m_FN", "m_FP");
  out += buf;
  for (const auto& r : rows) {
    for (const auto& s : r.scales) {
      std::snprintf(buf, sizeof buf, "%-16s %6g %6.2f %8.4f %8.4f %8.4f\n", r.run.c_str(), s.scale, s.best_alpha, s.miou,
                    s.m_fn, s.m_fp);
      out += buf;
    }
  }
  return out;
}

/// Compares runs on one evaluation set and writes ablation.txt, ablation.csv and scales.csv.
inline std::vector<AblationRow> run_ablate(const std::vector<fs::path>& run_dirs, const fs::path& data_dir,
                                           const fs::path& out_dir, const std::vector<double>& test_scales,
                                           const std::function<void(RunConfig&)>& overrides = {}) {
  if (run_dirs.empty()) throw ConfigError("ablate needs at least one run directory");
  for (const auto& d : run_dirs)
    if (!fs::is_directory(d)) throw DataError("run directory " + d.string() + " does not exist");
  const Dataset ds = load_dataset(data_dir);
  prepare_fresh_dir(out_dir);
  std::vector<AblationRow> rows;
  for (const auto& d : run_dirs) {
    TrainedRun run = load_run(d, ds.num_classes());
    if (overrides) overrides(run.config);
    run.config.validate();
    fs::path name = d.lexically_normal();
    if (name.filename().empty()) name = name.parent_path();  // "runs/seam/" names the row "seam"
    rows.push_back(ablate_run(name.filename().string(), run, ds, test_scales));
  }
  detail::write_file(out_dir / "ablation.txt", ablation_table(rows));
  detail::write_file(out_dir / "ablation.csv", ablation_csv(rows));
  detail::write_file(out_dir / "scales.csv", scales_csv(rows));
  return rows;
}

}  // namespace seam
