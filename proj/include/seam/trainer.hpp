#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "seam/network.hpp"
#include "seam/tensor_io.hpp"

namespace seam {

struct TrainConfig {
  TrainMode mode = TrainMode::seam;
  long steps = 2000;
  std::size_t batch_size = 8;
  double lr_init = 0.01;
  double poly_gamma = 0.9;
  SgdConfig sgd;
  OhemConfig ohem;
  LossWeights weights;
  TransformConfig transform;
  bool detach_ecr_targets = true;
  std::uint64_t seed = 0;
  long checkpoint_interval = 500;
  long stop_after = 0;  // > 0: stop (with a checkpoint) after this many steps

  LossConfig loss_config() const { return {mode, ohem, weights, detach_ecr_targets}; }

  void validate() const {
    if (steps < 1) throw ConfigError("train.steps must be >= 1");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr_init > 0.0)) throw ConfigError("train.lr must be > 0");
    if (!(poly_gamma > 0.0)) throw ConfigError("train.poly_gamma must be > 0");
    if (sgd.momentum < 0.0 || sgd.momentum >= 1.0) throw ConfigError("train.momentum must lie in [0,1)");
    if (sgd.weight_decay < 0.0) throw ConfigError("train.weight_decay must be >= 0");
    if (checkpoint_interval < 1) throw ConfigError("train.checkpoint_interval must be >= 1");
    if (stop_after < 0) throw ConfigError("train.stop_after must be >= 0");
    try {
      ohem.validate();
    } catch (const ParameterError& e) {
      throw ConfigError(e.what());
    }
    if (mode != TrainMode::baseline && !transform.any_family() && !transform.identity) {
      throw ConfigError("two-branch modes need at least one transform family (or transform.identity)");
    }
  }
};

/// The transformed branch must land on the same CAM grid as the warped original CAM.
inline void check_transform_geometry(const TransformConfig& t, std::size_t image_size) {
  if (!t.rescale) return;
  const double s = *t.rescale;
  if (!(s > 0.0)) throw ConfigError("transform.rescale must be > 0");
  const std::size_t via_image = cam_extent(scaled_extent(s, image_size));
  const std::size_t via_cam = scaled_extent(s, cam_extent(image_size));
  if (via_image != via_cam) {
    throw ConfigError("transform.rescale " + std::to_string(s) + " at image size " + std::to_string(image_size) +
                      " gives a " + std::to_string(via_image) + " px CAM for the transformed image but a " +
                      std::to_string(via_cam) + " px warped CAM");
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: checkpoint.bin holds concatenated tensor records (float64);
// checkpoint.idx is text: a "step K" line, a "dims ..." line, then "name offset" lines.
// ---------------------------------------------------------------------------

inline std::string describe(const ModelDims& d) {
  std::ostringstream os;
  os << "num_classes=" << d.num_classes << " channels=" << d.channels[0] << "," << d.channels[1] << ","
     << d.channels[2] << "," << d.channels[3] << " reduce_a=" << d.reduce_a << " reduce_b=" << d.reduce_b
     << " embed=" << d.embed;
  return os.str();
}

inline void save_checkpoint(const std::filesystem::path& dir, const ToyBackbone& model, const SgdState& state,
                            long step) {
  std::ostringstream bin(std::ios::binary);
  std::ostringstream idx;
  idx << "step " << step << "\n";
  idx << "dims " << describe(model.dims()) << "\n";
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    idx << params[i].name << " " << bin.tellp() << "\n";
    write_tensor(bin, params[i].value, TensorEncoding::float64);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    idx << "velocity/" << params[i].name << " " << bin.tellp() << "\n";
    write_tensor(bin, Tensor(params[i].value.shape(), state.velocity[i]), TensorEncoding::float64);
  }
  detail::write_file(dir / "checkpoint.bin", bin.str());
  detail::write_file(dir / "checkpoint.idx", idx.str());
}

struct Checkpoint {
  long step = 0;
  std::string dims;
};

/// Restores parameters (and velocities when `state` is given) in place.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir, ToyBackbone& model, SgdState* state = nullptr) {
  const auto idx_path = dir / "checkpoint.idx", bin_path = dir / "checkpoint.bin";
  if (!std::filesystem::exists(idx_path) || !std::filesystem::exists(bin_path)) {
    throw DataError("no checkpoint in " + dir.string());
  }
  std::istringstream idx(detail::read_file(idx_path));
  const std::string bin = detail::read_file(bin_path);
  Checkpoint ck;
  std::string word;
  if (!(idx >> word >> ck.step) || word != "step") throw ParseError(idx_path.string() + ": expected 'step K'", 0);
  idx >> word;
  std::getline(idx, ck.dims);
  if (word != "dims") throw ParseError(idx_path.string() + ": expected a dims line", 0);
  if (!ck.dims.empty() && ck.dims.front() == ' ') ck.dims.erase(0, 1);
  if (ck.dims != describe(model.dims())) {
    throw ConfigError("checkpoint model dims (" + ck.dims + ") differ from the configured model (" +
                      describe(model.dims()) + ")");
  }
  std::string name;
  std::size_t offset = 0;
  std::size_t restored = 0, velocities = 0;
  while (idx >> name >> offset) {
    if (offset >= bin.size()) throw ParseError(bin_path.string() + ": offset past end for " + name, offset);
    std::istringstream is(bin.substr(offset), std::ios::binary);
    Tensor t = read_tensor(is, offset);
    const bool is_velocity = name.rfind("velocity/", 0) == 0;
    const std::string pname = is_velocity ? name.substr(9) : name;
    auto& params = model.parameters();
    std::size_t i = 0;
    while (i < params.size() && params[i].name != pname) ++i;
    if (i == params.size()) throw ConfigError("checkpoint holds unknown parameter '" + pname + "'");
    if (t.shape() != params[i].value.shape()) {
      throw ConfigError("checkpoint parameter '" + pname + "' has shape " + to_string(t.shape()) + ", model expects " +
                        to_string(params[i].value.shape()));
    }
    if (is_velocity) {
      if (state) state->velocity[i].assign(t.values().begin(), t.values().end());
      ++velocities;
    } else {
      std::copy(t.values().begin(), t.values().end(), params[i].value.mutable_values().begin());
      ++restored;
    }
  }
  if (restored != model.parameters().size()) throw DataError("checkpoint in " + dir.string() + " is incomplete");
  if (state && velocities != model.parameters().size()) {
    throw DataError("checkpoint in " + dir.string() + " lacks optimizer state");
  }
  return ck;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

inline constexpr const char* kTrainLogHeader = "step,lr,l_cls,l_er,l_ecr,total";

inline std::string format_log_row(long step, double lr, const LossBundle& b) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g,%.10g,%.10g", step, lr, b.l_cls, b.l_er, b.l_ecr, b.total);
  return buf;
}

/// Sample order for one epoch: a Fisher-Yates shuffle seeded by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(detail::mix_seed(seed ^ 0x5EA1'0000'0000ULL, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

/// Transform used at a given step.
inline AffineTransform step_transform(const TrainConfig& cfg, long step) {
  if (cfg.mode == TrainMode::baseline) return {};
  return sample_transform(cfg.transform, detail::mix_seed(cfg.seed ^ 0x7A4F'0000'0000ULL, static_cast<std::uint64_t>(step)));
}

struct TrainResult {
  long steps_done = 0;
  std::vector<LossBundle> losses;  // rows produced by this call
};

/// Trains on `samples`, writing train_log.csv and checkpoint.{bin,idx} into run_dir.
/// With resume, continues from the checkpoint in run_dir and rewrites the log up to it.
/// The trajectory depends only on (config, seed), so an interrupted and resumed run
/// reproduces an uninterrupted one exactly.
inline TrainResult train(ToyBackbone& model, const std::vector<ImageSample>& samples, const TrainConfig& cfg,
                         const std::filesystem::path& run_dir, bool resume = false,
                         const std::function<void(long, const LossBundle&)>& on_step = {}) {
  cfg.validate();
  if (samples.empty()) throw DataError("training set is empty");
  for (const auto& s : samples) {
    if (s.label.size() != model.dims().num_classes) {
      throw DataError("sample " + s.id + " has " + std::to_string(s.label.size()) + " labels, model has " +
                      std::to_string(model.dims().num_classes) + " classes");
    }
  }
  if (cfg.mode != TrainMode::baseline) check_transform_geometry(cfg.transform, samples[0].image.dim(1));
  SgdState state = SgdState::zeros(model);
  long start = 0;
  std::vector<std::string> log_rows;
  const auto log_path = run_dir / "train_log.csv";
  if (resume) {
    start = load_checkpoint(run_dir, model, &state).step;
    if (start > cfg.steps) throw ConfigError("checkpoint step exceeds train.steps");
    std::ifstream is(log_path);
    std::string line;
    std::getline(is, line);
    while (static_cast<long>(log_rows.size()) < start && std::getline(is, line)) log_rows.push_back(line);
    if (static_cast<long>(log_rows.size()) != start) throw DataError(log_path.string() + " is shorter than the checkpoint");
  }
  auto flush_log = [&] {
    std::string text = std::string(kTrainLogHeader) + "\n";
    for (const auto& r : log_rows) text += r + "\n";
    detail::write_file(log_path, text);
  };
  const LossConfig lc = cfg.loss_config();
  const std::size_t n = samples.size();
  std::uint64_t cached_epoch = ~0ULL;
  std::vector<std::size_t> order;
  TrainResult result;
  const long end = cfg.stop_after > 0 ? std::min(cfg.steps, cfg.stop_after) : cfg.steps;
  for (long step = start; step < end; ++step) {
    std::vector<const ImageSample*> batch;
    for (std::size_t j = 0; j < cfg.batch_size; ++j) {
      const std::uint64_t pos = static_cast<std::uint64_t>(step) * cfg.batch_size + j;
      if (pos / n != cached_epoch) {
        cached_epoch = pos / n;
        order = epoch_order(n, cfg.seed, cached_epoch);
      }
      batch.push_back(&samples[order[pos % n]]);
    }
    const double lr = poly_lr(step, cfg.steps, cfg.lr_init, cfg.poly_gamma);
    LossBundle loss;
    try {
      loss = siamese_step(model, batch, step_transform(cfg, step), lc, state, lr, cfg.sgd);
    } catch (const NumericError& e) {
      flush_log();
      throw NumericError("step " + std::to_string(step) + ": " + e.what());
    }
    log_rows.push_back(format_log_row(step, lr, loss));
    loss.graph = Tensor();
    result.losses.push_back(loss);
    if (on_step) on_step(step, loss);
    if ((step + 1) % cfg.checkpoint_interval == 0 || step + 1 == end) {
      save_checkpoint(run_dir, model, state, step + 1);
      flush_log();
    }
  }
  if (start >= end) flush_log();
  result.steps_done = end;
  return result;
}

}  // namespace seam
