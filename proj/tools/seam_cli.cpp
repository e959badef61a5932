// Command-line front end: gen-data, train, infer, eval, ablate, gradcheck, print-config.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "seam/config.hpp"
#include "seam/gradcheck.hpp"
#include "seam/pipeline.hpp"

namespace fs = std::filesystem;
using namespace seam;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

/// Config sources shared by every command: a JSON file, then --set overrides, then flags.
struct ConfigSources {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "JSON config (flat dotted keys)")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override any config key, e.g. --set train.lr=0.02")->take_all();
  }

  RunConfig build(std::optional<RunConfig> base = std::nullopt) const {
    RunConfig cfg = base ? *base : RunConfig{};
    if (!file.empty()) {
      const RunConfig from_file = load_config(file);
      cfg = from_file;
    }
    for (const auto& s : sets) apply_override(cfg, s);
    return cfg;
  }
};

template <class T>
void flag_into(const std::optional<T>& flag, RunConfig& cfg, const std::string& key) {
  if (flag) set_config_value(cfg, key, nlohmann::ordered_json(*flag));
}

std::vector<double> parse_scale_list(const std::string& text) {
  std::vector<double> out;
  for (const auto& part : seam::split(text, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("cannot read scale '" + part + "' in '" + text + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty scale list");
  return out;
}

void print_eval(const Report& r) { std::cout << r.text(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Siamese equivariant CAM training and evaluation on a synthetic shapes dataset"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  // gen-data
  ConfigSources gen_src;
  std::string gen_out;
  std::optional<std::size_t> gen_n, gen_size;
  std::optional<std::uint64_t> gen_seed;
  std::optional<std::string> gen_classes;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shapes dataset");
  gen_src.attach(gen);
  gen->add_option("--out", gen_out, "Output directory (must be new or empty)")->required();
  gen->add_option("--n", gen_n, "Number of samples [data.count]");
  gen->add_option("--size", gen_size, "Image side in pixels [data.image_size]");
  gen->add_option("--seed", gen_seed, "Generation seed [data.seed]");
  gen->add_option("--classes", gen_classes, "Comma-separated class names [data.classes]");

  // train
  ConfigSources train_src;
  std::string train_data, train_out;
  bool train_resume = false, train_quiet = false;
  std::optional<std::string> train_mode;
  std::optional<long> train_steps, train_interval, train_stop;
  std::optional<std::size_t> train_batch;
  std::optional<double> train_lr, train_keep, train_rescale, train_rotation;
  std::optional<int> train_translation;
  std::optional<std::uint64_t> train_seed;
  auto* tr = app.add_subcommand("train", "Train a model into a fresh run directory");
  train_src.attach(tr);
  tr->add_option("--data", train_data, "Training dataset directory")->required();
  tr->add_option("--out", train_out, "Run directory (new or empty; existing with --resume)")->required();
  tr->add_flag("--resume", train_resume, "Continue from the run directory's checkpoint and config.json");
  tr->add_flag("--quiet", train_quiet, "Only print the final summary");
  tr->add_option("--mode", train_mode, "baseline | er | seam [train.mode]");
  tr->add_option("--steps", train_steps, "Optimizer steps [train.steps]");
  tr->add_option("--batch-size", train_batch, "Images per step [train.batch_size]");
  tr->add_option("--lr", train_lr, "Initial learning rate [train.lr]");
  tr->add_option("--keep-fraction", train_keep, "OHEM keep fraction; 1.0 disables mining [train.keep_fraction]");
  tr->add_option("--seed", train_seed, "Init, ordering and transform seed [train.seed]");
  tr->add_option("--checkpoint-interval", train_interval, "Steps between checkpoints [train.checkpoint_interval]");
  tr->add_option("--stop-after", train_stop, "Stop after this many steps (0 = run to the end) [train.stop_after]");
  tr->add_option("--rescale", train_rescale, "Rescale rate of the second branch [transform.rescale]");
  tr->add_option("--rotation", train_rotation, "Max rotation in degrees [transform.rotation_max_deg]");
  tr->add_option("--translation", train_translation, "Translation distance in pixels [transform.translation_px]");

  // infer / eval share inference flags
  struct InferFlags {
    std::string run, data, out;
    std::optional<std::string> scales, cam_source;
    std::optional<double> alpha;
    bool no_flip = false;
    ConfigSources src;
  };
  auto attach_infer = [](CLI::App* cmd, InferFlags& f) {
    cmd->add_option("--run", f.run, "Run directory with config.json and a checkpoint")->required();
    cmd->add_option("--data", f.data, "Dataset directory")->required();
    cmd->add_option("--out", f.out, "Output directory (new or empty)")->required();
    cmd->add_option("--scales", f.scales, "Comma-separated test scales [infer.scales]");
    cmd->add_flag("--no-flip", f.no_flip, "Disable the flipped test pass [infer.use_flip]");
    cmd->add_option("--alpha", f.alpha, "Background score for pseudo labels [infer.alpha]");
    cmd->add_option("--cam-source", f.cam_source, "auto | trunk | pcm [infer.cam_source]");
    f.src.attach(cmd);
  };
  auto infer_overrides = [](const InferFlags& f) {
    return [&f](RunConfig& cfg) {
      for (const auto& s : f.src.sets) apply_override(cfg, s);
      if (f.scales) cfg.infer.scales = parse_scale_list(*f.scales);
      if (f.no_flip) cfg.infer.use_flip = false;
      flag_into(f.alpha, cfg, "infer.alpha");
      flag_into(f.cam_source, cfg, "infer.cam_source");
    };
  };

  InferFlags infer_flags;
  auto* inf = app.add_subcommand("infer", "Export fused CAMs and pseudo-label masks");
  attach_infer(inf, infer_flags);

  InferFlags eval_flags;
  std::optional<double> eval_equiv;
  auto* ev = app.add_subcommand("eval", "Threshold sweep, mIoU, m_FN/m_FP and equivariance error");
  attach_infer(ev, eval_flags);
  ev->add_option("--equivariance-scale", eval_equiv, "Rescale rate of the equivariance probe [eval.equivariance_scale]");

  // ablate
  std::vector<std::string> ablate_runs;
  std::string ablate_data, ablate_out, ablate_scales = "0.5,1,1.5,2";
  std::vector<std::string> ablate_sets;
  auto* ab = app.add_subcommand("ablate", "Compare finished runs: best mIoU and per-scale m_FN/m_FP");
  ab->add_option("--runs", ablate_runs, "Run directories")->required()->take_all();
  ab->add_option("--data", ablate_data, "Evaluation dataset directory")->required();
  ab->add_option("--out", ablate_out, "Output directory (new or empty)")->required();
  ab->add_option("--test-scales", ablate_scales, "Comma-separated single test scales")->capture_default_str();
  ab->add_option("--set", ablate_sets, "Override config keys of every run")->take_all();

  // gradcheck
  GradcheckOptions gc_opt;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op and the full loss");
  gc->add_option("--seed", gc_opt.seed, "Seed of the random inputs")->capture_default_str();
  gc->add_option("--samples", gc_opt.samples_per_parameter, "Entries probed per parameter end to end")->capture_default_str();

  // print-config
  ConfigSources pc_src;
  auto* pc = app.add_subcommand("print-config", "Print the effective configuration (defaults without arguments)");
  pc_src.attach(pc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) {
      RunConfig cfg = gen_src.build();
      flag_into(gen_n, cfg, "data.count");
      flag_into(gen_size, cfg, "data.image_size");
      flag_into(gen_seed, cfg, "data.seed");
      if (gen_classes) cfg.data.classes = seam::split(*gen_classes, ',');
      cfg.validate();
      prepare_fresh_dir(gen_out);
      const auto m = generate_dataset(cfg.data.count, cfg.data.image_size, cfg.data.classes, cfg.data.seed, gen_out);
      std::cout << "wrote " << m.samples.size() << " samples to " << gen_out << "\n";
    } else if (*tr) {
      std::optional<RunConfig> base;
      if (train_resume) {
        if (!train_src.file.empty()) throw ConfigError("--resume reads the run's own config.json; drop --config");
        base = load_config(fs::path(train_out) / "config.json");
      }
      RunConfig cfg = train_src.build(base);
      flag_into(train_mode, cfg, "train.mode");
      flag_into(train_steps, cfg, "train.steps");
      flag_into(train_batch, cfg, "train.batch_size");
      flag_into(train_lr, cfg, "train.lr");
      flag_into(train_keep, cfg, "train.keep_fraction");
      flag_into(train_seed, cfg, "train.seed");
      flag_into(train_interval, cfg, "train.checkpoint_interval");
      flag_into(train_stop, cfg, "train.stop_after");
      flag_into(train_rescale, cfg, "transform.rescale");
      flag_into(train_rotation, cfg, "transform.rotation_max_deg");
      flag_into(train_translation, cfg, "transform.translation_px");
      const long every = std::max(1L, cfg.train.steps / 20);
      auto progress = [&](long step, const LossBundle& l) {
        if (train_quiet || (step + 1) % every != 0) return;
        std::printf("step %ld/%ld  l_cls %.4f  l_er %.4f  l_ecr %.4f  total %.4f\n", step + 1, cfg.train.steps, l.l_cls,
                    l.l_er, l.l_ecr, l.total);
        std::fflush(stdout);
      };
      const TrainResult r = run_train(cfg, train_data, train_out, train_resume, progress);
      std::cout << "trained " << to_string(cfg.train.mode) << " to step " << r.steps_done << " in " << train_out << "\n";
    } else if (*inf) {
      run_infer(infer_flags.run, infer_flags.data, infer_flags.out, infer_overrides(infer_flags));
      std::cout << "wrote CAMs and pseudo labels to " << infer_flags.out << "\n";
    } else if (*ev) {
      auto base = infer_overrides(eval_flags);
      const EvalOutcome out = run_eval(eval_flags.run, eval_flags.data, eval_flags.out, [&](RunConfig& cfg) {
        base(cfg);
        flag_into(eval_equiv, cfg, "eval.equivariance_scale");
      });
      print_eval(out.report);
    } else if (*ab) {
      std::vector<fs::path> runs(ablate_runs.begin(), ablate_runs.end());
      const auto rows = run_ablate(runs, ablate_data, ablate_out, parse_scale_list(ablate_scales), [&](RunConfig& cfg) {
        for (const auto& s : ablate_sets) apply_override(cfg, s);
      });
      std::cout << ablation_table(rows);
    } else if (*gc) {
      const auto start = std::chrono::steady_clock::now();
      auto results = gradcheck_ops(gc_opt);
      for (auto mode : {TrainMode::baseline, TrainMode::er, TrainMode::seam})
        results.push_back(gradcheck_end_to_end(gc_opt, mode, true));
      // Undetached ECR targets only carry gradient once OHEM keeps more than the CAM peaks.
      GradcheckOptions wide = gc_opt;
      wide.image_size = 32;
      results.push_back(gradcheck_end_to_end(wide, TrainMode::seam, false));
      results.back().name += "_undetached_32px";
      bool ok = true;
      std::printf("%-40s %12s %9s %8s %8s %6s\n", "op", "max_rel_err", "tolerance", "checked", "skipped", "result");
      for (const auto& r : results) {
        std::printf("%-40s %12.3e %9.0e %8zu %8zu %6s\n", r.name.c_str(), r.max_rel_error, r.tolerance, r.checked,
                    r.structural_zeros + r.kinks, r.passed() ? "ok" : "FAIL");
        ok = ok && r.passed();
      }
      const std::chrono::duration<double> took = std::chrono::steady_clock::now() - start;
      std::printf("%zu checks, %s, %.1f s\n", results.size(), ok ? "all passed" : "FAILED", took.count());
      if (!ok) return kExitNumeric;
    } else if (*pc) {
      RunConfig cfg = pc_src.build();
      cfg.validate();
      std::cout << config_text(cfg);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ParameterError& e) {
    std::cerr << "parameter error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitData;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
