#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>

#include "seam/config.hpp"
#include "seam/metrics.hpp"

using namespace seam;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome cli(const std::string& args) {
  const std::string cmd = std::string(SEAM_CLI_PATH) + " " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  char buf[4096];
  std::size_t n = 0;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) o.out.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

/// One shared working area with a small training set, an evaluation set and two short runs.
class CliFixture : public testing::Test {
 protected:
  static fs::path root;

  static void SetUpTestSuite() {
    root = fs::path(testing::TempDir()) / "seam_cli_suite";
    fs::remove_all(root);
    fs::create_directories(root);
    run_ok("gen-data --n 12 --size 32 --seed 1 --out " + p("train"));
    run_ok("gen-data --n 6 --size 32 --seed 2 --out " + p("eval"));
    const std::string common = " --steps 4 --batch-size 3 --checkpoint-interval 2 --rescale 0.5 --quiet";
    run_ok("train --data " + p("train") + " --out " + p("base") + " --mode baseline" + common);
    run_ok("train --data " + p("train") + " --out " + p("seam") + " --mode seam" + common);
  }

  static std::string p(const std::string& name) { return (root / name).string(); }

  static void run_ok(const std::string& args) {
    const Outcome o = cli(args);
    ASSERT_EQ(o.code, 0) << args << "\n" << o.out;
  }
};

fs::path CliFixture::root;

}  // namespace

TEST_F(CliFixture, UsageErrors) {
  EXPECT_EQ(cli("").code, 2);
  EXPECT_EQ(cli("frobnicate").code, 2);
  EXPECT_EQ(cli("gen-data --n 3").code, 2);
  EXPECT_EQ(cli("gen-data --n 3 --out " + p("train")).code, 2);  // not a fresh directory
  EXPECT_EQ(cli("train --data " + p("train") + " --out " + p("u1") + " --set train.nonsense=1").code, 2);
  EXPECT_EQ(cli("train --data " + p("train") + " --out " + p("u2") + " --mode sideways").code, 2);
  EXPECT_EQ(cli("train --data " + p("train") + " --out " + p("u3") + " --lr -1").code, 2);
  EXPECT_EQ(cli("gen-data --help").code, 0);
}

TEST_F(CliFixture, GenDataIsDeterministic) {
  run_ok("gen-data --n 5 --size 32 --seed 1 --out " + p("again_a"));
  run_ok("gen-data --n 5 --size 32 --seed 1 --out " + p("again_b"));
  EXPECT_EQ(slurp(root / "again_a/manifest.txt"), slurp(root / "again_b/manifest.txt"));
  EXPECT_EQ(slurp(root / "again_a/images/s00004.ppm"), slurp(root / "again_b/images/s00004.ppm"));
  EXPECT_TRUE(fs::exists(root / "again_a/labels.csv"));
}

TEST_F(CliFixture, MissingDatasetIsADataError) {
  EXPECT_EQ(cli("train --data " + p("no_such_data") + " --out " + p("d1")).code, 3);
  EXPECT_EQ(cli("eval --run " + p("no_such_run") + " --data " + p("eval") + " --out " + p("d2")).code, 3);
}

TEST_F(CliFixture, NonFiniteLossExitsWithFour) {
  const Outcome o = cli("train --data " + p("train") + " --out " + p("nan") +
                        " --steps 20 --batch-size 2 --lr 1e300 --rescale 0.5 --quiet --set train.momentum=0");
  EXPECT_EQ(o.code, 4) << o.out;
  EXPECT_NE(o.out.find("non-finite"), std::string::npos) << o.out;
}

TEST_F(CliFixture, TrainWritesConfigLogAndCheckpoint) {
  for (const char* run : {"base", "seam"}) {
    const fs::path dir = root / run;
    EXPECT_TRUE(fs::exists(dir / "checkpoint.bin"));
    const std::string idx = slurp(dir / "checkpoint.idx");
    EXPECT_EQ(idx.substr(0, 7), "step 4\n");
    const RunConfig cfg = load_config(dir / "config.json");
    EXPECT_EQ(cfg.train.steps, 4);
    const std::string log = slurp(dir / "train_log.csv");
    EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 5);
  }
  const std::string base_log = slurp(root / "base/train_log.csv");
  std::istringstream is(base_log);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto parts = split(line, ',');
    EXPECT_EQ(parts[3], "0");
    EXPECT_EQ(parts[4], "0");
  }
  run_ok("train --data " + p("train") + " --out " + p("nomine") + " --mode seam --steps 2 --batch-size 2 --keep-fraction 1.0 --rescale 0.5 --quiet");
  EXPECT_EQ(load_config(root / "nomine/config.json").train.ohem.keep_fraction, 1.0);
}

TEST_F(CliFixture, ResumeReproducesTheUninterruptedRun) {
  const std::string common = " --mode seam --steps 4 --batch-size 3 --checkpoint-interval 2 --rescale 0.5 --quiet";
  run_ok("train --data " + p("train") + " --out " + p("part") + common + " --stop-after 2");
  EXPECT_EQ(slurp(root / "part/checkpoint.idx").substr(0, 7), "step 2\n");
  run_ok("train --data " + p("train") + " --out " + p("part") + " --resume --stop-after 0 --quiet");
  for (const char* f : {"train_log.csv", "checkpoint.bin", "checkpoint.idx"}) {
    EXPECT_EQ(slurp(root / "part" / f), slurp(root / "seam" / f)) << f;
  }
  EXPECT_EQ(cli("train --data " + p("train") + " --out " + p("never_started") + " --resume").code, 3);
}

TEST_F(CliFixture, EvalReportsAndSweep) {
  run_ok("eval --run " + p("seam") + " --data " + p("eval") + " --out " + p("ev_multi"));
  run_ok("eval --run " + p("seam") + " --data " + p("eval") + " --out " + p("ev_single") + " --scales 1.0 --no-flip");
  for (const char* d : {"ev_multi", "ev_single"}) {
    const Report r = Report::parse(slurp(root / d / "report.txt"));
    for (const char* key : {"mode", "best_alpha", "miou", "m_fn", "m_fp", "degenerate_classes", "equivariance_error",
                            "iou.background", "iou.circle", "iou.triangle", "iou.square", "cam_source"}) {
      EXPECT_TRUE(r.has(key)) << d << " " << key;
    }
    EXPECT_GE(r.number("miou"), 0.0);
    EXPECT_LE(r.number("miou"), 1.0);
    EXPECT_GT(r.number("best_alpha"), 0.0);
    EXPECT_LT(r.number("best_alpha"), 1.0);
    EXPECT_GE(r.number("m_fn"), 0.0);
    EXPECT_GE(r.number("m_fp"), 0.0);
    EXPECT_EQ(r.get("cam_source"), "pcm");
    const std::string sweep = slurp(root / d / "sweep.csv");
    EXPECT_EQ(std::count(sweep.begin(), sweep.end(), '\n'), 20);
  }
  EXPECT_EQ(Report::parse(slurp(root / "ev_single/report.txt")).get("scales"), "1");
  EXPECT_EQ(Report::parse(slurp(root / "ev_multi/report.txt")).get("scales"), "0.5,1,1.5,2");
}

TEST_F(CliFixture, EvalAgainstOwnPseudoLabelsIsPerfect) {
  run_ok("infer --run " + p("seam") + " --data " + p("eval") + " --out " + p("pseudo"));
  EXPECT_TRUE(fs::exists(root / "pseudo/cams/s00000.bin"));
  EXPECT_TRUE(fs::exists(root / "pseudo/masks/s00005.pgm"));
  run_ok("eval --run " + p("seam") + " --data " + p("pseudo") + " --out " + p("self_eval"));
  const Report r = Report::parse(slurp(root / "self_eval/report.txt"));
  EXPECT_EQ(r.number("miou_at_alpha_infer"), 1.0);
  EXPECT_EQ(r.number("miou"), 1.0);
}

TEST_F(CliFixture, CheckpointDimsMismatchIsAConfigError) {
  run_ok("gen-data --n 3 --size 32 --seed 3 --classes a,b --out " + p("two_class"));
  const Outcome o = cli("eval --run " + p("seam") + " --data " + p("two_class") + " --out " + p("mismatch"));
  EXPECT_EQ(o.code, 2) << o.out;
  EXPECT_NE(o.out.find("dims"), std::string::npos) << o.out;
}

TEST_F(CliFixture, AblateTablesAndDeterminism) {
  run_ok("ablate --runs " + p("base") + " " + p("seam") + " --data " + p("eval") + " --out " + p("ab1"));
  const std::string csv = slurp(root / "ab1/ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
  EXPECT_NE(csv.find("\nbase,baseline,none,"), std::string::npos);
  EXPECT_NE(csv.find("\nseam,seam,rescale0.50,"), std::string::npos) << csv;
  const std::string scales = slurp(root / "ab1/scales.csv");
  EXPECT_EQ(std::count(scales.begin(), scales.end(), '\n'), 9);
  for (const char* s : {",0.5,", ",1,", ",1.5,", ",2,"}) EXPECT_NE(scales.find(s), std::string::npos) << s;

  run_ok("ablate --runs " + p("seam") + " " + p("seam") + "/ --data " + p("eval") + " --out " + p("ab2"));
  const std::string twice = slurp(root / "ab2/ablation.csv");
  const auto first = twice.find('\n') + 1, second = twice.find('\n', first) + 1;
  EXPECT_EQ(twice.substr(first, second - first), twice.substr(second));
  EXPECT_EQ(cli("ablate --runs " + p("gone") + " --data " + p("eval") + " --out " + p("ab3")).code, 3);
}

TEST_F(CliFixture, RepeatedRunsAreByteIdentical) {
  const std::string common = " --mode seam --steps 4 --batch-size 3 --checkpoint-interval 2 --rescale 0.5 --quiet";
  run_ok("train --data " + p("train") + " --out " + p("twin") + common);
  for (const char* f : {"config.json", "train_log.csv", "checkpoint.bin", "checkpoint.idx"}) {
    EXPECT_EQ(slurp(root / "twin" / f), slurp(root / "seam" / f)) << f;
  }
  run_ok("eval --run " + p("twin") + " --data " + p("eval") + " --out " + p("twin_eval"));
  run_ok("eval --run " + p("seam") + " --data " + p("eval") + " --out " + p("seam_eval_b"));
  EXPECT_EQ(slurp(root / "twin_eval/report.txt"), slurp(root / "seam_eval_b/report.txt"));
  EXPECT_EQ(slurp(root / "twin_eval/sweep.csv"), slurp(root / "seam_eval_b/sweep.csv"));
}

TEST_F(CliFixture, PrintConfigAndConfigFiles) {
  const Outcome o = cli("print-config");
  ASSERT_EQ(o.code, 0);
  const RunConfig defaults = parse_config_text(o.out);
  EXPECT_EQ(config_text(defaults), config_text(RunConfig{}));
  detail::write_file(root / "cfg.json", R"({"train.steps": 3, "train.batch_size": 2, "train.mode": "er"})");
  run_ok("train --config " + p("cfg.json") + " --data " + p("train") + " --out " + p("from_file") + " --steps 2 --rescale 0.5 --quiet");
  const RunConfig used = load_config(root / "from_file/config.json");
  EXPECT_EQ(used.train.steps, 2);  // the flag wins over the file
  EXPECT_EQ(used.train.batch_size, 2u);
  EXPECT_EQ(used.train.mode, TrainMode::er);
  detail::write_file(root / "bad.json", R"({"train.step": 3})");
  EXPECT_EQ(cli("print-config --config " + p("bad.json")).code, 2);
}

TEST_F(CliFixture, GradcheckCommand) {
  const Outcome o = cli("gradcheck");
  EXPECT_EQ(o.code, 0) << o.out;
  EXPECT_NE(o.out.find("pcm_forward"), std::string::npos);
  EXPECT_NE(o.out.find("siamese_loss_seam"), std::string::npos);
  EXPECT_EQ(o.out.find("FAIL"), std::string::npos);
}
