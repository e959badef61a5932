#include <gtest/gtest.h>

#include <cmath>
#include <array>
#include <filesystem>
#include <set>

#include "seam/config.hpp"
#include "seam/dataset.hpp"

using namespace seam;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(testing::TempDir()) / ("seam_dataset_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) { return detail::read_file(p); }

}  // namespace

TEST(Generator, DeterministicFiles) {
  const auto a = scratch("det_a"), b = scratch("det_b");
  generate_dataset(1, 64, default_class_names(), 42, a);
  generate_dataset(1, 64, default_class_names(), 42, b);
  for (const char* f : {"manifest.txt", "labels.csv", "images/s00000.ppm", "masks/s00000.pgm"}) {
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  const auto c = scratch("det_c");
  generate_dataset(1, 64, default_class_names(), 43, c);
  EXPECT_NE(slurp(a / "images/s00000.ppm"), slurp(c / "images/s00000.ppm"));
}

TEST(Generator, LabelsMatchMasksAndShapesStayInside) {
  for (std::size_t i = 0; i < 300; ++i) {
    const ImageSample s = generate_sample(i, 64, 3, 7);
    ASSERT_TRUE(s.gt.has_value());
    EXPECT_EQ(s.label, label_from_mask(*s.gt, 3)) << s.id;
    const int present = s.label[0] + s.label[1] + s.label[2];
    EXPECT_GE(present, 1);
    EXPECT_LE(present, 3);
    const Mask& m = *s.gt;
    for (std::size_t k = 0; k < 64; ++k) {
      ASSERT_EQ(m.at(0, k), 0) << s.id;
      ASSERT_EQ(m.at(63, k), 0) << s.id;
      ASSERT_EQ(m.at(k, 0), 0) << s.id;
      ASSERT_EQ(m.at(k, 63), 0) << s.id;
    }
    for (double v : s.image.values()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
      ASSERT_EQ(std::round(v * 255.0), v * 255.0);
    }
  }
}

TEST(Generator, ClassFrequencyIsRoughlyUniform) {
  std::array<int, 3> count{};
  for (std::size_t i = 0; i < 1000; ++i) {
    const ImageSample s = generate_sample(i, 48, 3, 11);
    for (std::size_t c = 0; c < 3; ++c) count[c] += s.label[c];
  }
  const double mean = (count[0] + count[1] + count[2]) / 3.0;
  for (int c : count) EXPECT_NEAR(c, mean, 0.1 * mean);
}

TEST(Generator, TexturedShapesAreNotFlat) {
  // Circles and triangles carry texture: their pixels take at least two distinct colors.
  for (std::size_t i = 0; i < 40; ++i) {
    const ImageSample s = generate_sample(i, 64, 3, 3);
    for (std::uint8_t cls : {1, 2}) {
      std::set<double> reds;
      for (std::size_t p = 0; p < 64 * 64; ++p)
        if (s.gt->ids[p] == cls) reds.insert(std::round(s.image[p] * 10.0));
      if (!reds.empty()) {
        EXPECT_GE(reds.size(), 2u) << s.id << " class " << int(cls);
      }
    }
  }
}

TEST(Generator, Preconditions) {
  const auto d = scratch("pre");
  EXPECT_THROW(generate_dataset(0, 64, default_class_names(), 1, d), ParameterError);
  EXPECT_THROW(generate_dataset(1, 31, default_class_names(), 1, d), ParameterError);
  const auto file = d / "blocker";
  detail::write_file(file, "x");
  EXPECT_THROW(generate_dataset(1, 64, default_class_names(), 1, file / "sub"), IoError);
}

TEST(SampleIo, RoundTrip) {
  const auto d = scratch("rt");
  const ImageSample s = generate_sample(3, 40, 3, 5);
  save_sample(s, d / "a.ppm", d / "a.pgm");
  const ImageSample back = load_sample("x", d / "a.ppm", d / "a.pgm", 3);
  EXPECT_EQ(*back.gt, *s.gt);
  EXPECT_EQ(back.label, s.label);
  for (std::size_t i = 0; i < s.image.numel(); ++i) EXPECT_LE(std::abs(back.image[i] - s.image[i]), 1.0 / 255.0);

  Tensor odd({3, 2, 2}, {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 0.33});
  write_ppm(d / "odd.ppm", odd);
  const Tensor r = read_ppm(d / "odd.ppm");
  for (std::size_t i = 0; i < odd.numel(); ++i) EXPECT_LE(std::abs(r[i] - odd[i]), 0.5 / 255.0 + 1e-15);
}

TEST(SampleIo, MalformedFiles) {
  const auto d = scratch("bad");
  const ImageSample s = generate_sample(0, 32, 3, 1);
  save_sample(s, d / "a.ppm", d / "a.pgm");
  std::string bytes = slurp(d / "a.ppm");
  detail::write_file(d / "trunc.ppm", bytes.substr(0, bytes.size() - 10));
  try {
    read_ppm(d / "trunc.ppm");
    FAIL() << "truncated image accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), bytes.size() - 10);
  }
  EXPECT_THROW(load_sample("t", d / "trunc.ppm", d / "a.pgm", 3), ParseError);
  detail::write_file(d / "magic.ppm", "P3\n2 2\n255\n");
  try {
    read_ppm(d / "magic.ppm");
    FAIL() << "wrong magic accepted";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  detail::write_file(d / "maxval.pgm", "P5\n# comment\n2 2\n65535\n");
  try {
    read_pgm(d / "maxval.pgm");
    FAIL() << "16-bit maxval accepted";
  } catch (const ParseError& e) {
    EXPECT_GT(e.offset(), 10u);
  }
  Mask m(2, 2);
  m.ids = {0, 7, 0, 0};
  write_pgm(d / "ids.pgm", m);
  EXPECT_THROW(load_sample("ids", d / "a.ppm", d / "ids.pgm", 3), DataError);
}

TEST(Manifest, RoundTripAndValidation) {
  const auto d = scratch("manifest");
  const DatasetManifest m = generate_dataset(4, 32, {"a", "b"}, 9, d);
  const DatasetManifest back = read_manifest(d);
  EXPECT_EQ(back.class_names, (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(back.image_size, 32u);
  EXPECT_EQ(back.seed, 9u);
  ASSERT_EQ(back.samples.size(), 4u);
  EXPECT_EQ(back.samples[2].image_path, "images/s00002.ppm");
  const Dataset ds = load_dataset(d);
  EXPECT_EQ(ds.num_classes(), 2u);
  EXPECT_EQ(ds.samples.size(), 4u);
  const std::string labels = slurp(d / "labels.csv");
  EXPECT_EQ(labels.substr(0, labels.find('\n')), "id,a,b");

  fs::remove(d / "masks/s00001.pgm");
  try {
    load_dataset(d);
    FAIL() << "missing mask accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("s00001"), std::string::npos);
    EXPECT_EQ(std::string(e.what()).find("s00002"), std::string::npos);
  }
  EXPECT_THROW(load_dataset(scratch("nothing")), DataError);

  const auto e = scratch("manifest_bad");
  detail::write_file(e / "manifest.txt", "version=1\nimage_size=32\nbogus\n");
  try {
    read_manifest(e);
    FAIL();
  } catch (const ParseError& err) {
    EXPECT_EQ(err.offset(), 24u);
  }
  detail::write_file(e / "manifest.txt", "version=1\ncount=2\nsample=a,b,c\n");
  EXPECT_THROW(read_manifest(e), DataError);
}

TEST(Config, DefaultsRoundTrip) {
  const RunConfig defaults;
  EXPECT_NO_THROW(defaults.validate());
  const std::string text = config_text(defaults);
  const RunConfig back = parse_config_text(text);
  EXPECT_EQ(config_text(back), text);
  const auto j = nlohmann::ordered_json::parse(text);
  EXPECT_EQ(j.size(), config_key_names().size());
  EXPECT_EQ(j["train.lr"], 0.01);
  EXPECT_EQ(j["train.poly_gamma"], 0.9);
  EXPECT_EQ(j["train.keep_fraction"], 0.2);
  EXPECT_EQ(j["train.batch_size"], 8);
  EXPECT_EQ(j["transform.rescale"], 0.3);
  EXPECT_TRUE(j["transform.rotation_max_deg"].is_null());
  EXPECT_EQ(j["infer.alpha"], 0.25);
  EXPECT_EQ(j["train.mode"], "seam");
}

TEST(Config, OverridesAndErrors) {
  RunConfig c = parse_config_text(R"({"train.steps": 7, "transform": {"rescale": null, "flip": true}})");
  EXPECT_EQ(c.train.steps, 7);
  EXPECT_FALSE(c.train.transform.rescale.has_value());
  EXPECT_TRUE(c.train.transform.flip);
  apply_override(c, "train.mode=baseline");
  apply_override(c, "infer.scales=[1.0,2.0]");
  apply_override(c, "transform.translation_px=15");
  EXPECT_EQ(c.train.mode, TrainMode::baseline);
  EXPECT_EQ(c.infer.scales, (std::vector<double>{1.0, 2.0}));
  EXPECT_EQ(*c.train.transform.translation_px, 15);

  EXPECT_THROW(parse_config_text(R"({"train.stpes": 7})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train.steps": "many"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train.steps": 1.5})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train.batch_size": -1})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train.mode": "fancy"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"infer.cam_source": "elsewhere"})"), ConfigError);
  EXPECT_THROW(parse_config_text(R"([1,2])"), ConfigError);
  EXPECT_THROW(parse_config_text(R"({"train.steps": )"), ParseError);
  EXPECT_THROW(apply_override(c, "novalue"), ConfigError);
  RunConfig bad;
  bad.train.lr_init = -1.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = RunConfig{};
  bad.infer.scales.clear();
  EXPECT_THROW(bad.validate(), ConfigError);
}
