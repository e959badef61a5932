#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "seam/cam.hpp"
#include "seam/errors.hpp"
#include "seam/tensor.hpp"

namespace seam {

namespace fs = std::filesystem;

/// One image with its image-level label and (for evaluation only) its pixel mask.
struct ImageSample {
  std::string id;
  Tensor image;             // [3,H,W] in [0,1]
  std::vector<int> label;   // multi-hot over foreground classes
  std::optional<Mask> gt;   // 0 = background, k+1 = foreground class k
};

struct DatasetManifest {
  int version = 1;
  std::size_t image_size = 64;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  struct Entry {
    std::string id;
    std::string image_path;  // relative to the dataset root
    std::string mask_path;
  };
  std::vector<Entry> samples;
};

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"circle", "triangle", "square"};
  return names;
}

// ---------------------------------------------------------------------------
// PPM / PGM
// ---------------------------------------------------------------------------

namespace detail {

struct NetpbmHeader {
  std::size_t width = 0, height = 0, payload_offset = 0;
};

inline NetpbmHeader parse_netpbm_header(const std::string& bytes, const char* magic, const std::string& name) {
  std::size_t pos = 0;
  if (bytes.size() < 2 || bytes.compare(0, 2, magic) != 0) {
    throw ParseError(name + ": expected magic " + magic, 0);
  }
  pos = 2;
  auto next_number = [&](const char* what) -> std::size_t {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 20)) throw ParseError(name + ": " + what + " out of range", start);
      ++pos;
    }
    if (pos == start) throw ParseError(name + ": expected " + std::string(what), start);
    return v;
  };
  NetpbmHeader h;
  h.width = next_number("width");
  h.height = next_number("height");
  const std::size_t maxval_at = pos;
  if (next_number("maxval") != 255) throw ParseError(name + ": only maxval 255 is supported", maxval_at);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ParseError(name + ": missing whitespace after header", pos);
  }
  h.payload_offset = pos + 1;
  if (h.width == 0 || h.height == 0) throw ParseError(name + ": zero image extent", 2);
  return h;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace detail

/// Binary PPM (P6, maxval 255) from a [3,H,W] tensor in [0,1].
inline void write_ppm(const fs::path& path, const Tensor& image) {
  require_rank(image, 3, "write_ppm");
  if (image.dim(0) != 3) throw DimensionError("write_ppm: axis 0 must be 3 channels, got " + to_string(image.shape()));
  const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
  std::string bytes = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  bytes.reserve(bytes.size() + 3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = std::clamp(image[c * plane + p], 0.0, 1.0);
      bytes.push_back(static_cast<char>(static_cast<std::uint8_t>(std::lround(v * 255.0))));
    }
  detail::write_file(path, bytes);
}

inline Tensor read_ppm(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  const auto hdr = detail::parse_netpbm_header(bytes, "P6", path.string());
  const std::size_t plane = hdr.width * hdr.height;
  if (bytes.size() < hdr.payload_offset + 3 * plane) {
    throw ParseError(path.string() + ": truncated pixel payload", bytes.size());
  }
  std::vector<double> values(3 * plane);
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t c = 0; c < 3; ++c)
      values[c * plane + p] = static_cast<std::uint8_t>(bytes[hdr.payload_offset + 3 * p + c]) / 255.0;
  return Tensor({3, hdr.height, hdr.width}, std::move(values));
}

/// Binary PGM (P5) with class ids as gray levels.
inline void write_pgm(const fs::path& path, const Mask& mask) {
  std::string bytes = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
  bytes.append(mask.ids.begin(), mask.ids.end());
  detail::write_file(path, bytes);
}

inline Mask read_pgm(const fs::path& path) {
  const std::string bytes = detail::read_file(path);
  const auto hdr = detail::parse_netpbm_header(bytes, "P5", path.string());
  if (bytes.size() < hdr.payload_offset + hdr.width * hdr.height) {
    throw ParseError(path.string() + ": truncated pixel payload", bytes.size());
  }
  Mask m(hdr.height, hdr.width);
  std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(hdr.payload_offset), m.ids.size(), m.ids.begin());
  return m;
}

/// Multi-hot label implied by a mask.
inline std::vector<int> label_from_mask(const Mask& m, std::size_t num_classes) {
  std::vector<int> label(num_classes, 0);
  for (auto id : m.ids) {
    if (id == 0) continue;
    if (id > num_classes) throw DataError("mask holds class id " + std::to_string(id) + " beyond " +
                                          std::to_string(num_classes) + " classes");
    label[id - 1] = 1;
  }
  return label;
}

inline void save_sample(const ImageSample& s, const fs::path& image_path, const fs::path& mask_path) {
  write_ppm(image_path, s.image);
  if (s.gt) write_pgm(mask_path, *s.gt);
}

/// Loads an image (and mask when a path is given). Nothing is returned on a parse failure.
inline ImageSample load_sample(const std::string& id, const fs::path& image_path, const fs::path& mask_path,
                               std::size_t num_classes) {
  ImageSample s;
  s.id = id;
  s.image = read_ppm(image_path);
  if (!mask_path.empty()) {
    Mask m = read_pgm(mask_path);
    if (m.height != s.image.dim(1) || m.width != s.image.dim(2)) {
      throw DataError("sample " + id + ": mask size differs from image size");
    }
    s.label = label_from_mask(m, num_classes);
    s.gt = std::move(m);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

class SampleRng {
 public:
  explicit SampleRng(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo = 0.0, double hi = 1.0) { return lo + (hi - lo) * unit_uniform(rng_); }
  std::size_t below(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }

 private:
  std::mt19937_64 rng_;
};

struct Placed {
  std::size_t cls;
  double cx, cy, r;
};

inline bool covers(const Placed& s, std::size_t kind, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  switch (kind % 3) {
    case 0:  // circle
      return dx * dx + dy * dy <= s.r * s.r;
    case 1: {  // upward triangle inscribed in the bounding circle
      const double top = s.cy - s.r, base = s.cy + 0.5 * s.r;
      if (y < top || y > base) return false;
      const double half = (y - top) / (base - top) * (s.r * std::sqrt(3.0) / 2.0);
      return std::abs(dx) <= half;
    }
    default: {  // axis-aligned square inscribed in the bounding circle
      const double half = s.r / std::sqrt(2.0);
      return std::abs(dx) <= half && std::abs(dy) <= half;
    }
  }
}

inline bool textured_primary(std::size_t kind, std::size_t x, std::size_t y) {
  switch (kind % 3) {
    case 0:
      return ((x + y) / 3) % 2 == 0;  // diagonal stripes
    case 1:
      return (x % 4 < 2) && (y % 4 < 2);  // dots
    default:
      return true;  // solid
  }
}

}  // namespace detail

/// Deterministically generates sample `index` of a dataset seeded with `seed`.
/// Shapes of distinct classes never overlap and never touch the border.
inline ImageSample generate_sample(std::size_t index, std::size_t size, std::size_t num_classes, std::uint64_t seed) {
  detail::SampleRng rng(detail::mix_seed(seed, index));
  const std::size_t plane = size * size;
  std::array<double, 3> bg{};
  for (auto& v : bg) v = rng.uniform(0.1, 0.9);

  std::vector<std::size_t> order(num_classes);
  for (std::size_t i = 0; i < num_classes; ++i) order[i] = i;
  for (std::size_t i = num_classes; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  const std::size_t count = 1 + rng.below(std::min<std::size_t>(3, num_classes));

  const double s = static_cast<double>(size);
  std::vector<detail::Placed> placed;
  for (std::size_t k = 0; k < count; ++k) {
    double r_hi = 0.22 * s;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 0 && attempt % 50 == 0) r_hi = std::max(0.12 * s, r_hi * 0.9);
      const double r = rng.uniform(0.12 * s, r_hi);
      const double lo = r + 1.0, hi = s - 2.0 - r;
      const detail::Placed cand{order[k], rng.uniform(lo, hi), rng.uniform(lo, hi), r};
      bool clear = true;
      for (const auto& p : placed) {
        const double d = std::hypot(p.cx - cand.cx, p.cy - cand.cy);
        if (d < p.r + cand.r + 2.0) clear = false;
      }
      if (clear) {
        placed.push_back(cand);
        break;
      }
    }
  }

  std::vector<double> pixels(3 * plane);
  Mask mask(size, size);
  std::vector<std::array<double, 6>> colors;
  for (std::size_t k = 0; k < placed.size(); ++k) {
    std::array<double, 6> c{};
    double contrast = 0.0;
    while (contrast < 0.6) {
      for (auto& v : c) v = rng.uniform(0.0, 1.0);
      contrast = std::abs(c[0] - bg[0]) + std::abs(c[1] - bg[1]) + std::abs(c[2] - bg[2]);
    }
    colors.push_back(c);
  }
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      std::array<double, 3> px = bg;
      for (std::size_t k = 0; k < placed.size(); ++k) {
        const auto& sh = placed[k];
        if (!detail::covers(sh, sh.cls, static_cast<double>(x), static_cast<double>(y))) continue;
        const bool primary = detail::textured_primary(sh.cls, x, y);
        for (int c = 0; c < 3; ++c) px[c] = colors[k][primary ? c : c + 3];
        mask.at(y, x) = static_cast<std::uint8_t>(sh.cls + 1);
      }
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(px[c] + rng.uniform(-0.04, 0.04), 0.0, 1.0);
        pixels[c * plane + y * size + x] = std::round(v * 255.0) / 255.0;
      }
    }
  }
  char id[32];
  std::snprintf(id, sizeof id, "s%05zu", index);
  ImageSample sample;
  sample.id = id;
  sample.image = Tensor({3, size, size}, std::move(pixels));
  sample.label = label_from_mask(mask, num_classes);
  sample.gt = std::move(mask);
  return sample;
}

inline void write_manifest(const fs::path& root, const DatasetManifest& m) {
  std::ostringstream os;
  os << "version=" << m.version << "\n";
  os << "image_size=" << m.image_size << "\n";
  os << "classes=";
  for (std::size_t i = 0; i < m.class_names.size(); ++i) os << (i ? "," : "") << m.class_names[i];
  os << "\ncount=" << m.samples.size() << "\n";
  os << "seed=" << m.seed << "\n";
  for (const auto& e : m.samples) os << "sample=" << e.id << "," << e.image_path << "," << e.mask_path << "\n";
  detail::write_file(root / "manifest.txt", os.str());
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : s) {
    if (ch == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  return parts;
}

inline DatasetManifest read_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.txt";
  if (!fs::exists(path)) throw DataError("dataset manifest not found: " + path.string());
  const std::string text = detail::read_file(path);
  DatasetManifest m;
  std::size_t declared = 0;
  std::size_t offset = 0;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const std::size_t line_at = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(path.string() + ": expected key=value", line_at);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    try {
      if (key == "version") {
        m.version = std::stoi(val);
      } else if (key == "image_size") {
        m.image_size = std::stoul(val);
      } else if (key == "classes") {
        m.class_names = split(val, ',');
      } else if (key == "count") {
        declared = std::stoul(val);
      } else if (key == "seed") {
        m.seed = std::stoull(val);
      } else if (key == "sample") {
        auto parts = split(val, ',');
        if (parts.size() != 3) throw ParseError(path.string() + ": sample lines need id,image,mask", line_at);
        m.samples.push_back({parts[0], parts[1], parts[2]});
      } else {
        throw ParseError(path.string() + ": unknown key '" + key + "'", line_at);
      }
    } catch (const std::logic_error&) {
      throw ParseError(path.string() + ": bad value for '" + key + "'", line_at + eq + 1);
    }
  }
  if (m.version != 1) throw DataError(path.string() + ": unsupported manifest version " + std::to_string(m.version));
  if (declared != m.samples.size()) {
    throw DataError(path.string() + ": count=" + std::to_string(declared) + " but " +
                    std::to_string(m.samples.size()) + " sample lines");
  }
  return m;
}

/// Throws DataError listing every sample id whose files are missing or fail to parse.
inline void validate_manifest(const fs::path& root, const DatasetManifest& m) {
  std::vector<std::string> bad;
  for (const auto& e : m.samples) {
    try {
      load_sample(e.id, root / e.image_path, e.mask_path.empty() ? fs::path{} : root / e.mask_path,
                  m.class_names.size());
    } catch (const Error&) {
      bad.push_back(e.id);
    }
  }
  if (!bad.empty()) {
    std::string ids;
    for (const auto& id : bad) ids += (ids.empty() ? "" : ", ") + id;
    throw DataError("dataset " + root.string() + ": unreadable or missing samples: " + ids);
  }
}

inline void write_labels_csv(const fs::path& root, const DatasetManifest& m, const std::vector<ImageSample>& samples) {
  std::ostringstream os;
  os << "id";
  for (const auto& c : m.class_names) os << "," << c;
  os << "\n";
  for (const auto& s : samples) {
    os << s.id;
    for (int l : s.label) os << "," << l;
    os << "\n";
  }
  detail::write_file(root / "labels.csv", os.str());
}

/// Writes manifest.txt, labels.csv, images/<id>.ppm and masks/<id>.pgm under out_dir.
inline DatasetManifest generate_dataset(std::size_t n, std::size_t size, const std::vector<std::string>& classes,
                                        std::uint64_t seed, const fs::path& out_dir) {
  if (n < 1) throw ParameterError("generate_dataset: n must be >= 1");
  if (size < 32) throw ParameterError("generate_dataset: size must be >= 32");
  if (classes.empty() || classes.size() > 254) throw ParameterError("generate_dataset: need 1..254 classes");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  fs::create_directories(out_dir / "masks", ec);
  if (ec || !fs::is_directory(out_dir / "images")) {
    throw IoError("cannot create dataset directories under " + out_dir.string());
  }
  DatasetManifest m;
  m.image_size = size;
  m.class_names = classes;
  m.seed = seed;
  std::vector<ImageSample> samples;
  samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    ImageSample s = generate_sample(i, size, classes.size(), seed);
    const std::string img = "images/" + s.id + ".ppm", msk = "masks/" + s.id + ".pgm";
    save_sample(s, out_dir / img, out_dir / msk);
    m.samples.push_back({s.id, img, msk});
    samples.push_back(std::move(s));
  }
  write_labels_csv(out_dir, m, samples);
  write_manifest(out_dir, m);
  return m;
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<ImageSample> samples;
  std::size_t num_classes() const { return manifest.class_names.size(); }
};

inline Dataset load_dataset(const fs::path& root) {
  Dataset d;
  d.manifest = read_manifest(root);
  validate_manifest(root, d.manifest);
  for (const auto& e : d.manifest.samples) {
    d.samples.push_back(load_sample(e.id, root / e.image_path, e.mask_path.empty() ? fs::path{} : root / e.mask_path,
                                    d.manifest.class_names.size()));
  }
  return d;
}

}  // namespace seam
