#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "seam/tensor.hpp"

namespace seam {

/// On-disk tensor record:
///   "SEAM" | u32 version | u32 ndim | u32 dims[ndim] | payload (row-major, little endian)
/// Version 1 stores float32 values; version 2 stores float64 values and is used
/// where a lossless round trip matters (checkpoints).
enum class TensorEncoding : std::uint32_t { float32 = 1, float64 = 2 };

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b, 8);
}

class ByteReader {
 public:
  ByteReader(std::istream& is, std::size_t base) : is_(is), offset_(base) {}

  void read(void* dst, std::size_t n, const char* what) {
    is_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw ParseError(std::string("truncated tensor record while reading ") + what,
                       offset_ + static_cast<std::size_t>(is_.gcount()));
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  std::uint64_t u64(const char* what) {
    unsigned char b[8];
    read(b, 8, what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
  }

  std::size_t offset() const { return offset_; }

 private:
  std::istream& is_;
  std::size_t offset_;
};

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t, TensorEncoding enc = TensorEncoding::float32) {
  os.write("SEAM", 4);
  detail::put_u32(os, static_cast<std::uint32_t>(enc));
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (double v : t.values()) {
    if (enc == TensorEncoding::float32) {
      detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    } else {
      detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
  }
}

/// Reads one record. `base_offset` is the stream position used in error messages.
inline Tensor read_tensor(std::istream& is, std::size_t base_offset = 0) {
  detail::ByteReader r(is, base_offset);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, "SEAM", 4) != 0) throw ParseError("bad tensor magic (expected \"SEAM\")", base_offset);
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != 1 && version != 2) {
    throw ParseError("unsupported tensor format version " + std::to_string(version), version_at);
  }
  const std::size_t ndim_at = r.offset();
  const std::uint32_t ndim = r.u32("ndim");
  if (ndim > 8) throw ParseError("implausible tensor rank " + std::to_string(ndim), ndim_at);
  Shape shape(ndim);
  for (auto& d : shape) d = r.u32("dims");
  std::vector<double> values(seam::numel(shape));
  for (auto& v : values) {
    v = version == 1 ? static_cast<double>(std::bit_cast<float>(r.u32("payload")))
                     : std::bit_cast<double>(r.u64("payload"));
  }
  return Tensor(std::move(shape), std::move(values));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t,
                        TensorEncoding enc = TensorEncoding::float32) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t, enc);
  if (!os) throw IoError("failed writing " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor(is, 0);
}

}  // namespace seam
