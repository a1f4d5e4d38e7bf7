#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "rsaforge/errors.hpp"
#include "rsaforge/tensor.hpp"

namespace rsaforge {

// Binary tensor file format, little-endian throughout:
//
//   "RDMT" | version u32 = 1 | name_len u32 | name bytes |
//   ndim u32 | dim u32 * ndim | payload f32 * prod(dims), row-major
//
// A multi-tensor archive is:
//
//   "RDMA" | version u32 = 1 | count u32 | count single-tensor records
//
// Files are written and parsed byte by byte so the layout is identical on
// every host, regardless of native endianness.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

// Reads exactly n bytes or throws TruncatedStreamError naming the shortfall.
inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  const std::size_t got = static_cast<std::size_t>(is.gcount());
  if (got != n)
    throw TruncatedStreamError(std::string("truncated stream while reading ") + what +
                               ": expected " + std::to_string(n) + " bytes, got " +
                               std::to_string(got));
}

inline std::uint32_t get_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  read_exact(is, reinterpret_cast<char*>(b), 4, what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace detail

inline constexpr std::uint32_t kTensorFormatVersion = 1;
inline constexpr std::size_t kMaxTensorName = 255;

inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("write_tensor: shape must be non-empty");
  if (name.size() > kMaxTensorName)
    throw ValueError("write_tensor: name longer than 255 bytes (" +
                     std::to_string(name.size()) + ")");
  os.write("RDMT", 4);
  detail::put_u32(os, kTensorFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) detail::put_f32(os, t[i]);
  if (!os) throw Error("write_tensor: stream write failed");
}

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline NamedTensor read_tensor(std::istream& is) {
  char magic[4];
  detail::read_exact(is, magic, 4, "magic");
  if (std::memcmp(magic, "RDMT", 4) != 0)
    throw FormatError(std::string("bad magic: expected \"RDMT\", got \"") +
                      std::string(magic, 4) + '"');
  const std::uint32_t version = detail::get_u32(is, "version");
  if (version != kTensorFormatVersion)
    throw FormatError("unsupported tensor format version " + std::to_string(version));
  const std::uint32_t name_len = detail::get_u32(is, "name length");
  if (name_len > kMaxTensorName)
    throw FormatError("tensor name length " + std::to_string(name_len) + " exceeds 255");
  std::string name(name_len, '\0');
  if (name_len) detail::read_exact(is, name.data(), name_len, "name");
  const std::uint32_t ndim = detail::get_u32(is, "ndim");
  if (ndim == 0 || ndim > 8) throw FormatError("tensor rank " + std::to_string(ndim) + " out of range [1,8]");
  std::vector<std::size_t> shape(ndim);
  for (auto& d : shape) {
    d = detail::get_u32(is, "dimension");
    if (d == 0) throw FormatError("tensor dimension of size 0");
  }
  const std::size_t numel = Tensor::checked_numel(shape);
  std::vector<float> data(numel);
  std::vector<unsigned char> raw(numel * 4);
  detail::read_exact(is, reinterpret_cast<char*>(raw.data()), raw.size(), "payload");
  for (std::size_t i = 0; i < numel; ++i) {
    const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                               (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                               (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                               (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    if (!std::isfinite(f))
      throw ValueError("non-finite value at flat index " + std::to_string(i) +
                       " in tensor \"" + name + '"');
    data[i] = f;
  }
  return NamedTensor{std::move(name), Tensor::from_data(std::move(shape), std::move(data))};
}

inline constexpr std::uint32_t kArchiveFormatVersion = 1;

inline void write_archive(std::ostream& os, const std::vector<NamedTensor>& records) {
  os.write("RDMA", 4);
  detail::put_u32(os, kArchiveFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) write_tensor(os, r.name, r.tensor);
}

inline std::vector<NamedTensor> read_archive(std::istream& is) {
  char magic[4];
  detail::read_exact(is, magic, 4, "archive magic");
  if (std::memcmp(magic, "RDMA", 4) != 0)
    throw FormatError(std::string("bad archive magic: expected \"RDMA\", got \"") +
                      std::string(magic, 4) + '"');
  const std::uint32_t version = detail::get_u32(is, "archive version");
  if (version != kArchiveFormatVersion)
    throw FormatError("unsupported archive format version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is, "archive record count");
  std::vector<NamedTensor> records;
  records.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) records.push_back(read_tensor(is));
  return records;
}

// File-path conveniences.

inline void write_tensor_file(const std::filesystem::path& path, const std::string& name,
                              const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path.string());
  write_tensor(os, name, t);
  if (!os) throw Error("write failed: " + path.string());
}

inline NamedTensor read_tensor_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path.string());
  return read_tensor(is);
}

inline void write_archive_file(const std::filesystem::path& path,
                               const std::vector<NamedTensor>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open for writing: " + path.string());
  write_archive(os, records);
  if (!os) throw Error("write failed: " + path.string());
}

inline std::vector<NamedTensor> read_archive_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open for reading: " + path.string());
  return read_archive(is);
}

} // namespace rsaforge
