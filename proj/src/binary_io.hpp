#pragma once

// Little-endian framing shared by the dataset and checkpoint files:
// 8 magic bytes, then a u32 version (checkpoints only), a u64 header length,
// the JSON header and a float64 payload.

#include "micn/errors.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace micn::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are written as native little-endian");

using micn::FormatError;
using micn::TruncatedError;

inline void append_bytes(std::string& buf, const void* p, std::size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void append_pod(std::string& buf, T v) {
  append_bytes(buf, &v, sizeof(T));
}

inline void append_doubles(std::string& buf, std::span<const double> v) {
  append_bytes(buf, v.data(), v.size_bytes());
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  void expect_magic(std::string_view magic, const std::string& what) {
    if (data_.size() < magic.size() || std::string_view(data_).substr(0, magic.size()) != magic) {
      throw FormatError(what + ": bad magic bytes");
    }
    pos_ = magic.size();
  }

  template <typename T>
  T pod(const std::string& what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::string out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  void doubles(std::span<double> out, const std::string& what) {
    need(out.size_bytes(), what);
    std::memcpy(out.data(), data_.data() + pos_, out.size_bytes());
    pos_ += out.size_bytes();
  }

  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (data_.size() - pos_ < n) throw TruncatedError(what + ": file is truncated");
  }

  std::string data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

/// Write through a temporary file and rename, so readers never observe a
/// partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace micn::io
