#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "flns/errors.hpp"

namespace flns {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// Little-endian byte buffer writer for the checkpoint formats.
class BinaryWriter {
 public:
  void magic(std::string_view m) { bytes_.insert(bytes_.end(), m.begin(), m.end()); }
  template <typename T>
  void scalar(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void string(std::string_view s) {
    scalar(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void floats(const float* data, std::size_t n) {
    const auto* p = reinterpret_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n * sizeof(float));
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  std::vector<char> bytes_;
};

// Reader over a whole file image; any read past the end is a CorruptCheckpoint.
class BinaryReader {
 public:
  explicit BinaryReader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}

  void expect_magic(std::string_view m) {
    need(m.size());
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0) {
      throw Error(ErrorCode::kCorruptCheckpoint, "bad magic, expected " + std::string(m));
    }
    pos_ += m.size();
  }
  template <typename T>
  T scalar() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string string() {
    const auto n = scalar<std::uint32_t>();
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* out, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(out, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  // Fails unless at least n more bytes are available.
  void require(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::kCorruptCheckpoint, "truncated file");
  }
  void expect_end() const {
    if (pos_ != bytes_.size()) throw Error(ErrorCode::kCorruptCheckpoint, "trailing bytes after payload");
  }

 private:
  void need(std::size_t n) const { require(n); }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<char> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<char>& bytes);

}  // namespace flns
