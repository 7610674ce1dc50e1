#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lyaprobe/error.hpp"

namespace lyaprobe::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void put(T v) {
    bytes(&v, sizeof(T));
  }
  void str(std::string_view s) { bytes(s.data(), s.size()); }

  // Appends the checksum of everything written so far.
  void seal() { put<std::uint64_t>(fnv1a64(buf_)); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

  void need(std::size_t n) const {
    if (remaining() < n) {
      throw TruncatedError("unexpected end of data at offset " + std::to_string(pos_) +
                           " (needed " + std::to_string(n) + " bytes, " +
                           std::to_string(remaining()) + " left)");
    }
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void skip(std::size_t n) {
    need(n);
    pos_ += n;
  }

 private:
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Splits a sealed buffer into payload and verifies its trailing checksum.
// Throws TruncatedError when shorter than min_size, ChecksumError on mismatch.
std::span<const std::uint8_t> verify_sealed(std::span<const std::uint8_t> data,
                                            std::size_t min_size, std::string_view what);

}  // namespace lyaprobe::binio
