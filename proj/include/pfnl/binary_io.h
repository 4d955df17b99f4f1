#pragma once

// Little-endian byte buffers with offset-tracking reads, shared by the bank
// and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "pfnl/error.h"

namespace pfnl {

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size);

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);

class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
  // u32 length prefix.
  void text(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  // Appends CRC32 of everything written so far.
  void finish_with_crc() { u32(crc32_of(buf_.data(), buf_.size())); }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

 private:
  template <class T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string out(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return out;
  }
  std::uint8_t u8(const char* what) { return get<std::uint8_t>(what); }
  std::uint16_t u16(const char* what) { return get<std::uint16_t>(what); }
  std::uint32_t u32(const char* what) { return get<std::uint32_t>(what); }
  std::uint64_t u64(const char* what) { return get<std::uint64_t>(what); }
  float f32(const char* what) { return std::bit_cast<float>(get<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(get<std::uint64_t>(what)); }
  std::string text(const char* what) {
    const std::uint32_t n = u32(what);
    return bytes(n, what);
  }

  // Validates the trailing CRC32 over all bytes before it; the reader must be
  // positioned exactly at the trailer.
  void verify_crc() {
    const std::size_t at = pos_;
    if (remaining() != 4) {
      throw FormatError(remaining() < 4 ? "truncated file: missing CRC32 trailer"
                                        : "trailing bytes before CRC32 trailer",
                        at);
    }
    const std::uint32_t stored = u32("CRC32");
    const std::uint32_t actual = crc32_of(buf_.data(), at);
    if (stored != actual) throw FormatError("CRC mismatch", at);
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
  }
  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<T>(buf_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return v;
  }

  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace pfnl
