#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "n3d/errors.hpp"

namespace n3d {

// Little-endian writer over a growing byte buffer.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void f32(float v) {
    std::uint32_t u;
    std::memcpy(&u, &v, 4);
    u32(u);
  }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void raw(const std::string& s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  // u16 length prefix, then the bytes.
  void str16(const std::string& s) {
    if (s.size() > 0xFFFF) throw ContractError("string too long for a u16 length prefix");
    u16(static_cast<std::uint16_t>(s.size()));
    raw(s);
  }
  // LSB-first, padded to a whole byte.
  void bits(std::span<const std::uint8_t> flags) {
    std::vector<std::uint8_t> packed((flags.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < flags.size(); ++i)
      if (flags[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    bytes(packed);
  }

  std::size_t size() const { return buf_.size(); }
  std::vector<std::uint8_t>& buffer() { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked little-endian reader; every failure names the byte offset.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : d_(data) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return d_.size() - pos_; }
  bool done() const { return pos_ == d_.size(); }

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(get(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  float f32() {
    const std::uint32_t u = u32();
    float v;
    std::memcpy(&v, &u, 4);
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = d_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    auto b = bytes(n);
    return std::string(b.begin(), b.end());
  }
  std::string str16() { return raw(u16()); }
  std::vector<std::uint8_t> bits(std::size_t count) {
    auto b = bytes((count + 7) / 8);
    std::vector<std::uint8_t> flags(count);
    for (std::size_t i = 0; i < count; ++i) flags[i] = (b[i / 8] >> (i % 8)) & 1u;
    return flags;
  }

  [[noreturn]] void fail(const std::string& what, std::size_t at) const { throw FormatError(what, at); }
  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, pos_); }

 private:
  void need(std::size_t n) const {
    if (n > remaining())
      fail("truncated: need " + std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left");
  }
  std::uint64_t get(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(d_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::uint8_t> d_;
  std::size_t pos_ = 0;
};

}  // namespace n3d
