#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "revcs/common.hpp"

// Little-endian fixed-width binary I/O for the RCSA/RCSC/RCSI/RCSM containers.
namespace revcs::binio {

class Writer {
 public:
  explicit Writer(const std::string& path) : path_(path), os_(path, std::ios::binary) {
    require(os_.good(), Errc::io_error, "cannot open for writing: " + path);
  }

  void bytes(const void* p, size_t n) { os_.write(static_cast<const char*>(p), std::streamsize(n)); }
  void magic(const char m[4]) { bytes(m, 4); }
  void u16(uint16_t v) { put_le(v); }
  void u32(uint32_t v) { put_le(v); }
  void u64(uint64_t v) { put_le(v); }
  void f32(float v) {
    uint32_t b;
    std::memcpy(&b, &v, 4);
    put_le(b);
  }
  void f64(double v) {
    uint64_t b;
    std::memcpy(&b, &v, 8);
    put_le(b);
  }
  void f32_array(const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) f32(p[i]);
  }
  void str(const std::string& s) {
    u32(uint32_t(s.size()));
    bytes(s.data(), s.size());
  }
  void close() {
    os_.close();
    require(os_.good(), Errc::io_error, "write failed: " + path_);
  }

 private:
  template <typename U>
  void put_le(U v) {
    unsigned char b[sizeof(U)];
    for (size_t i = 0; i < sizeof(U); ++i) b[i] = (unsigned char)(v >> (8 * i));
    bytes(b, sizeof(U));
  }
  std::string path_;
  std::ofstream os_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : path_(path), is_(path, std::ios::binary) {
    require(is_.good(), Errc::io_error, "cannot open: " + path);
  }

  size_t offset() const { return offset_; }

  void bytes(void* p, size_t n) {
    is_.read(static_cast<char*>(p), std::streamsize(n));
    if (size_t(is_.gcount()) != n)
      fail(Errc::parse_error,
           path_ + ": truncated at byte offset " + std::to_string(offset_ + size_t(is_.gcount())));
    offset_ += n;
  }
  void expect_magic(const char m[4]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, m, 4) != 0)
      fail(Errc::parse_error, path_ + ": bad magic at byte offset 0, expected " +
                                  std::string(m, 4) + " got " + std::string(got, 4));
  }
  uint16_t u16() { return get_le<uint16_t>(); }
  uint32_t u32() { return get_le<uint32_t>(); }
  uint64_t u64() { return get_le<uint64_t>(); }
  float f32() {
    uint32_t b = get_le<uint32_t>();
    float v;
    std::memcpy(&v, &b, 4);
    return v;
  }
  double f64() {
    uint64_t b = get_le<uint64_t>();
    double v;
    std::memcpy(&v, &b, 8);
    return v;
  }
  void f32_array(float* p, size_t n) {
    for (size_t i = 0; i < n; ++i) p[i] = f32();
  }
  std::string str() {
    uint32_t n = u32();
    require(n < (1u << 20), Errc::parse_error, path_ + ": implausible string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }

 private:
  template <typename U>
  U get_le() {
    unsigned char b[sizeof(U)];
    bytes(b, sizeof(U));
    U v = 0;
    for (size_t i = 0; i < sizeof(U); ++i) v |= U(b[i]) << (8 * i);
    return v;
  }
  std::string path_;
  std::ifstream is_;
  size_t offset_ = 0;
};

}  // namespace revcs::binio
