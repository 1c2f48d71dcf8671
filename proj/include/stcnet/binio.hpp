#pragma once

#include <cstdint>
#include <cstring>
#include <string>

#include "stcnet/errors.hpp"

namespace stcnet {

// Little-endian append/consume helpers over an in-memory byte buffer.

inline void put_u8(std::string& buf, uint8_t v) { buf.push_back(static_cast<char>(v)); }

inline void put_u16(std::string& buf, uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xFF));
  buf.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(buf, bits);
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  std::string what;  // context for error messages

  void need(size_t n, const char* field) {
    if (n > buf.size() - pos)  // pos never exceeds buf.size(), so this cannot wrap
      throw FormatError(what + ": truncated while reading " + field);
  }
  uint8_t u8(const char* field) {
    need(1, field);
    return static_cast<uint8_t>(buf[pos++]);
  }
  uint16_t u16(const char* field) {
    need(2, field);
    uint16_t v = 0;
    for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 2;
    return v;
  }
  uint32_t u32(const char* field) {
    need(4, field);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32(const char* field) {
    uint32_t bits = u32(field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n, const char* field) {
    need(n, field);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

std::string read_file_bytes(const std::string& path);       // FormatError if unreadable
void write_file_bytes(const std::string& path, const std::string& bytes);

}  // namespace stcnet
