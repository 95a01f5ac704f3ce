#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

// Little-endian byte-level IO shared by the checkpoint and volume formats.
// Reads track the byte offset so malformed files are reported by position.

namespace dnet::binio {

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

// Bulk payload append; assumes a little-endian host for the raw copy.
template <typename T>
void put_raw(std::string& out, const T* data, std::size_t count) {
  const std::size_t old = out.size();
  out.resize(old + count * sizeof(T));
  std::memcpy(out.data() + old, data, count * sizeof(T));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const char* what;

  Reader(const std::string& b, const char* w) : buf(b), what(w) {}

  void need(std::size_t n, const char* field) {
    if (pos + n > buf.size()) {
      throw std::runtime_error(
          std::string(what) + ": truncated file while reading " + field +
          " at byte offset " + std::to_string(pos) + " (need " +
          std::to_string(n) + " more bytes, " +
          std::to_string(buf.size() - pos) + " remain)");
    }
  }
  std::uint8_t u8(const char* field) {
    need(1, field);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16(const char* field) {
    need(2, field);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos + i]) << (8 * i));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n, const char* field) {
    need(n, field);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  template <typename T>
  void raw(T* data, std::size_t count, const char* field) {
    need(count * sizeof(T), field);
    std::memcpy(data, buf.data() + pos, count * sizeof(T));
    pos += count * sizeof(T);
  }
};

inline std::string read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error(std::string(what) + ": cannot open '" + path + "'");
  }
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file(const std::string& path, const std::string& buf,
                       const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error(std::string(what) + ": cannot open '" + path +
                             "' for writing");
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) {
    throw std::runtime_error(std::string(what) + ": write failed for '" + path + "'");
  }
}

}  // namespace dnet::binio
