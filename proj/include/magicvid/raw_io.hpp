#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "magicvid/errors.hpp"
#include "magicvid/tensor.hpp"

namespace magicvid {

// Raw little-endian float32 files: the corpus clip format and the latent
// intermediate format. Explicit byte packing keeps files identical across
// host endianness.

inline void pack_f32_le(const float* src, int64_t n, std::vector<unsigned char>& out) {
  out.resize(static_cast<size_t>(n) * 4);
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits;
    std::memcpy(&bits, src + i, 4);
    out[static_cast<size_t>(i) * 4 + 0] = static_cast<unsigned char>(bits & 0xff);
    out[static_cast<size_t>(i) * 4 + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
    out[static_cast<size_t>(i) * 4 + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
    out[static_cast<size_t>(i) * 4 + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
  }
}

inline void unpack_f32_le(const unsigned char* src, int64_t n, float* out) {
  for (int64_t i = 0; i < n; ++i) {
    uint32_t bits = static_cast<uint32_t>(src[i * 4 + 0]) | (static_cast<uint32_t>(src[i * 4 + 1]) << 8) |
                    (static_cast<uint32_t>(src[i * 4 + 2]) << 16) |
                    (static_cast<uint32_t>(src[i * 4 + 3]) << 24);
    std::memcpy(out + i, &bits, 4);
  }
}

inline void write_raw_f32(const std::string& path, const TensorF& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  std::vector<unsigned char> buf;
  pack_f32_le(t.data(), t.numel(), buf);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline int64_t raw_f32_count(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open: " + path);
  int64_t bytes = static_cast<int64_t>(f.tellg());
  if (bytes % 4) throw IoError("file size not a multiple of 4: " + path);
  return bytes / 4;
}

inline TensorF read_raw_f32(const std::string& path, std::vector<int> shape) {
  TensorF t(std::move(shape));
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open: " + path);
  int64_t bytes = static_cast<int64_t>(f.tellg());
  if (bytes != t.numel() * 4) {
    throw IoError("file " + path + " holds " + std::to_string(bytes / 4) + " floats, expected " +
                  std::to_string(t.numel()));
  }
  f.seekg(0);
  std::vector<unsigned char> buf(static_cast<size_t>(bytes));
  f.read(reinterpret_cast<char*>(buf.data()), bytes);
  if (!f) throw IoError("read failed: " + path);
  unpack_f32_le(buf.data(), t.numel(), t.data());
  return t;
}

}  // namespace magicvid
