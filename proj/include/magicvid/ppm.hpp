#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "magicvid/errors.hpp"
#include "magicvid/tensor.hpp"

namespace magicvid {

// Binary PPM (P6), one frame of a [F,3,H,W] float clip; values clamped to
// [0,1] and quantized to 8 bits.
inline void write_ppm_frame(const std::string& path, const TensorF& clip, int frame) {
  const int h = clip.dim(2), w = clip.dim(3);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write ppm: " + path);
  f << "P6\n" << w << " " << h << "\n255\n";
  std::string row(static_cast<size_t>(w) * 3, '\0');
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        float v = std::clamp(clip.at(frame, c, y, x), 0.0f, 1.0f);
        row[static_cast<size_t>(x) * 3 + c] = static_cast<char>(std::lround(v * 255.0f));
      }
    }
    f.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw IoError("ppm write failed: " + path);
}

}  // namespace magicvid
