#pragma once

#include <string>
#include <vector>

namespace dgtraj {

// Row-major (H*W) x C pixel buffer in linear [0,1]. Quantization to 8 bits
// happens only at the PNG boundary.
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<double> pixels;

  double& at(int x, int y, int c) {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int x, int y, int c) const {
    return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
  }
};

// 8-bit PNG. Gray and palette images load as 1 or 3 channels; alpha is
// dropped. Values map to v/255.
ImageBuffer read_png(const std::string& path);

// Writes 8-bit gray (C=1) or RGB (C=3), rounding v*255.
void write_png(const std::string& path, const ImageBuffer& img);

}  // namespace dgtraj
