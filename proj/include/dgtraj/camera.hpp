#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace dgtraj {

// Pinhole camera: intrinsics plus a rigid world-to-camera transform.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  std::array<double, 16> W{};  // row-major 4x4, world -> camera
  int width = 0, height = 0;
  double near = 0.01, far = 100.0;
  int time = 0;

  const double* rot() const { return W.data(); }  // rows stride 4
  // Rotation block as a dense 3x3 (row-major).
  std::array<double, 9> rot3() const {
    return {W[0], W[1], W[2], W[4], W[5], W[6], W[8], W[9], W[10]};
  }
  std::array<double, 3> trans() const { return {W[3], W[7], W[11]}; }

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera: fx, fy must be positive");
    if (width <= 0 || height <= 0) throw std::invalid_argument("camera: bad image size");
    if (!(near < far)) throw std::invalid_argument("camera: need near < far");
    const auto R = rot3();
    // R R^T = I within 1e-8.
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += R[i * 3 + k] * R[j * 3 + k];
        if (std::abs(s - (i == j ? 1.0 : 0.0)) > 1e-8)
          throw std::invalid_argument("camera: rotation block not orthonormal");
      }
    if (std::abs(W[12]) > 0 || std::abs(W[13]) > 0 || std::abs(W[14]) > 0 ||
        std::abs(W[15] - 1.0) > 1e-12)
      throw std::invalid_argument("camera: last row of W must be (0,0,0,1)");
  }
};

}  // namespace dgtraj
