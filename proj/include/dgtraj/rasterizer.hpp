#pragma once

#include <vector>

#include "dgtraj/camera.hpp"
#include "dgtraj/gaussian_scene.hpp"
#include "dgtraj/tape.hpp"

namespace dgtraj {

// Contribution thresholds of the compositing loop.
inline constexpr double kAlphaSkip = 1.0 / 255.0;
inline constexpr double kTransmittanceCutoff = 1e-4;
inline constexpr double kCovLowpass = 0.3;

// Projection of one Gaussian. Returns false (culled) when the camera-space
// depth falls outside (near, far). cov2d is the packed 2x2 (a, b, c) with the
// low-pass term already added.
bool project_point(const double* mu, const double* cov6, const Camera& cam,
                   double mu2d[2], double cov2d[3], double* depth);

// Optional per-pixel diagnostics from a forward render.
struct RenderDebug {
  std::vector<double> transmittance;      // final T per pixel
  std::vector<int> n_contrib;             // contributors per pixel
  std::vector<double> val_min, val_max;   // per pixel x channel, over contributors
};

// Forward-only reference render. Output is (H*W) x C row-major, pixels sampled
// at integer coordinates. mask_channel renders p instead of color (C = 1).
std::vector<double> render_plain(const PlainSnapshot& snap, const Camera& cam,
                                 bool mask_channel, const std::vector<double>& background,
                                 bool tiled = false, RenderDebug* debug = nullptr);

// Projection subgraph with plain-side frustum culling. keep maps rasterizer
// rows back to Gaussian indices.
struct ProjectedScene {
  std::vector<int> keep;
  ValueRef mu2d;  // R x 2
  ValueRef cov2d; // R x 3 (a, b, c)
  std::vector<double> depths;
};

ProjectedScene project_on_tape(Tape& tape, ValueRef position, ValueRef cov6,
                               const Camera& cam);

// Differentiable compositing node. All inputs are kept-row aligned: mu2d R x 2,
// cov2d R x 3, opacity R x 1, vals R x C. Returns the (H*W) x C image node.
ValueRef rasterize(Tape& tape, ValueRef mu2d, ValueRef cov2d, ValueRef opacity,
                   ValueRef vals, const std::vector<double>& depths, int width,
                   int height, const std::vector<double>& background);

}  // namespace dgtraj
