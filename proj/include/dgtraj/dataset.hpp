#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dgtraj/camera.hpp"
#include "dgtraj/png_io.hpp"

namespace dgtraj {

struct Frame {
  std::string image_path;
  std::string mask_path;  // empty in maskless mode
  Camera cam;
  int time = 0;
  bool test = false;
};

// On-disk layout: cameras.json (list of {K:[fx,fy,cx,cy], W: 4x4 row-major
// world-to-cam, width, height, time, split}), images/%05d.png indexed by
// entry order, optional masks/%05d.png (>=128 means dynamic), optional
// points.ply, meta.json (background, optional scene_extent).
struct Dataset {
  std::string dir;
  std::vector<Frame> frames;
  bool masked = false;
  int n_frames = 0;  // distinct timestamps, contiguous 0..n_frames-1
  std::array<double, 3> background{0.0, 0.0, 0.0};
  double scene_extent_override = 0.0;  // <=0 means none
  std::vector<double> init_xyz;  // P x 3 row-major, empty if no points.ply
  std::vector<double> init_rgb;  // P x 3 in [0,1], empty if PLY had no color

  std::vector<int> train_indices() const;
  std::vector<int> test_indices() const;
};

Dataset load_dataset(const std::string& dir);

// Single camera from a JSON object with K, W, width, height (time optional).
Camera parse_camera_file(const std::string& path);

// PLY vertices: x,y,z as float/double, optional red,green,blue as uchar.
// ASCII or binary_little_endian.
void read_ply(const std::string& path, std::vector<double>& xyz, std::vector<double>& rgb);
void write_ply(const std::string& path, const std::vector<double>& xyz,
               const std::vector<double>& rgb);

// ---------------------------------------------------------------------------
// Synthetic scenes with known trajectories.

enum class TrajFamily { Sinusoid, LowRankDct };

struct SyntheticSpec {
  int n_static = 50;
  int n_dynamic = 20;
  int n_frames = 30;
  int width = 64;
  int height = 64;
  int n_cameras = 12;  // orbit poses shared across timestamps
  uint64_t seed = 7;
  TrajFamily family = TrajFamily::Sinusoid;
  double amp_lo = 0.10;       // absolute world units
  double amp_hi = 0.30;
  double freq_lo = 0.5;       // cycles per sequence; kept well inside the
  double freq_hi = 2.5;       // first 10 DCT modes
  std::array<double, 3> background{0.0, 0.0, 0.0};
};

SyntheticSpec parse_synthetic_spec(const std::string& json_path);

struct SynthGaussian {
  std::array<double, 3> pos{};       // rest position (sinusoid center / DCT DC)
  std::array<double, 3> log_scale{};
  std::array<double, 4> quat{1.0, 0.0, 0.0, 0.0};
  double opacity = 0.9;
  std::array<double, 3> color{};
  // Motion parameters; valid only for dynamic Gaussians.
  std::array<double, 3> amp{};
  std::array<double, 3> freq{};
  std::array<double, 3> phase{};
  std::vector<double> dct_coef;  // 3 x n_modes row-major for LowRankDct
};

struct SyntheticScene {
  std::vector<SynthGaussian> statics;
  std::vector<SynthGaussian> dynamics;
  TrajFamily family = TrajFamily::Sinusoid;
  int n_frames = 0;
};

// Deterministic under spec.seed; the generator and the tests share this.
SyntheticScene make_synthetic_scene(const SyntheticSpec& spec);

// Closed form: sinusoid x_d(t) = pos_d + amp_d * sin(2*pi*freq_d*t/N + phase_d);
// low-rank-DCT x_d(t) = pos_d + sum_j coef[d*modes+j] * basis(t,j), j >= 1.
std::array<double, 3> synthetic_position(const SynthGaussian& g, TrajFamily family,
                                         int n_frames, double t);

// Writes the dataset directory plus gt_trajectories.csv and gt_labels.csv.
void generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Trajectory CSV (columns gaussian_id,t,x,y,z,p; %.17g floats).

struct TrajRow {
  int64_t id = 0;
  double t = 0.0, x = 0.0, y = 0.0, z = 0.0, p = 0.0;
};

void write_trajectory_csv(const std::string& path, const std::vector<TrajRow>& rows);
std::vector<TrajRow> read_trajectory_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Image metrics.

struct ImageMetrics {
  double psnr = 0.0;
  double ssim = 0.0;
  double l1 = 0.0;
};

// PSNR = 10*log10(1/MSE) on [0,1], capped at 99. SSIM shares the loss module's
// implementation.
ImageMetrics image_metrics(const ImageBuffer& a, const ImageBuffer& b);

}  // namespace dgtraj
