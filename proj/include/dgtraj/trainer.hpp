#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "dgtraj/dataset.hpp"
#include "dgtraj/gaussian_scene.hpp"
#include "dgtraj/losses.hpp"
#include "dgtraj/motion_field.hpp"
#include "dgtraj/optim.hpp"
#include "dgtraj/rng.hpp"

namespace dgtraj {

struct TrainConfig {
  int total_iters = 2000;          // desk default; paper-scale runs use 50000
  double warmup_frac = 0.1;        // static-only stage
  double densify_until_frac = 0.5;
  double late_stage_frac = 0.5;    // entropy term activates here
  int densify_interval = 100;
  int eval_interval = 100;         // metrics log cadence
  int k = 40, l = 10, m = 10;      // basis counts
  int L = 12;                      // encoding frequencies
  uint64_t seed = 0;
  int init_points = 20000;         // random init when the dataset has no points

  // Gaussian-parameter learning rates (3DGS defaults). Position is scaled by
  // scene extent and decays geometrically to final_ratio x base over the run.
  double lr_position = 1.6e-4;
  double lr_position_final_ratio = 1e-2;
  double lr_opacity = 0.05;
  double lr_scale = 5e-3;
  double lr_rotation = 1e-3;
  double lr_color = 2.5e-3;
  double lr_dyn_logit = 0.05;
  // Motion-field rates with step decay per lr_decay_frac of the run.
  double lr_net = 1e-3;
  double lr_basis = 5e-4;
  double lr_decay_factor = 0.5;
  double lr_decay_frac = 0.3;

  LossWeights weights;
  DensifyConfig densify;

  int warmup_iters() const { return static_cast<int>(warmup_frac * total_iters); }
  int densify_until() const { return static_cast<int>(densify_until_frac * total_iters); }
  int late_stage() const { return static_cast<int>(late_stage_frac * total_iters); }
  void validate() const;
};

// JSON mirrors the field names (flat); unknown keys are rejected.
TrainConfig train_config_from_json_text(const std::string& text);
TrainConfig parse_train_config(const std::string& json_path);
std::string train_config_to_json(const TrainConfig& cfg);

// Everything the model owns: enough to render, export, and resume bit-exactly.
struct ModelState {
  TrainConfig cfg;
  GaussianSet set;
  CoefficientNet net;
  ParamGroup net_group{"net"};
  ParamGroup theta_group{"theta"};
  ParamGroup lambda_group{"lambda"};
  ParamGroup eta_group{"eta"};
  int n_frames = 0;
  bool masked = false;
  std::array<double, 3> background{0.0, 0.0, 0.0};
  int64_t iter = 0;
  Rng rng;
  std::vector<int> perm;  // epoch frame order
  uint64_t cursor = 0;
  KnnIndex knn;

  MotionBasis motion_basis() const;
};

// Binary checkpoint: magic "DGTJ", u32 version, length-prefixed sections.
// Written atomically (temp file + rename).
void save_checkpoint(const ModelState& ms, const std::string& path);
ModelState load_checkpoint(const std::string& path);

struct StepStats {
  int64_t iter = 0;  // index of the completed step
  double total = 0.0, pho = 0.0, mask = 0.0, entropy = 0.0, arap = 0.0, spatial = 0.0;
  double psnr = 0.0;  // train-frame PSNR of this step's render
  int n_gaussians = 0;
};

class Trainer {
 public:
  Trainer(const Dataset& ds, const TrainConfig& cfg);
  Trainer(const Dataset& ds, ModelState state);  // resume

  StepStats step();
  // Runs to total_iters, appending NDJSON metric records at eval_interval.
  // metrics_path may be empty.
  void run(const std::string& metrics_path);

  const ModelState& state() const { return st_; }
  ModelState& mutable_state() { return st_; }
  void save(const std::string& path) const { save_checkpoint(st_, path); }

 private:
  const ImageBuffer& image_of(int frame_index);
  const ImageBuffer& mask_of(int frame_index);

  const Dataset* ds_;
  ModelState st_;
  std::vector<int> train_idx_;
  std::unordered_map<int, ImageBuffer> img_cache_;
  std::unordered_map<int, ImageBuffer> mask_cache_;
};

struct EvalRow {
  int frame = 0;
  int time = 0;
  double psnr = 0.0, ssim = 0.0;
};
struct EvalResult {
  double mean_psnr = 0.0, mean_ssim = 0.0;
  std::vector<EvalRow> rows;
};

// Renders every test-split frame at its timestamp. Throws on an empty split.
EvalResult evaluate(const ModelState& ms, const Dataset& ds);

// Rendered color image at (possibly fractional) time t.
std::vector<double> render_model(const ModelState& ms, const Camera& cam, double t);

// mu(t) rows for the selected subset, grouped by Gaussian then time.
std::vector<TrajRow> export_trajectories(const ModelState& ms, const std::vector<double>& times,
                                         bool dynamic_only);

}  // namespace dgtraj
