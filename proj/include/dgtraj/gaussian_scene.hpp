#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "dgtraj/motion_field.hpp"
#include "dgtraj/optim.hpp"
#include "dgtraj/rng.hpp"
#include "dgtraj/tape.hpp"
#include "dgtraj/trajectory.hpp"

namespace dgtraj {

// Degree-0 spherical harmonic constant: color = clamp(0.5 + C0 * dc, 0, 1).
inline constexpr double kShC0 = 0.28209479177387814;

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

enum class MotionClass { Static, Dynamic };

// Static iff the static probability (1 - p) clears the threshold; everything
// else is treated as dynamic, since the motion field can express stillness
// but a static assignment cannot express motion.
MotionClass classify(double p, double static_threshold = 0.8);

// World covariance of one Gaussian: R diag(s) diag(s) R^T. Quaternion must be
// unit within 1e-6; scales are the activated (exp) values.
Eigen::Matrix3d covariance(const Eigen::Vector3d& scale, const Eigen::Vector4d& rot);

struct DensifyConfig {
  double thr_static = 4e-4;
  double thr_dynamic = 8e-4;
  double clone_scale_frac = 0.01;  // clone below this fraction of scene extent, else split
  double split_factor = 1.6;
  double opacity_floor = 0.005;
  double static_threshold = 0.8;
};

struct DensifyReport {
  int cloned = 0;
  int split = 0;
  int pruned = 0;
};

// All per-Gaussian parameters plus densification statistics. Each field is a
// ParamGroup so the optimizer state travels with structural edits.
struct GaussianSet {
  ParamGroup x_star{"x_star"};              // P x 3
  ParamGroup log_scale{"log_scale"};        // P x 3
  ParamGroup rotation{"rotation"};          // P x 4 (w,x,y,z)
  ParamGroup opacity_logit{"opacity_logit"};// P x 1
  ParamGroup color{"color"};                // P x 3 (SH degree 0)
  ParamGroup dyn_logit{"dyn_logit"};        // P x 1
  std::vector<double> grad_accum;           // sum of 2D positional grad norms
  std::vector<int> grad_count;              // frames each Gaussian was rasterized in
  double scene_extent = 1.0;
  double scene_center[3] = {0.0, 0.0, 0.0};

  int size() const { return static_cast<int>(opacity_logit.values.size()); }
  double p_of(int i) const { return sigmoid(dyn_logit.values[i]); }

  std::vector<int> dynamic_indices(double static_threshold = 0.8) const;

  void validate() const;
  void resize_all_state();
  // Renormalize stored quaternions (after optimizer steps).
  void normalize_rotations();
  void add_grad_stat(int i, double grad_norm);
  void reset_grad_stats();

  // Clone/split high-gradient Gaussians and prune transparent ones. Throws if
  // the result would be empty.
  DensifyReport densify_and_prune(const DensifyConfig& cfg, Rng& rng);
};

// Uniform random initialization inside a bounding box (used when no point
// cloud is available).
GaussianSet random_scene(int n, const double* bbox_min, const double* bbox_max, Rng& rng);

// Initialization from a point cloud (positions and optional colors in [0,1]).
GaussianSet scene_from_points(const std::vector<double>& xyz,
                              const std::vector<double>& rgb);

// Leaves for every parameter group of the set, in a fixed order.
struct SceneLeaves {
  ValueRef x, s, r, o, c, dyn;
};
SceneLeaves make_scene_leaves(Tape& tape, const GaussianSet& set);

// Assembled per-time scene state on the tape. Dynamic rows carry deformed
// position/scale/rotation; static rows pass the globals through.
struct SnapshotRefs {
  ValueRef position;  // P x 3
  ValueRef rotation;  // P x 4 unit
  ValueRef cov6;      // P x 6 packed world covariance
  ValueRef opacity;   // P x 1
  ValueRef color;     // P x 3 in [0,1]
  ValueRef pvals;     // P x 1 sigmoid(dyn_logit)
  // Valid only when motion was applied (for losses over the dynamic subset).
  bool has_motion = false;
  ValueRef dyn_x, dyn_s, dyn_r;         // gathered leaf rows, D x {3,3,4}
  ValueRef dyn_position, dyn_rotation;  // deformed at t, D x {3,4}
  ValueRef enc;                         // D x input_width constant encodings
};

struct MotionLeaves {
  ValueRef net;     // 1 x n_params
  ValueRef theta;   // N x k
  ValueRef lambda;  // N x l
  ValueRef eta;     // N x m
};

// Builds activations and (when apply_motion and dynamic_rows non-empty) the
// motion graph at time t. heads_out, if non-null, receives the net heads for
// reuse by regularizers. Per-row deformed values for the dynamic subset are
// exposed for losses needing the previous frame.
SnapshotRefs build_snapshot(Tape& tape, const GaussianSet& set, const SceneLeaves& leaves,
                            const CoefficientNet* net, const MotionLeaves* motion,
                            int n_frames, double t, const std::vector<int>& dynamic_rows,
                            bool apply_motion, CoefficientNet::Heads* heads_out = nullptr);

// Tape-free snapshot for rendering and export.
struct PlainSnapshot {
  int count = 0;
  std::vector<double> position;  // P x 3
  std::vector<double> rotation;  // P x 4
  std::vector<double> cov6;      // P x 6
  std::vector<double> opacity;   // P
  std::vector<double> color;     // P x 3
  std::vector<double> p;         // P
};

PlainSnapshot snapshot_plain(const GaussianSet& set, const CoefficientNet* net,
                             const std::vector<double>* net_params, const MotionBasis* basis,
                             double t, double static_threshold = 0.8);

}  // namespace dgtraj
