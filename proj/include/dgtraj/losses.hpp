#pragma once

#include <cstdint>
#include <vector>

#include "dgtraj/gaussian_scene.hpp"
#include "dgtraj/motion_field.hpp"
#include "dgtraj/tape.hpp"

namespace dgtraj {

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

struct LossWeights {
  double lambda_a = 0.3;   // ARAP
  double lambda_s = 0.6;   // spatial smoothness
  double w_beta = 0.5;
  double w_gamma = 0.5;
  double dssim_mix = 0.2;  // photometric = (1-mix) L1 + mix (1-SSIM)
  double rho_w = 2000.0;   // ARAP weight kernel sharpness
  int arap_samples = 2048;
  int knn_k = 20;
};

// Frozen nearest-neighbor structure over the dynamic Gaussians at their
// global reference positions. Neighbor slots index into `pool`; weights are
// exp(-rho_w d^2), frozen at build time. Rebuilt after structural edits.
struct KnnIndex {
  std::vector<int> pool;        // Gaussian ids, ascending
  int k = 0;                    // neighbor slots per pool entry
  std::vector<int> neighbors;   // pool.size() * k, sorted by distance
  std::vector<double> weights;  // pool.size() * k
  int64_t built_at_iter = -1;

  static KnnIndex build(const GaussianSet& set, const std::vector<int>& dynamic_rows,
                        int knn_k, double rho_w, int64_t iter);
};

// Mean SSIM between two (H*W) x C image nodes: 11x11 Gaussian window with
// sigma 1.5, borders renormalized, channels averaged.
ValueRef ssim_on_tape(Tape& tape, ValueRef a, ValueRef b, int width, int height);

// (1-mix) L1 + mix (1-SSIM).
ValueRef photometric_loss(Tape& tape, ValueRef rendered, ValueRef target, int width,
                          int height, double dssim_mix = 0.2);

// Mean squared error over a single-channel image pair.
ValueRef mask_loss(Tape& tape, ValueRef rendered_mask, ValueRef target_mask);

// Mean binary entropy of p, clamped to [1e-6, 1-1e-6] before the logs.
ValueRef entropy_loss(Tape& tape, ValueRef pvals);

// ARAP rigidity between two deformed states of the dynamic subset. Rows of
// pos/rot nodes index the dynamic subset; `pairs_i`/`pairs_j` list sample and
// neighbor rows; `weights` are the frozen kernel values. Normalized by
// 1/(knn_k * n_samples).
ValueRef arap_loss(Tape& tape, ValueRef pos_prev, ValueRef pos_cur, ValueRef rot_prev,
                   ValueRef rot_cur, const std::vector<int>& pairs_i,
                   const std::vector<int>& pairs_j, const std::vector<double>& weights,
                   int knn_k, int n_samples);

// Mean per-basis coefficient change under a positional perturbation:
// |sigma(x)-sigma(x+eps d)| + w_beta |beta...| + w_gamma |gamma...|, means
// over points and basis indices. enc_a/enc_b are the encodings of the
// sampled points and their perturbed twins.
ValueRef spatial_smoothness_loss(Tape& tape, const CoefficientNet& net, ValueRef net_params,
                                 ValueRef enc_a, ValueRef enc_b, double w_beta,
                                 double w_gamma);

// Weighted total. Invalid refs mean "absent"; mask/entropy terms are only
// legal when masks exist, entropy only from the late stage.
ValueRef total_loss(Tape& tape, ValueRef pho, ValueRef mask, ValueRef entropy,
                    ValueRef arap, ValueRef spatial, const LossWeights& w);

}  // namespace dgtraj
