#pragma once

#include <vector>

#include "dgtraj/rng.hpp"
#include "dgtraj/tape.hpp"
#include "dgtraj/trajectory.hpp"

namespace dgtraj {

struct EncodingConfig {
  int L = 12;
};

// Frequency encoding of one 3D point: per coordinate, (sin(2^f pi x),
// cos(2^f pi x)) for f = 0..L-1; coordinate-major, frequency-inner, sin
// before cos. Output width 6L. Inputs are expected pre-normalized to about
// [-1, 1] by the caller (scene center/extent).
void encode(const double* x, int L, double* out);

inline int encoding_width(int L) { return 6 * L; }

// Coefficient MLP: 6L -> 128 -> 128 -> 128 (ReLU) -> three linear heads of
// widths 3k (position), 3l (scale), 4m (rotation). Head rows are basis-major
// with the coordinate innermost, so row i of sigma reshapes to k x 3.
// Parameters live in one flat vector; the graph slices it.
struct CoefficientNet {
  int L = 12;
  int k = 40;
  int l = 10;
  int m = 10;
  int hidden = 128;

  int input_width() const { return encoding_width(L); }
  int n_params() const;

  // Kaiming-uniform trunk, zero-initialized heads: the field starts as the
  // identity deformation.
  std::vector<double> init_params(Rng& rng) const;

  struct Heads {
    ValueRef sigma;  // B x 3k
    ValueRef beta;   // B x 3l
    ValueRef gamma;  // B x 4m
  };

  // params: leaf/const node of shape 1 x n_params(); enc: B x 6L node.
  Heads forward(Tape& tape, ValueRef params, ValueRef enc) const;

  // Tape-free forward for rendering and tests.
  void forward_plain(const std::vector<double>& params, const double* enc, int batch,
                     std::vector<double>& sigma, std::vector<double>& beta,
                     std::vector<double>& gamma) const;
};

// Basis row at (possibly fractional) time t as a graph over the basis leaf.
// Result is 1 x k. t outside [0, N-1] throws.
ValueRef basis_row_at(Tape& tape, ValueRef basis_leaf, int n_frames, double t);

// Deformed state of a batch: position = x + combine(sigma, theta_t),
// scale = s + combine(beta, lambda_t), rotation = normalize(r + combine(gamma, eta_t)).
struct DeformedRefs {
  ValueRef position;  // B x 3
  ValueRef log_scale; // B x 3
  ValueRef rotation;  // B x 4, unit rows
};

DeformedRefs deform(Tape& tape, ValueRef x, ValueRef s, ValueRef r,
                    const CoefficientNet::Heads& heads, ValueRef theta_t,
                    ValueRef lambda_t, ValueRef eta_t);

// Tape-free deform for one Gaussian (used by export/render paths).
struct DeformedState {
  double position[3];
  double log_scale[3];
  double rotation[4];
};

DeformedState deform_plain(const double* x, const double* s, const double* r,
                           const double* sigma, const double* beta, const double* gamma,
                           const MotionBasis& basis, double t, int k, int l, int m);

}  // namespace dgtraj
