#pragma once

#include <Eigen/Dense>

namespace dgtraj {

// Stacked time-varying structure: rows frame-major (rows 3t..3t+2 are the
// x,y,z of all points at frame t), one column per point.
struct TrajectoryMatrix {
  int n_frames = 0;
  int n_points = 0;
  Eigen::MatrixXd stacked;  // (3N) x P

  // N x P slice of one coordinate (0=x, 1=y, 2=z).
  Eigen::MatrixXd coord(int d) const;
};

// Per-point basis coefficients, three columns per point: column 3i+d holds
// the coefficients of coordinate d of point i.
struct CoefficientMatrix {
  int n_points = 0;
  Eigen::MatrixXd A;  // k x (3P)
};

// Orthonormal DCT-II matrix, N x k: entry(t,j) = c_j cos(pi (2t+1) j / (2N)),
// c_0 = sqrt(1/N), c_j = sqrt(2/N) otherwise. Throws if n_bases is not in
// [1, n_frames].
Eigen::MatrixXd dct_basis(int n_frames, int n_bases);

// Basis row at continuous time t in [0, N-1]: exact rows at integer t,
// linear interpolation between adjacent rows otherwise. Out of range throws.
Eigen::VectorXd evaluate(const Eigen::MatrixXd& basis, double t);

// Least-squares coefficients for per-column samples: samples is N x C,
// returns k x C minimizing ||samples - basis * A||_F. With an orthonormal
// basis this equals basis^T * samples.
Eigen::MatrixXd fit_coefficients(const Eigen::MatrixXd& samples,
                                 const Eigen::MatrixXd& basis);

// Per-coordinate fit of a stacked trajectory matrix.
CoefficientMatrix fit_coefficients(const TrajectoryMatrix& traj,
                                   const Eigen::MatrixXd& basis);

Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& basis, const Eigen::MatrixXd& coeffs);

TrajectoryMatrix reconstruct(const Eigen::MatrixXd& basis, const CoefficientMatrix& coeffs);

// Shared per-frame motion bases: positions combine k columns, scales l,
// rotations m. All DCT-initialized truncations of the same family.
struct MotionBasis {
  int n_frames = 0;
  Eigen::MatrixXd theta;   // N x k
  Eigen::MatrixXd lambda;  // N x l
  Eigen::MatrixXd eta;     // N x m
  bool learnable = true;
};

MotionBasis make_motion_basis(int n_frames, int k, int l, int m);

}  // namespace dgtraj
