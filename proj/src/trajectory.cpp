#include "dgtraj/trajectory.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dgtraj {

Eigen::MatrixXd TrajectoryMatrix::coord(int d) const {
  if (d < 0 || d > 2) throw std::invalid_argument("coord: d must be 0..2");
  Eigen::MatrixXd out(n_frames, n_points);
  for (int t = 0; t < n_frames; ++t) out.row(t) = stacked.row(3 * t + d);
  return out;
}

Eigen::MatrixXd dct_basis(int n_frames, int n_bases) {
  if (n_frames < 1) throw std::invalid_argument("dct_basis: n_frames must be positive");
  if (n_bases < 1 || n_bases > n_frames)
    throw std::invalid_argument("dct_basis: need 1 <= n_bases <= n_frames");
  const double N = static_cast<double>(n_frames);
  Eigen::MatrixXd B(n_frames, n_bases);
  for (int j = 0; j < n_bases; ++j) {
    const double cj = j == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
    for (int t = 0; t < n_frames; ++t)
      B(t, j) = cj * std::cos(std::numbers::pi * (2.0 * t + 1.0) * j / (2.0 * N));
  }
  return B;
}

Eigen::VectorXd evaluate(const Eigen::MatrixXd& basis, double t) {
  const int N = static_cast<int>(basis.rows());
  if (!(t >= 0.0 && t <= static_cast<double>(N - 1)))
    throw std::out_of_range("evaluate: t outside [0, N-1]");
  const int t0 = std::min(static_cast<int>(std::floor(t)), N - 1);
  const double f = t - static_cast<double>(t0);
  if (f == 0.0) return basis.row(t0).transpose();
  return ((1.0 - f) * basis.row(t0) + f * basis.row(t0 + 1)).transpose();
}

Eigen::MatrixXd fit_coefficients(const Eigen::MatrixXd& samples,
                                 const Eigen::MatrixXd& basis) {
  if (samples.rows() != basis.rows())
    throw std::invalid_argument("fit_coefficients: frame count mismatch");
  return basis.colPivHouseholderQr().solve(samples);
}

CoefficientMatrix fit_coefficients(const TrajectoryMatrix& traj,
                                   const Eigen::MatrixXd& basis) {
  if (traj.stacked.rows() != 3 * basis.rows() ||
      traj.stacked.cols() != traj.n_points || traj.n_frames != basis.rows())
    throw std::invalid_argument("fit_coefficients: trajectory/basis dimension mismatch");
  const int P = traj.n_points;
  const int k = static_cast<int>(basis.cols());
  CoefficientMatrix out;
  out.n_points = P;
  out.A.resize(k, 3 * P);
  for (int d = 0; d < 3; ++d) {
    const Eigen::MatrixXd Ad = fit_coefficients(traj.coord(d), basis);
    for (int i = 0; i < P; ++i) out.A.col(3 * i + d) = Ad.col(i);
  }
  return out;
}

Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& basis, const Eigen::MatrixXd& coeffs) {
  if (coeffs.rows() != basis.cols())
    throw std::invalid_argument("reconstruct: coefficient rank mismatch");
  return basis * coeffs;
}

TrajectoryMatrix reconstruct(const Eigen::MatrixXd& basis, const CoefficientMatrix& coeffs) {
  if (coeffs.A.rows() != basis.cols() || coeffs.A.cols() != 3 * coeffs.n_points)
    throw std::invalid_argument("reconstruct: coefficient dimension mismatch");
  const int N = static_cast<int>(basis.rows());
  const int P = coeffs.n_points;
  const Eigen::MatrixXd flat = basis * coeffs.A;  // N x 3P
  TrajectoryMatrix out;
  out.n_frames = N;
  out.n_points = P;
  out.stacked.resize(3 * N, P);
  for (int t = 0; t < N; ++t)
    for (int i = 0; i < P; ++i)
      for (int d = 0; d < 3; ++d) out.stacked(3 * t + d, i) = flat(t, 3 * i + d);
  return out;
}

MotionBasis make_motion_basis(int n_frames, int k, int l, int m) {
  MotionBasis b;
  b.n_frames = n_frames;
  b.theta = dct_basis(n_frames, k);
  b.lambda = dct_basis(n_frames, l);
  b.eta = dct_basis(n_frames, m);
  return b;
}

}  // namespace dgtraj
