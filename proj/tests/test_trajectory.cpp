#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "dgtraj/rng.hpp"
#include "dgtraj/trajectory.hpp"

using namespace dgtraj;

namespace {

double gram_deviation(const Eigen::MatrixXd& B) {
  Eigen::MatrixXd G = B.transpose() * B;
  G -= Eigen::MatrixXd::Identity(B.cols(), B.cols());
  return G.cwiseAbs().maxCoeff();
}

}  // namespace

TEST_CASE("constant mode of a 4-frame basis is 0.5") {
  Eigen::MatrixXd B = dct_basis(4, 1);
  REQUIRE(B.rows() == 4);
  REQUIRE(B.cols() == 1);
  for (int t = 0; t < 4; ++t) CHECK(B(t, 0) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("8x8 basis is orthonormal to machine precision") {
  CHECK(gram_deviation(dct_basis(8, 8)) < 1e-12);
}

TEST_CASE("orthonormality holds across sizes") {
  for (int n : {4, 30, 100, 512}) {
    CHECK(gram_deviation(dct_basis(n, n)) < 1e-10);
    CHECK(gram_deviation(dct_basis(n, std::min(n, 40))) < 1e-10);
  }
}

TEST_CASE("column one decreases strictly in time") {
  Eigen::MatrixXd B = dct_basis(16, 2);
  for (int t = 1; t < 16; ++t) CHECK(B(t, 1) < B(t - 1, 1));
}

TEST_CASE("basis size preconditions throw") {
  CHECK_THROWS_AS(dct_basis(4, 5), std::invalid_argument);
  CHECK_THROWS_AS(dct_basis(4, 0), std::invalid_argument);
  CHECK_THROWS_AS(dct_basis(0, 0), std::invalid_argument);
}

TEST_CASE("evaluate returns exact rows at integer times") {
  Eigen::MatrixXd B = dct_basis(6, 4);
  Eigen::VectorXd r3 = evaluate(B, 3.0);
  for (int j = 0; j < 4; ++j) CHECK(r3(j) == B(3, j));
}

TEST_CASE("evaluate interpolates linearly between rows") {
  Eigen::MatrixXd B = dct_basis(6, 4);
  Eigen::VectorXd mid = evaluate(B, 2.5);
  for (int j = 0; j < 4; ++j)
    CHECK(mid(j) == doctest::Approx(0.5 * (B(2, j) + B(3, j))).epsilon(1e-15));
  Eigen::VectorXd q = evaluate(B, 1.25);
  for (int j = 0; j < 4; ++j)
    CHECK(q(j) == doctest::Approx(0.75 * B(1, j) + 0.25 * B(2, j)).epsilon(1e-14));
}

TEST_CASE("evaluate is numerically continuous") {
  Eigen::MatrixXd B = dct_basis(12, 8);
  for (double t : {0.0, 0.999999, 1.0, 4.5, 10.999, 11.0 - 1e-9}) {
    Eigen::VectorXd a = evaluate(B, t);
    Eigen::VectorXd b = evaluate(B, std::min(t + 1e-9, 11.0));
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("evaluate rejects out-of-range times") {
  Eigen::MatrixXd B = dct_basis(6, 3);
  CHECK_THROWS_AS(evaluate(B, -0.01), std::out_of_range);
  CHECK_THROWS_AS(evaluate(B, 5.01), std::out_of_range);
}

TEST_CASE("fit recovers coefficients of in-span data exactly") {
  Rng rng(5);
  const int N = 60, k = 5, P = 200;
  Eigen::MatrixXd B = dct_basis(N, k);
  Eigen::MatrixXd A0(k, 3 * P);
  for (int i = 0; i < A0.rows(); ++i)
    for (int j = 0; j < A0.cols(); ++j) A0(i, j) = rng.uniform(-2.0, 2.0);
  Eigen::MatrixXd X = B * A0;
  Eigen::MatrixXd A = fit_coefficients(X, B);
  CHECK((A - A0).cwiseAbs().maxCoeff() < 1e-8);
  CHECK((reconstruct(B, A) - X).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("constant trajectory concentrates in the DC coefficient") {
  const int N = 10;
  Eigen::MatrixXd B = dct_basis(N, N);
  Eigen::MatrixXd X = Eigen::MatrixXd::Constant(N, 1, 0.7);
  Eigen::MatrixXd A = fit_coefficients(X, B);
  CHECK(A(0, 0) == doctest::Approx(0.7 * std::sqrt(static_cast<double>(N))).epsilon(1e-12));
  for (int j = 1; j < N; ++j) CHECK(std::abs(A(j, 0)) < 1e-12);
}

TEST_CASE("zero trajectories fit to zero and reconstruct to zero") {
  Eigen::MatrixXd B = dct_basis(8, 4);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(8, 6);
  CHECK(fit_coefficients(X, B).cwiseAbs().maxCoeff() == 0.0);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(4, 6);
  CHECK(reconstruct(B, A).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("single basis column replicates per point under unit coefficients") {
  Eigen::MatrixXd B = dct_basis(8, 3);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(3, 4);
  A.row(2).setOnes();
  Eigen::MatrixXd X = reconstruct(B, A);
  for (int p = 0; p < 4; ++p)
    for (int t = 0; t < 8; ++t) CHECK(X(t, p) == doctest::Approx(B(t, 2)).epsilon(1e-15));
}

TEST_CASE("stacked trajectory matrices round-trip through fit") {
  Rng rng(9);
  const int N = 12, k = 6, P = 7;
  Eigen::MatrixXd B = dct_basis(N, k);
  CoefficientMatrix A0;
  A0.n_points = P;
  A0.A.resize(k, 3 * P);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < 3 * P; ++j) A0.A(i, j) = rng.uniform(-1.0, 1.0);
  TrajectoryMatrix X = reconstruct(B, A0);
  REQUIRE(X.n_frames == N);
  REQUIRE(X.n_points == P);
  REQUIRE(X.stacked.rows() == 3 * N);
  CoefficientMatrix A = fit_coefficients(X, B);
  CHECK((A.A - A0.A).cwiseAbs().maxCoeff() < 1e-10);
  TrajectoryMatrix X2 = reconstruct(B, A);
  CHECK((X2.stacked - X.stacked).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("dimension mismatches throw") {
  Eigen::MatrixXd B = dct_basis(8, 3);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(7, 2);  // wrong frame count
  CHECK_THROWS_AS(fit_coefficients(X, B), std::invalid_argument);
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(4, 2);  // wrong basis count
  CHECK_THROWS_AS(reconstruct(B, A), std::invalid_argument);
}

TEST_CASE("smooth low-frequency motion compacts into ten coefficients") {
  Rng rng(13);
  const int N = 64;
  Eigen::MatrixXd B = dct_basis(N, N);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::MatrixXd x(N, 1);
    const int terms = 1 + static_cast<int>(rng.uniform_int(3));
    std::vector<double> amp(terms), freq(terms), phase(terms);
    for (int s = 0; s < terms; ++s) {
      amp[s] = rng.uniform(0.2, 1.0);
      freq[s] = rng.uniform(0.2, 2.0);  // cycles per sequence, well below mode 10
      phase[s] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    for (int t = 0; t < N; ++t) {
      double v = 0.0;
      for (int s = 0; s < terms; ++s)
        v += amp[s] * std::sin(2.0 * std::numbers::pi * freq[s] * t / N + phase[s]);
      x(t, 0) = v;
    }
    Eigen::MatrixXd A = fit_coefficients(x, B);
    double head = 0.0, total = 0.0;
    for (int j = 0; j < N; ++j) {
      const double e = A(j, 0) * A(j, 0);
      total += e;
      if (j < 10) head += e;
    }
    CHECK(head / total >= 0.99);
  }
}

TEST_CASE("motion basis initializes as truncated DCT matrices") {
  MotionBasis mb = make_motion_basis(30, 12, 5, 7);
  CHECK(mb.n_frames == 30);
  CHECK(gram_deviation(mb.theta) < 1e-10);
  CHECK(gram_deviation(mb.lambda) < 1e-10);
  CHECK(gram_deviation(mb.eta) < 1e-10);
  Eigen::MatrixXd full = dct_basis(30, 12);
  CHECK((mb.theta - full.leftCols(12)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((mb.lambda - full.leftCols(5)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((mb.eta - full.leftCols(7)).cwiseAbs().maxCoeff() == 0.0);
}
