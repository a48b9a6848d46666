#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <vector>

#include "dgtraj/losses.hpp"
#include "dgtraj/motion_field.hpp"
#include "dgtraj/rng.hpp"
#include "dgtraj/tape.hpp"

using namespace dgtraj;

namespace {

ValueRef const_image(Tape& t, double v, int width, int height, int channels) {
  return t.constant(std::vector<double>(static_cast<size_t>(width) * height * channels, v),
                    width * height, channels);
}

ValueRef random_image(Tape& t, Rng& rng, int width, int height, int channels) {
  std::vector<double> v(static_cast<size_t>(width) * height * channels);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  return t.constant(v, width * height, channels);
}

}  // namespace

TEST_CASE("SSIM of an image with itself is one") {
  Tape t;
  Rng rng(31);
  ValueRef a = random_image(t, rng, 16, 12, 3);
  CHECK(t.scalar(ssim_on_tape(t, a, a, 16, 12)) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("SSIM of constant images matches the closed form") {
  Tape t;
  const double av = 0.3, bv = 0.4;
  ValueRef a = const_image(t, av, 16, 12, 3);
  ValueRef b = const_image(t, bv, 16, 12, 3);
  // Zero variance and covariance: the luminance term alone survives.
  const double want = (2 * av * bv + kSsimC1) / (av * av + bv * bv + kSsimC1);
  CHECK(t.scalar(ssim_on_tape(t, a, b, 16, 12)) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("SSIM stays within [-1, 1] and is symmetric") {
  Tape t;
  Rng rng(32);
  for (int trial = 0; trial < 3; ++trial) {
    ValueRef a = random_image(t, rng, 14, 10, 3);
    ValueRef b = random_image(t, rng, 14, 10, 3);
    const double sab = t.scalar(ssim_on_tape(t, a, b, 14, 10));
    const double sba = t.scalar(ssim_on_tape(t, b, a, 14, 10));
    CHECK(sab >= -1.0);
    CHECK(sab <= 1.0);
    CHECK(sab == doctest::Approx(sba).epsilon(1e-14));
  }
}

TEST_CASE("photometric loss of identical images is zero") {
  Tape t;
  Rng rng(33);
  ValueRef a = random_image(t, rng, 16, 12, 3);
  CHECK(std::abs(t.scalar(photometric_loss(t, a, a, 16, 12))) < 1e-12);
}

TEST_CASE("photometric loss on constant images is the weighted L1 plus DSSIM") {
  Tape t;
  const double av = 0.3, bv = 0.4;
  ValueRef a = const_image(t, av, 16, 12, 3);
  ValueRef b = const_image(t, bv, 16, 12, 3);
  const double ssim = (2 * av * bv + kSsimC1) / (av * av + bv * bv + kSsimC1);
  const double want = 0.8 * 0.1 + 0.2 * (1.0 - ssim);
  CHECK(t.scalar(photometric_loss(t, a, b, 16, 12)) == doctest::Approx(want).epsilon(1e-12));
  CHECK(t.scalar(photometric_loss(t, b, a, 16, 12)) ==
        doctest::Approx(t.scalar(photometric_loss(t, a, b, 16, 12))).epsilon(1e-15));
}

TEST_CASE("mask loss is the mean squared error") {
  Tape t;
  ValueRef a = const_image(t, 0.5, 8, 8, 1);
  ValueRef b = const_image(t, 1.0, 8, 8, 1);
  CHECK(t.scalar(mask_loss(t, a, b)) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(std::abs(t.scalar(mask_loss(t, a, a))) < 1e-15);
}

TEST_CASE("binary entropy peaks at one half and vanishes at the extremes") {
  Tape t;
  ValueRef half = t.constant(std::vector<double>{0.5}, 1, 1);
  CHECK(t.scalar(entropy_loss(t, half)) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  ValueRef extreme = t.constant(std::vector<double>{0.0, 1.0}, 2, 1);
  CHECK(t.scalar(entropy_loss(t, extreme)) < 2e-5);
  CHECK(t.scalar(entropy_loss(t, extreme)) >= 0.0);
  // Entropy is maximal at 0.5, so 0.3 and 0.7 must score lower.
  ValueRef off = t.constant(std::vector<double>{0.3}, 1, 1);
  CHECK(t.scalar(entropy_loss(t, off)) < std::log(2.0));
}

TEST_CASE("entropy descent pushes a leaning probability toward certainty") {
  Tape t;
  ValueRef p = t.leaf(std::vector<double>{0.6}, 1, 1, "p");
  t.backward(entropy_loss(t, p));
  const double g = t.grad(p)[0];
  // dH/dp = log((1-p)/p) < 0 for p > 0.5: descent increases p.
  CHECK(g < 0.0);
  CHECK(g == doctest::Approx(std::log(0.4 / 0.6)).epsilon(1e-12));
}

TEST_CASE("ARAP of identical states is zero") {
  Tape t;
  std::vector<double> pos = {0, 0, 0, 1, 0, 0, 0.5, 1, 0};
  std::vector<double> rot = {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  ValueRef p = t.constant(pos, 3, 3);
  ValueRef r = t.constant(rot, 3, 4);
  std::vector<int> pi = {0, 0, 1}, pj = {1, 2, 2};
  std::vector<double> w = {0.8, 0.6, 0.9};
  ValueRef loss = arap_loss(t, p, p, r, r, pi, pj, w, 3, 1);
  CHECK(std::abs(t.scalar(loss)) < 1e-12);
}

TEST_CASE("ARAP is invariant to a shared rigid motion") {
  Rng rng(41);
  const int D = 6;
  std::vector<double> pos0(D * 3), rot0;
  for (double& v : pos0) v = rng.uniform(-1.0, 1.0);
  std::vector<Eigen::Quaterniond> q0(D);
  for (int i = 0; i < D; ++i) {
    q0[i] = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    q0[i].normalize();
    rot0.insert(rot0.end(), {q0[i].w(), q0[i].x(), q0[i].y(), q0[i].z()});
  }
  Eigen::Quaterniond qg(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  qg.normalize();
  const Eigen::Matrix3d Rg = qg.toRotationMatrix();
  const Eigen::Vector3d tg(0.4, -0.7, 1.3);
  std::vector<double> pos1(D * 3), rot1;
  for (int i = 0; i < D; ++i) {
    Eigen::Vector3d x(pos0[3 * i], pos0[3 * i + 1], pos0[3 * i + 2]);
    Eigen::Vector3d y = Rg * x + tg;
    for (int d = 0; d < 3; ++d) pos1[3 * i + d] = y[d];
    Eigen::Quaterniond qc = qg * q0[i];
    rot1.insert(rot1.end(), {qc.w(), qc.x(), qc.y(), qc.z()});
  }
  std::vector<int> pi, pj;
  std::vector<double> w;
  Rng wr(42);
  for (int i = 0; i < D; ++i)
    for (int j = 0; j < 2; ++j) {
      pi.push_back(i);
      pj.push_back((i + 1 + j) % D);
      w.push_back(wr.uniform(0.1, 1.0));
    }
  Tape t;
  ValueRef loss = arap_loss(t, t.constant(pos0, D, 3), t.constant(pos1, D, 3),
                            t.constant(rot0, D, 4), t.constant(rot1, D, 4), pi, pj, w, 2, D);
  CHECK(std::abs(t.scalar(loss)) < 1e-9);
}

TEST_CASE("ARAP hand value for a single stretched pair") {
  Tape t;
  std::vector<double> pos_prev = {0, 0, 0, 1, 0, 0};
  std::vector<double> pos_cur = {0, 0, 0, 1.2, 0, 0};
  std::vector<double> rot = {1, 0, 0, 0, 1, 0, 0, 0};
  std::vector<int> pi = {0}, pj = {1};
  std::vector<double> w = {0.7};
  ValueRef loss = arap_loss(t, t.constant(pos_prev, 2, 3), t.constant(pos_cur, 2, 3),
                            t.constant(rot, 2, 4), t.constant(rot, 2, 4), pi, pj, w, 1, 1);
  CHECK(t.scalar(loss) == doctest::Approx(0.7 * 0.2).epsilon(1e-12));
}

TEST_CASE("spatial smoothness is zero for zero heads and for zero perturbation") {
  CoefficientNet net;
  net.L = 2;
  net.k = 3;
  net.l = 2;
  net.m = 2;
  net.hidden = 8;
  Rng rng(51);
  std::vector<double> zero_params = net.init_params(rng);
  std::vector<double> nudged = zero_params;
  for (double& v : nudged) v += rng.uniform(-0.05, 0.05);

  const int B = 4;
  std::vector<double> pts(B * 3), enc_a(static_cast<size_t>(B) * net.input_width());
  for (double& v : pts) v = rng.uniform(-1.0, 1.0);
  for (int i = 0; i < B; ++i)
    encode(pts.data() + 3 * i, net.L, enc_a.data() + static_cast<size_t>(i) * net.input_width());

  auto loss_with = [&](const std::vector<double>& params, double eps) {
    std::vector<double> enc_b(enc_a.size());
    for (int i = 0; i < B; ++i) {
      double moved[3];
      for (int d = 0; d < 3; ++d) moved[d] = pts[3 * i + d] + eps;
      encode(moved, net.L, enc_b.data() + static_cast<size_t>(i) * net.input_width());
    }
    Tape t;
    ValueRef pr = t.constant(params, 1, net.n_params());
    ValueRef ea = t.constant(enc_a, B, net.input_width());
    ValueRef eb = t.constant(enc_b, B, net.input_width());
    return t.scalar(spatial_smoothness_loss(t, net, pr, ea, eb, 0.5, 0.5));
  };

  CHECK(loss_with(zero_params, 1e-3) == 0.0);
  CHECK(loss_with(nudged, 0.0) == 0.0);
  // Small perturbations grow the coefficient gap roughly linearly.
  const double l1 = loss_with(nudged, 1e-4);
  const double l2 = loss_with(nudged, 1e-3);
  const double l3 = loss_with(nudged, 1e-2);
  CHECK(l1 > 0.0);
  CHECK(l2 > l1);
  CHECK(l3 > l2);
}

TEST_CASE("total loss adds the weighted terms that are present") {
  LossWeights w;  // lambda_a = 0.3, lambda_s = 0.6
  Tape t;
  ValueRef one = t.constant_scalar(1.0);
  ValueRef none;
  CHECK(t.scalar(total_loss(t, one, one, one, one, one, w)) ==
        doctest::Approx(1.0 + 1.0 + 1.0 + 0.3 + 0.6).epsilon(1e-14));
  // Before the late stage the entropy term is absent.
  CHECK(t.scalar(total_loss(t, one, one, none, one, one, w)) ==
        doctest::Approx(2.9).epsilon(1e-14));
  // Without masks both mask terms are absent.
  CHECK(t.scalar(total_loss(t, one, none, none, one, one, w)) ==
        doctest::Approx(1.9).epsilon(1e-14));
}

TEST_CASE("the neighbor index is frozen, self-free, and distance-sorted") {
  GaussianSet set;
  // Five points on a line; spacing makes the neighbor order unambiguous.
  set.x_star.values = {0.0, 0, 0, 0.1, 0, 0, 0.25, 0, 0, 0.45, 0, 0, 0.7, 0, 0};
  set.log_scale.values.assign(15, -2.0);
  set.rotation.values.assign(20, 0.0);
  for (int i = 0; i < 5; ++i) set.rotation.values[4 * i] = 1.0;
  set.opacity_logit.values.assign(5, 0.0);
  set.color.values.assign(15, 0.0);
  set.dyn_logit.values.assign(5, 4.0);
  set.resize_all_state();

  const double rho = 2.0;
  std::vector<int> dyn = {0, 1, 2, 3, 4};
  KnnIndex knn = KnnIndex::build(set, dyn, 2, rho, 77);
  CHECK(knn.pool == dyn);
  CHECK(knn.k == 2);
  CHECK(knn.built_at_iter == 77);
  REQUIRE(knn.neighbors.size() == 10);
  for (size_t e = 0; e < knn.pool.size(); ++e)
    for (int s = 0; s < knn.k; ++s) CHECK(knn.neighbors[e * 2 + s] != static_cast<int>(e));
  // Point 0 at x=0: nearest pool rows are 1 (d=0.1) then 2 (d=0.25).
  CHECK(knn.neighbors[0] == 1);
  CHECK(knn.neighbors[1] == 2);
  CHECK(knn.weights[0] == doctest::Approx(std::exp(-rho * 0.01)).epsilon(1e-14));
  CHECK(knn.weights[1] == doctest::Approx(std::exp(-rho * 0.0625)).epsilon(1e-14));
  // Point 4 at x=0.7: nearest are rows 3 (d=0.25) then 2 (d=0.45).
  CHECK(knn.neighbors[4 * 2] == 3);
  CHECK(knn.neighbors[4 * 2 + 1] == 2);
  // Weights decay with distance within each slot list.
  for (size_t e = 0; e < knn.pool.size(); ++e)
    CHECK(knn.weights[e * 2] >= knn.weights[e * 2 + 1]);
}
