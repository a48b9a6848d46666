#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <vector>

#include "dgtraj/motion_field.hpp"
#include "dgtraj/optim.hpp"
#include "dgtraj/rng.hpp"
#include "dgtraj/tape.hpp"
#include "dgtraj/trajectory.hpp"

using namespace dgtraj;

namespace {

CoefficientNet small_net() {
  CoefficientNet net;
  net.L = 2;
  net.k = 3;
  net.l = 2;
  net.m = 2;
  net.hidden = 8;
  return net;
}

std::vector<double> nudged_params(const CoefficientNet& net, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> p = net.init_params(rng);
  for (double& v : p) v += rng.uniform(-0.05, 0.05);
  return p;
}

// Relative error where the gradient is significant; near zero the quotient
// only measures FD roundoff against the 1e-8 floor, so those entries get an
// absolute bound instead.
double split_grad_err(const std::vector<double>& analytic, const std::vector<double>& fd) {
  double worst_rel = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double mag = std::max(std::abs(analytic[i]), std::abs(fd[i]));
    if (mag > 1e-6)
      worst_rel = std::max(worst_rel, std::abs(analytic[i] - fd[i]) / mag);
    else
      CHECK(std::abs(analytic[i] - fd[i]) < 1e-8);
  }
  return worst_rel;
}

}  // namespace

TEST_CASE("encoding of the origin alternates zeros and ones") {
  const int L = 12;
  std::vector<double> out(encoding_width(L));
  double x[3] = {0.0, 0.0, 0.0};
  encode(x, L, out.data());
  for (size_t i = 0; i < out.size(); i += 2) {
    CHECK(out[i] == 0.0);      // sin slot
    CHECK(out[i + 1] == 1.0);  // cos slot
  }
}

TEST_CASE("first frequency at x=1 lands on (0,-1)") {
  const int L = 3;
  std::vector<double> out(encoding_width(L));
  double x[3] = {1.0, 0.0, 0.0};
  encode(x, L, out.data());
  CHECK(std::abs(out[0]) < 1e-12);  // sin(pi)
  CHECK(out[1] == doctest::Approx(-1.0).epsilon(1e-15));
}

TEST_CASE("encoding is 2-periodic in every coordinate") {
  const int L = 6;
  std::vector<double> a(encoding_width(L)), b(encoding_width(L));
  double xa[3] = {0.37, -0.81, 0.12};
  double xb[3] = {0.37 + 2.0, -0.81, 0.12};
  encode(xa, L, a.data());
  encode(xb, L, b.data());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-9));
}

TEST_CASE("encoding rejects non-finite input") {
  std::vector<double> out(encoding_width(2));
  double x[3] = {std::nan(""), 0.0, 0.0};
  CHECK_THROWS_AS(encode(x, 2, out.data()), std::invalid_argument);
}

TEST_CASE("freshly initialized heads output exactly zero") {
  CoefficientNet net = small_net();
  Rng rng(3);
  std::vector<double> params = net.init_params(rng);
  const int B = 5;
  std::vector<double> enc(static_cast<size_t>(B) * net.input_width());
  for (double& v : enc) v = rng.uniform(-1.0, 1.0);
  std::vector<double> sigma, beta, gamma;
  net.forward_plain(params, enc.data(), B, sigma, beta, gamma);
  REQUIRE(sigma.size() == static_cast<size_t>(B) * 3 * net.k);
  REQUIRE(beta.size() == static_cast<size_t>(B) * 3 * net.l);
  REQUIRE(gamma.size() == static_cast<size_t>(B) * 4 * net.m);
  for (double v : sigma) CHECK(v == 0.0);
  for (double v : beta) CHECK(v == 0.0);
  for (double v : gamma) CHECK(v == 0.0);
}

TEST_CASE("coefficients are input-deterministic and time-free") {
  CoefficientNet net = small_net();
  std::vector<double> params = nudged_params(net, 17);
  Rng rng(4);
  const int B = 3;
  std::vector<double> enc(static_cast<size_t>(B) * net.input_width());
  for (double& v : enc) v = rng.uniform(-1.0, 1.0);
  std::vector<double> s1, b1, g1, s2, b2, g2;
  net.forward_plain(params, enc.data(), B, s1, b1, g1);
  net.forward_plain(params, enc.data(), B, s2, b2, g2);
  CHECK(std::memcmp(s1.data(), s2.data(), s1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(b1.data(), b2.data(), b1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("tape forward of the net matches the plain forward") {
  CoefficientNet net = small_net();
  std::vector<double> params = nudged_params(net, 23);
  Rng rng(6);
  const int B = 4;
  std::vector<double> enc(static_cast<size_t>(B) * net.input_width());
  for (double& v : enc) v = rng.uniform(-1.0, 1.0);
  std::vector<double> sp, bp, gp;
  net.forward_plain(params, enc.data(), B, sp, bp, gp);

  Tape t;
  ValueRef pref = t.constant(params, 1, net.n_params());
  ValueRef eref = t.constant(enc, B, net.input_width());
  CoefficientNet::Heads h = net.forward(t, pref, eref);
  std::span<const double> st = t.val(h.sigma);
  std::span<const double> bt = t.val(h.beta);
  std::span<const double> gt = t.val(h.gamma);
  REQUIRE(st.size() == sp.size());
  for (size_t i = 0; i < sp.size(); ++i) CHECK(st[i] == doctest::Approx(sp[i]).epsilon(1e-14));
  for (size_t i = 0; i < bp.size(); ++i) CHECK(bt[i] == doctest::Approx(bp[i]).epsilon(1e-14));
  for (size_t i = 0; i < gp.size(); ++i) CHECK(gt[i] == doctest::Approx(gp[i]).epsilon(1e-14));
}

TEST_CASE("zero heads make deform the identity at every time") {
  CoefficientNet net = small_net();
  Rng rng(8);
  std::vector<double> params = net.init_params(rng);  // zero heads
  MotionBasis basis = make_motion_basis(6, net.k, net.l, net.m);

  double x[3] = {0.3, -0.2, 1.1};
  double s[3] = {-1.0, -1.2, -0.8};
  double r[4] = {0.5, 0.5, 0.5, 0.5};
  std::vector<double> enc(net.input_width());
  encode(x, net.L, enc.data());
  std::vector<double> sigma, beta, gamma;
  net.forward_plain(params, enc.data(), 1, sigma, beta, gamma);
  for (double t : {0.0, 1.0, 2.5, 5.0}) {
    DeformedState d = deform_plain(x, s, r, sigma.data(), beta.data(), gamma.data(), basis, t,
                                   net.k, net.l, net.m);
    for (int i = 0; i < 3; ++i) {
      CHECK(d.position[i] == x[i]);
      CHECK(d.log_scale[i] == s[i]);
    }
    for (int i = 0; i < 4; ++i) CHECK(d.rotation[i] == doctest::Approx(r[i]).epsilon(1e-15));
  }
}

TEST_CASE("constant position basis shifts by the coefficient times the mode value") {
  // One basis column, DC of a 4-frame DCT: value 0.5 at every frame. A
  // coefficient of (1,0,0) must displace x by (0.5,0,0) at all times.
  MotionBasis basis;
  basis.n_frames = 4;
  basis.theta = dct_basis(4, 1);
  basis.lambda = dct_basis(4, 1);
  basis.eta = dct_basis(4, 1);
  double x[3] = {0.0, 0.0, 0.0};
  double s[3] = {0.0, 0.0, 0.0};
  double r[4] = {1.0, 0.0, 0.0, 0.0};
  std::vector<double> sigma = {1.0, 0.0, 0.0};     // k=1, row-major k x 3
  std::vector<double> beta = {0.0, 0.0, 0.0};      // l=1
  std::vector<double> gamma = {0.0, 0.0, 0.0, 0.0};  // m=1
  for (double t : {0.0, 1.0, 2.0, 3.0, 1.5}) {
    DeformedState d = deform_plain(x, s, r, sigma.data(), beta.data(), gamma.data(), basis, t,
                                   1, 1, 1);
    CHECK(d.position[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(d.position[1] == 0.0);
    CHECK(d.position[2] == 0.0);
  }
}

TEST_CASE("deformed quaternions are unit to machine precision") {
  CoefficientNet net = small_net();
  std::vector<double> params = nudged_params(net, 31);
  MotionBasis basis = make_motion_basis(5, net.k, net.l, net.m);
  Rng rng(32);
  for (int trial = 0; trial < 8; ++trial) {
    double x[3], s[3], r[4];
    for (double& v : x) v = rng.uniform(-1.0, 1.0);
    for (double& v : s) v = rng.uniform(-1.5, -0.5);
    double nq = 0.0;
    for (double& v : r) {
      v = rng.normal();
      nq += v * v;
    }
    nq = std::sqrt(nq);
    for (double& v : r) v /= nq;
    std::vector<double> enc(net.input_width());
    encode(x, net.L, enc.data());
    std::vector<double> sigma, beta, gamma;
    net.forward_plain(params, enc.data(), 1, sigma, beta, gamma);
    const double t = rng.uniform(0.0, 4.0);
    DeformedState d = deform_plain(x, s, r, sigma.data(), beta.data(), gamma.data(), basis, t,
                                   net.k, net.l, net.m);
    double n = 0.0;
    for (double v : d.rotation) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-12);
  }
}

TEST_CASE("deform rejects out-of-range times") {
  CoefficientNet net = small_net();
  Rng rng(40);
  std::vector<double> params = net.init_params(rng);
  MotionBasis basis = make_motion_basis(4, net.k, net.l, net.m);
  double x[3] = {0, 0, 0}, s[3] = {0, 0, 0}, r[4] = {1, 0, 0, 0};
  std::vector<double> enc(net.input_width());
  encode(x, net.L, enc.data());
  std::vector<double> sigma, beta, gamma;
  net.forward_plain(params, enc.data(), 1, sigma, beta, gamma);
  CHECK_THROWS_AS(deform_plain(x, s, r, sigma.data(), beta.data(), gamma.data(), basis, 3.5,
                               net.k, net.l, net.m),
                  std::out_of_range);

  Tape t;
  ValueRef th = t.constant(std::vector<double>(4 * net.k, 0.1), 4, net.k);
  CHECK_THROWS_AS(basis_row_at(t, th, 4, -0.2), std::out_of_range);
  CHECK_THROWS_AS(basis_row_at(t, th, 4, 3.01), std::out_of_range);
}

TEST_CASE("position gradients bypass the encoding and keep the additive path") {
  // The graph encodes x from plain values; the x leaf reaches the loss only
  // through the additive term of the deformed position.
  CoefficientNet net = small_net();
  std::vector<double> params = nudged_params(net, 51);
  const int B = 3;
  Rng rng(52);
  std::vector<double> xs(B * 3);
  for (double& v : xs) v = rng.uniform(-1.0, 1.0);
  std::vector<double> enc(static_cast<size_t>(B) * net.input_width());
  for (int i = 0; i < B; ++i) encode(xs.data() + i * 3, net.L, enc.data() + static_cast<size_t>(i) * net.input_width());
  std::vector<double> ss(B * 3, -1.0);
  std::vector<double> rs;
  for (int i = 0; i < B; ++i) {
    rs.insert(rs.end(), {1.0, 0.0, 0.0, 0.0});
  }

  Tape t;
  ValueRef x = t.leaf(xs, B, 3, "x");
  ValueRef s = t.constant(ss, B, 3);
  ValueRef r = t.constant(rs, B, 4);
  ValueRef p = t.constant(params, 1, net.n_params());
  ValueRef e = t.constant(enc, B, net.input_width());
  CoefficientNet::Heads h = net.forward(t, p, e);
  MotionBasis basis = make_motion_basis(5, net.k, net.l, net.m);
  std::vector<double> th(basis.theta.rows() * basis.theta.cols());
  std::vector<double> la(basis.lambda.rows() * basis.lambda.cols());
  std::vector<double> et(basis.eta.rows() * basis.eta.cols());
  for (int i = 0; i < basis.theta.rows(); ++i)
    for (int j = 0; j < basis.theta.cols(); ++j) th[i * basis.theta.cols() + j] = basis.theta(i, j);
  for (int i = 0; i < basis.lambda.rows(); ++i)
    for (int j = 0; j < basis.lambda.cols(); ++j) la[i * basis.lambda.cols() + j] = basis.lambda(i, j);
  for (int i = 0; i < basis.eta.rows(); ++i)
    for (int j = 0; j < basis.eta.cols(); ++j) et[i * basis.eta.cols() + j] = basis.eta(i, j);
  ValueRef throw_ = t.constant(th, 5, net.k);
  ValueRef laref = t.constant(la, 5, net.l);
  ValueRef etref = t.constant(et, 5, net.m);
  DeformedRefs d = deform(t, x, s, r, h, basis_row_at(t, throw_, 5, 2.0),
                          basis_row_at(t, laref, 5, 2.0), basis_row_at(t, etref, 5, 2.0));
  t.backward(t.sum(d.position));
  std::span<const double> g = t.grad(x);
  for (size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 1.0);
}

TEST_CASE("deform gradients match finite differences through net weights and bases") {
  CoefficientNet net = small_net();
  std::vector<double> params0 = nudged_params(net, 61);
  const int B = 2, N = 5;
  Rng rng(62);
  std::vector<double> xs(B * 3), ss(B * 3), rs;
  for (double& v : xs) v = rng.uniform(-1.0, 1.0);
  for (double& v : ss) v = rng.uniform(-1.5, -0.5);
  for (int i = 0; i < B; ++i) rs.insert(rs.end(), {0.9, 0.1, -0.3, 0.2});
  std::vector<double> enc(static_cast<size_t>(B) * net.input_width());
  for (int i = 0; i < B; ++i)
    encode(xs.data() + i * 3, net.L, enc.data() + static_cast<size_t>(i) * net.input_width());
  MotionBasis basis = make_motion_basis(N, net.k, net.l, net.m);
  std::vector<double> th(N * net.k);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < net.k; ++j) th[i * net.k + j] = basis.theta(i, j);

  const double tq = 2.7;
  auto loss_given = [&](Tape& t, ValueRef pref, ValueRef thref) {
    ValueRef x = t.constant(xs, B, 3);
    ValueRef s = t.constant(ss, B, 3);
    ValueRef r = t.constant(rs, B, 4);
    ValueRef e = t.constant(enc, B, net.input_width());
    CoefficientNet::Heads h = net.forward(t, pref, e);
    std::vector<double> la(N * net.l), et(N * net.m);
    for (int i = 0; i < N; ++i) {
      for (int j = 0; j < net.l; ++j) la[i * net.l + j] = basis.lambda(i, j);
      for (int j = 0; j < net.m; ++j) et[i * net.m + j] = basis.eta(i, j);
    }
    DeformedRefs d = deform(t, x, s, r, h, basis_row_at(t, thref, N, tq),
                            basis_row_at(t, t.constant(la, N, net.l), N, tq),
                            basis_row_at(t, t.constant(et, N, net.m), N, tq));
    ValueRef part = t.add(t.sum(t.mul(d.position, d.position)), t.sum(d.log_scale));
    return t.add(part, t.sum(t.mul(d.rotation, d.rotation)));
  };

  {  // net params
    Tape t;
    ValueRef p = t.leaf(params0, 1, net.n_params(), "net");
    t.backward(loss_given(t, p, t.constant(th, N, net.k)));
    std::span<const double> g = t.grad(p);
    std::vector<double> analytic(g.begin(), g.end());
    auto f = [&](const std::vector<double>& v) {
      Tape ft;
      return ft.scalar(loss_given(ft, ft.constant(v, 1, net.n_params()),
                                  ft.constant(th, N, net.k)));
    };
    CHECK(split_grad_err(analytic, fd_gradient(f, params0, 1e-5)) < 1e-3);
  }
  {  // basis entries
    Tape t;
    ValueRef thref = t.leaf(th, N, net.k, "theta");
    t.backward(loss_given(t, t.constant(params0, 1, net.n_params()), thref));
    std::span<const double> g = t.grad(thref);
    std::vector<double> analytic(g.begin(), g.end());
    auto f = [&](const std::vector<double>& v) {
      Tape ft;
      return ft.scalar(loss_given(ft, ft.constant(params0, 1, net.n_params()),
                                  ft.constant(v, N, net.k)));
    };
    CHECK(split_grad_err(analytic, fd_gradient(f, th, 1e-5)) < 1e-3);
  }
}

TEST_CASE("deform displacements stay in the span of the position basis") {
  CoefficientNet net = small_net();
  std::vector<double> params = nudged_params(net, 71);
  const int N = 8;
  MotionBasis basis = make_motion_basis(N, net.k, net.l, net.m);
  double x[3] = {0.4, -0.6, 0.2};
  double s[3] = {-1.0, -1.0, -1.0};
  double r[4] = {1.0, 0.0, 0.0, 0.0};
  std::vector<double> enc(net.input_width());
  encode(x, net.L, enc.data());
  std::vector<double> sigma, beta, gamma;
  net.forward_plain(params, enc.data(), 1, sigma, beta, gamma);

  Eigen::MatrixXd disp(N, 3);
  for (int t = 0; t < N; ++t) {
    DeformedState d = deform_plain(x, s, r, sigma.data(), beta.data(), gamma.data(), basis,
                                   static_cast<double>(t), net.k, net.l, net.m);
    for (int c = 0; c < 3; ++c) disp(t, c) = d.position[c] - x[c];
  }
  Eigen::MatrixXd A = fit_coefficients(disp, basis.theta);
  Eigen::MatrixXd back = reconstruct(basis.theta, A);
  CHECK((back - disp).cwiseAbs().maxCoeff() < 1e-8);
}
