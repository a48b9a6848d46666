#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "dgtraj/optim.hpp"
#include "dgtraj/rng.hpp"
#include "dgtraj/tape.hpp"

using namespace dgtraj;

namespace {

std::vector<double> rand_vec(Rng& rng, size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Scalar loss over an op output with fixed weights, so FD and backward see
// the same deterministic function.
using BuildFn = std::function<ValueRef(Tape&, ValueRef)>;

double check_op(const BuildFn& build, const std::vector<double>& x0, int rows, int cols,
                uint64_t wseed, double h = 1e-6) {
  Tape t;
  ValueRef leaf = t.leaf(x0, rows, cols, "x");
  ValueRef y = build(t, leaf);
  Rng wr(wseed);
  std::vector<double> w(static_cast<size_t>(t.rows(y)) * t.cols(y));
  for (double& v : w) v = wr.uniform(-1.0, 1.0);
  ValueRef loss = t.sum(t.mul(y, t.constant(w, t.rows(y), t.cols(y))));
  t.backward(loss);
  std::span<const double> g = t.grad(leaf);
  std::vector<double> analytic(g.begin(), g.end());

  auto f = [&](const std::vector<double>& x) {
    Tape ft;
    ValueRef l = ft.leaf(x, rows, cols, "x");
    ValueRef fy = build(ft, l);
    Rng fwr(wseed);
    std::vector<double> fw(static_cast<size_t>(ft.rows(fy)) * ft.cols(fy));
    for (double& v : fw) v = fwr.uniform(-1.0, 1.0);
    return ft.scalar(ft.sum(ft.mul(fy, ft.constant(fw, ft.rows(fy), ft.cols(fy)))));
  };
  std::vector<double> fd = fd_gradient(f, x0, h);
  return compare_gradients(analytic, fd).max_rel_err;
}

std::vector<double> unit_quats(Rng& rng, int n) {
  std::vector<double> q(static_cast<size_t>(n) * 4);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int d = 0; d < 4; ++d) {
      q[i * 4 + d] = rng.normal();
      s += q[i * 4 + d] * q[i * 4 + d];
    }
    s = std::sqrt(s);
    for (int d = 0; d < 4; ++d) q[i * 4 + d] /= s;
  }
  return q;
}

}  // namespace

TEST_CASE("adam zero gradient leaves values unchanged and advances step") {
  ParamGroup g("w");
  g.values = {1.0, -2.0, 0.5};
  g.sched = {0.1, 1.0, 1};
  g.resize_state();
  std::vector<double> zero(3, 0.0);
  adam_step(g, zero, 0);
  CHECK(g.step == 1);
  CHECK(g.values[0] == 1.0);
  CHECK(g.values[1] == -2.0);
  CHECK(g.values[2] == 0.5);
}

TEST_CASE("step decay schedule is exact") {
  LrSchedule s{1e-3, 0.5, 15000};
  CHECK(s.at(0) == 1e-3);
  CHECK(s.at(14999) == 1e-3);
  CHECK(s.at(15000) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(s.at(30000) == doctest::Approx(2.5e-4).epsilon(1e-15));
}

TEST_CASE("adam single step with degenerate betas matches hand value") {
  // x=3, grad=6, lr=0.1, beta1=beta2=0: m=6, v=36, update = lr*6/(6+eps).
  ParamGroup g("x");
  g.values = {3.0};
  g.sched = {0.1, 1.0, 1};
  g.resize_state();
  adam_step(g, {6.0}, 0, {0.0, 0.0, 1e-8});
  const double expect = 3.0 - 0.1 * (6.0 / (6.0 + 1e-8));
  CHECK(g.values[0] == doctest::Approx(expect).epsilon(1e-15));
  CHECK(g.values[0] == doctest::Approx(2.9000000001666666).epsilon(1e-12));
}

TEST_CASE("adam second moment stays non-negative under random gradients") {
  Rng rng(11);
  ParamGroup g("w");
  g.values = rand_vec(rng, 16, -1.0, 1.0);
  g.sched = {1e-2, 1.0, 1};
  g.resize_state();
  for (int it = 0; it < 20; ++it) {
    std::vector<double> grad = rand_vec(rng, 16, -2.0, 2.0);
    adam_step(g, grad, it);
  }
  CHECK(g.step == 20);
  for (double v : g.v) CHECK(v >= 0.0);
}

TEST_CASE("adam rejects length mismatch and non-finite gradients") {
  ParamGroup g("w");
  g.values = {1.0, 2.0};
  g.resize_state();
  CHECK_THROWS_AS(adam_step(g, {1.0}, 0), std::runtime_error);
  std::vector<double> bad = {1.0, std::nan("")};
  try {
    adam_step(g, bad, 0);
    FAIL("expected throw");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("w") != std::string::npos);
  }
}

TEST_CASE("fd_gradient of x^2 and of a constant") {
  auto sq = [](const std::vector<double>& x) { return x[0] * x[0]; };
  std::vector<double> g = fd_gradient(sq, {3.0}, 1e-4);
  CHECK(g[0] == doctest::Approx(6.0).epsilon(1e-6));
  auto c = [](const std::vector<double>&) { return 7.5; };
  for (double v : fd_gradient(c, {1.0, 2.0})) CHECK(v == 0.0);
}

TEST_CASE("backward of y = 2x") {
  Tape t;
  ValueRef x = t.leaf(std::vector<double>{5.0}, 1, 1, "x");
  t.backward(t.scale(x, 2.0));
  CHECK(t.grad(x)[0] == 2.0);
}

TEST_CASE("detach blocks gradient flow exactly") {
  Tape t;
  ValueRef x = t.leaf(std::vector<double>{1.5}, 1, 1, "x");
  ValueRef y = t.mul(t.detach(x), x);  // d/dx through the live factor only
  t.backward(t.sum(y));
  CHECK(t.grad(x)[0] == 1.5);

  Tape t2;
  ValueRef x2 = t2.leaf(std::vector<double>{1.5}, 1, 1, "x");
  t2.backward(t2.sum(t2.mul(t2.detach(x2), t2.detach(x2))));
  CHECK(t2.grad(x2)[0] == 0.0);
}

TEST_CASE("unreachable leaf gets a zero gradient") {
  Tape t;
  ValueRef a = t.leaf(std::vector<double>{1.0, 2.0}, 2, 1, "a");
  ValueRef b = t.leaf(std::vector<double>{3.0, 4.0}, 2, 1, "b");
  t.backward(t.sum(a));
  std::span<const double> gb = t.grad(b);
  CHECK(gb.size() == 2);
  CHECK(gb[0] == 0.0);
  CHECK(gb[1] == 0.0);
}

TEST_CASE("backward is bit-deterministic across identical tapes") {
  Rng rng(7);
  std::vector<double> x0 = rand_vec(rng, 12, 0.2, 1.8);
  auto run = [&](std::vector<double>& out) {
    Tape t;
    ValueRef x = t.leaf(x0, 4, 3, "x");
    ValueRef y = t.mul(t.exp(t.scale(x, 0.3)), t.sigmoid(x));
    ValueRef z = t.add(y, t.rows_normalize(x));
    t.backward(t.mean(z));
    std::span<const double> g = t.grad(x);
    out.assign(g.begin(), g.end());
  };
  std::vector<double> g1, g2;
  run(g1);
  run(g2);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("elementwise and reduction ops match finite differences") {
  Rng rng(21);
  const int R = 5, C = 3;
  std::vector<double> xp = rand_vec(rng, R * C, 0.3, 1.7);    // positive, off kinks
  std::vector<double> xm = rand_vec(rng, R * C, -1.7, -0.3);  // negative branch
  uint64_t ws = 100;
  auto two = [&](const char* what, const BuildFn& f) {
    INFO(what);
    CHECK(check_op(f, xp, R, C, ws++) < 1e-3);
  };
  two("exp", [](Tape& t, ValueRef x) { return t.exp(x); });
  two("log", [](Tape& t, ValueRef x) { return t.log(x); });
  two("sqrt", [](Tape& t, ValueRef x) { return t.sqrt(x); });
  two("sigmoid", [](Tape& t, ValueRef x) { return t.sigmoid(x); });
  two("neg", [](Tape& t, ValueRef x) { return t.neg(x); });
  two("scale", [](Tape& t, ValueRef x) { return t.scale(x, -2.5); });
  two("add_scalar", [](Tape& t, ValueRef x) { return t.add_scalar(x, 0.7); });
  two("sum", [](Tape& t, ValueRef x) { return t.reshape(t.sum(x), 1, 1); });
  two("mean", [](Tape& t, ValueRef x) { return t.reshape(t.mean(x), 1, 1); });
  two("abs+", [](Tape& t, ValueRef x) { return t.abs(x); });
  two("relu+", [](Tape& t, ValueRef x) { return t.relu(x); });
  INFO("abs-");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.abs(x); }, xm, R, C, 200) < 1e-3);
  INFO("relu-");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.relu(x); }, xm, R, C, 201) < 1e-3);
  INFO("clamp interior");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.clamp(x, 0.0, 2.0); }, xp, R, C, 202) <
        1e-3);

  // Binary ops against a constant second operand.
  std::vector<double> y0 = rand_vec(rng, R * C, 0.4, 1.6);
  auto with_const = [&](const char* what, ValueRef (Tape::*op)(ValueRef, ValueRef),
                        uint64_t seed) {
    INFO(what);
    BuildFn f = [op, y0, R, C](Tape& t, ValueRef x) {
      return (t.*op)(x, t.constant(y0, R, C));
    };
    CHECK(check_op(f, xp, R, C, seed) < 1e-3);
    // And through the second operand.
    BuildFn g = [op, y0, R, C](Tape& t, ValueRef x) {
      return (t.*op)(t.constant(y0, R, C), x);
    };
    CHECK(check_op(g, xp, R, C, seed + 50) < 1e-3);
  };
  with_const("add", &Tape::add, 300);
  with_const("sub", &Tape::sub, 301);
  with_const("mul", &Tape::mul, 302);
  with_const("div", &Tape::div, 303);
}

TEST_CASE("structural ops match finite differences") {
  Rng rng(22);
  const int R = 6, C = 3;
  std::vector<double> x0 = rand_vec(rng, R * C, -1.0, 1.0);
  INFO("gather_rows");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.gather_rows(x, {4, 0, 2, 2}); }, x0, R, C,
                 400) < 1e-3);
  INFO("overwrite_rows");
  std::vector<double> repl = rand_vec(rng, 2 * C, -1.0, 1.0);
  CHECK(check_op(
            [repl, C](Tape& t, ValueRef x) {
              return t.overwrite_rows(x, t.constant(repl, 2, C), {1, 3});
            },
            x0, R, C, 401) < 1e-3);
  INFO("overwrite_rows replacement side");
  std::vector<double> base = rand_vec(rng, R * C, -1.0, 1.0);
  CHECK(check_op(
            [base, R, C](Tape& t, ValueRef x) {
              return t.overwrite_rows(t.constant(base, R, C), x, {5, 0});
            },
            rand_vec(rng, 2 * C, -1.0, 1.0), 2, C, 402) < 1e-3);
  INFO("slice_cols");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.slice_cols(x, 1, 3); }, x0, R, C, 403) <
        1e-3);
  INFO("reshape");
  CHECK(check_op([R, C](Tape& t, ValueRef x) { return t.reshape(x, C, R); }, x0, R, C, 404) <
        1e-3);
  INFO("rows_scale");
  std::vector<double> s = rand_vec(rng, R, 0.5, 1.5);
  CHECK(check_op([s, R](Tape& t, ValueRef x) { return t.rows_scale(x, t.constant(s, R, 1)); },
                 x0, R, C, 405) < 1e-3);
  INFO("rows_scale scalar side");
  std::vector<double> m = rand_vec(rng, R * C, -1.0, 1.0);
  CHECK(check_op(
            [m, R, C](Tape& t, ValueRef x) { return t.rows_scale(t.constant(m, R, C), x); },
            s, R, 1, 406) < 1e-3);
  INFO("rows_norm");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.rows_norm(x); },
                 rand_vec(rng, R * C, 0.4, 1.4), R, C, 407) < 1e-3);
  INFO("rows_normalize");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.rows_normalize(x); },
                 rand_vec(rng, R * C, 0.4, 1.4), R, C, 408) < 1e-3);
}

TEST_CASE("rotation and covariance kernels match finite differences") {
  Rng rng(23);
  const int P = 4;
  std::vector<double> q0 = unit_quats(rng, P);
  INFO("quat_to_rotmat");
  CHECK(check_op([](Tape& t, ValueRef q) { return t.quat_to_rotmat(t.rows_normalize(q)); }, q0,
                 P, 4, 500) < 1e-3);

  std::vector<double> rot(static_cast<size_t>(P) * 9);
  {
    Tape t;
    ValueRef r = t.quat_to_rotmat(t.constant(q0, P, 4));
    std::span<const double> v = t.val(r);
    rot.assign(v.begin(), v.end());
  }
  std::vector<double> sc = rand_vec(rng, P * 3, 0.5, 1.5);
  INFO("rows_mat_diag");
  CHECK(check_op(
            [sc, P](Tape& t, ValueRef m) { return t.rows_mat_diag(m, t.constant(sc, P, 3)); },
            rot, P, 9, 501) < 1e-3);
  INFO("rows_mat_diag scale side");
  CHECK(check_op(
            [rot, P](Tape& t, ValueRef s) { return t.rows_mat_diag(t.constant(rot, P, 9), s); },
            sc, P, 3, 502) < 1e-3);
  INFO("rows_mmt_sym");
  CHECK(check_op([](Tape& t, ValueRef m) { return t.rows_mmt_sym(m); }, rot, P, 9, 503) < 1e-3);
  INFO("rows_matmul_abt3");
  std::vector<double> b = rand_vec(rng, P * 9, -1.0, 1.0);
  CHECK(check_op(
            [b, P](Tape& t, ValueRef a) { return t.rows_matmul_abt3(a, t.constant(b, P, 9)); },
            rot, P, 9, 504) < 1e-3);
  INFO("rows_matvec3");
  std::vector<double> vv = rand_vec(rng, P * 3, -1.0, 1.0);
  CHECK(check_op(
            [vv, P](Tape& t, ValueRef mref) {
              return t.rows_matvec3(mref, t.constant(vv, P, 3));
            },
            rot, P, 9, 505) < 1e-3);

  double Rc[9] = {0, -1, 0, 1, 0, 0, 0, 0, 1};
  double tc[3] = {0.2, -0.1, 4.0};
  std::vector<double> pts = rand_vec(rng, P * 3, -1.0, 1.0);
  INFO("const_affine");
  CHECK(check_op([&](Tape& t, ValueRef x) { return t.const_affine(x, Rc, tc); }, pts, P, 3,
                 506) < 1e-3);
  std::vector<double> sym = {0.8, 0.1, -0.05, 0.9, 0.02, 1.1,
                             1.2, 0.0, 0.1,   0.7, -0.1, 0.9,
                             1.0, 0.2, 0.0,   1.0, 0.1,  0.8,
                             0.9, 0.0, 0.0,   1.3, 0.0,  1.4};
  INFO("const_rot_sym");
  CHECK(check_op([&](Tape& t, ValueRef sref) { return t.const_rot_sym(sref, Rc); }, sym, P, 6,
                 507) < 1e-3);

  std::vector<double> cam_pts(static_cast<size_t>(P) * 3);
  for (int i = 0; i < P; ++i) {
    cam_pts[i * 3 + 0] = rng.uniform(-1.0, 1.0);
    cam_pts[i * 3 + 1] = rng.uniform(-1.0, 1.0);
    cam_pts[i * 3 + 2] = 3.0 + i;
  }
  INFO("perspective");
  CHECK(check_op([](Tape& t, ValueRef x) { return t.perspective(x, 40.0, 42.0, 16.0, 15.0); },
                 cam_pts, P, 3, 508) < 1e-3);
  INFO("cov_project points side");
  CHECK(check_op(
            [sym, P](Tape& t, ValueRef x) {
              return t.cov_project(x, t.constant(sym, P, 6), 40.0, 42.0);
            },
            cam_pts, P, 3, 509) < 1e-3);
  INFO("cov_project covariance side");
  CHECK(check_op(
            [cam_pts, P](Tape& t, ValueRef sref) {
              return t.cov_project(t.constant(cam_pts, P, 3), sref, 40.0, 42.0);
            },
            sym, P, 6, 510) < 1e-3);
}

TEST_CASE("network and image kernels match finite differences") {
  Rng rng(24);
  const int B = 3, In = 4, Out = 5;
  std::vector<double> X = rand_vec(rng, B * In, -1.0, 1.0);
  std::vector<double> Wm = rand_vec(rng, Out * In, -0.7, 0.7);
  std::vector<double> bias = rand_vec(rng, Out, -0.3, 0.3);
  INFO("affine x");
  CHECK(check_op(
            [&](Tape& t, ValueRef x) {
              return t.affine(x, t.constant(Wm, Out, In), t.constant(bias, 1, Out));
            },
            X, B, In, 600) < 1e-3);
  INFO("affine w");
  CHECK(check_op(
            [&](Tape& t, ValueRef w) {
              return t.affine(t.constant(X, B, In), w, t.constant(bias, 1, Out));
            },
            Wm, Out, In, 601) < 1e-3);
  INFO("affine b");
  CHECK(check_op(
            [&](Tape& t, ValueRef bb) {
              return t.affine(t.constant(X, B, In), t.constant(Wm, Out, In), bb);
            },
            bias, 1, Out, 602) < 1e-3);

  const int Wd = 6, Hd = 5, Cd = 2;
  std::vector<double> img = rand_vec(rng, Wd * Hd * Cd, 0.0, 1.0);
  std::vector<double> kh = {0.5, 0.3, 0.1};
  INFO("conv1d x axis");
  CHECK(check_op(
            [&](Tape& t, ValueRef x) { return t.conv1d(x, 0, Wd, Hd, Cd, kh); }, img,
            Wd * Hd, Cd, 603) < 1e-3);
  INFO("conv1d y axis");
  CHECK(check_op(
            [&](Tape& t, ValueRef x) { return t.conv1d(x, 1, Wd, Hd, Cd, kh); }, img,
            Wd * Hd, Cd, 604) < 1e-3);

  const int k = 4, width = 3, Pn = 3;
  std::vector<double> coeffs = rand_vec(rng, Pn * k * width, -1.0, 1.0);
  std::vector<double> brow = rand_vec(rng, k, -1.0, 1.0);
  INFO("basis_combine coeffs");
  CHECK(check_op(
            [&](Tape& t, ValueRef c) {
              return t.basis_combine(c, t.constant(brow, 1, k), width);
            },
            coeffs, Pn, k * width, 605) < 1e-3);
  INFO("basis_combine basis");
  CHECK(check_op(
            [&](Tape& t, ValueRef b) {
              return t.basis_combine(t.constant(coeffs, Pn, k * width), b, width);
            },
            brow, 1, k, 606) < 1e-3);
}
