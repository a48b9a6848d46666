#include "dgtraj/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

#include "dgtraj/gaussian_scene.hpp"
#include "dgtraj/losses.hpp"
#include "dgtraj/motion_field.hpp"
#include "dgtraj/optim.hpp"
#include "dgtraj/rasterizer.hpp"
#include "dgtraj/rng.hpp"
#include "dgtraj/tape.hpp"
#include "dgtraj/trajectory.hpp"

namespace dgtraj {

namespace {

using BuildFn = std::function<ValueRef(Tape&, ValueRef)>;

struct Probe {
  std::string module;
  std::string name;
  std::vector<double> x0;
  int rows = 0, cols = 0;
  BuildFn build;
  double h = 1e-5;
};

// Central differences at a deterministic subsample of coordinates; full
// vectors are probed when small.
GradCheckResult check_probe(const Probe& p, double tol) {
  Tape tape;
  ValueRef leaf = tape.leaf(p.x0, p.rows, p.cols, "probe");
  ValueRef loss = p.build(tape, leaf);
  tape.backward(loss);
  std::span<const double> g = tape.grad(leaf);
  std::vector<double> analytic(g.begin(), g.end());

  const size_t n = p.x0.size();
  const size_t n_probe = std::min<size_t>(n, 24);
  std::vector<size_t> idx(n_probe);
  for (size_t j = 0; j < n_probe; ++j) idx[j] = j * n / n_probe;

  auto eval = [&](const std::vector<double>& x) {
    Tape t2;
    ValueRef l2 = t2.leaf(x, p.rows, p.cols, "probe");
    ValueRef loss2 = p.build(t2, l2);
    const double v = t2.scalar(loss2);
    if (!std::isfinite(v)) throw std::runtime_error("gradcheck: non-finite loss in " + p.name);
    return v;
  };

  std::vector<double> a_sub, f_sub;
  std::vector<double> x = p.x0;
  for (size_t i : idx) {
    const double orig = x[i];
    x[i] = orig + p.h;
    const double up = eval(x);
    x[i] = orig - p.h;
    const double dn = eval(x);
    x[i] = orig;
    a_sub.push_back(analytic[i]);
    f_sub.push_back((up - dn) / (2.0 * p.h));
  }
  GradReport rep = compare_gradients(a_sub, f_sub);
  return {p.module, p.name, rep.max_rel_err, rep.ok(tol)};
}

std::vector<double> rand_vec(Rng& rng, size_t n, double lo, double hi) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

ValueRef weighted_sum(Tape& t, ValueRef x, Rng& rng) {
  std::vector<double> w(static_cast<size_t>(t.rows(x)) * t.cols(x));
  for (double& v : w) v = rng.uniform(-1.0, 1.0);
  return t.sum(t.mul(x, t.constant(w, t.rows(x), t.cols(x))));
}

// ---------------------------------------------------------------------------

void trajectory_probes(std::vector<Probe>& out) {
  const int N = 6, K = 4;
  Eigen::MatrixXd B = dct_basis(N, K);
  std::vector<double> flat(static_cast<size_t>(N) * K);
  for (int r = 0; r < N; ++r)
    for (int c = 0; c < K; ++c) flat[static_cast<size_t>(r) * K + c] = B(r, c);
  out.push_back({"trajectory", "basis_row_fractional", flat, N, K,
                 [](Tape& t, ValueRef leaf) {
                   Rng rng(11);
                   ValueRef row = basis_row_at(t, leaf, 6, 2.3);
                   return weighted_sum(t, row, rng);
                 }});
  out.push_back({"trajectory", "basis_row_integer", flat, N, K,
                 [](Tape& t, ValueRef leaf) {
                   Rng rng(12);
                   ValueRef row = basis_row_at(t, leaf, 6, 4.0);
                   return weighted_sum(t, row, rng);
                 }});
}

void motion_field_probes(std::vector<Probe>& out) {
  CoefficientNet net;
  net.L = 2;
  net.k = 3;
  net.l = 2;
  net.m = 2;
  net.hidden = 8;
  const int B = 4;
  Rng rng(21);
  std::vector<double> params = net.init_params(rng);
  // Zero-initialized heads give zero gradients into the head weights; nudge
  // everything off zero so the probe is informative.
  for (double& p : params) p += rng.uniform(-0.05, 0.05);
  std::vector<double> enc(static_cast<size_t>(B) * net.input_width());
  for (int i = 0; i < B; ++i) {
    double x[3] = {rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    encode(x, net.L, enc.data() + static_cast<size_t>(i) * net.input_width());
  }
  out.push_back({"motion_field", "net_params", params, 1, net.n_params(),
                 [net, enc, B](Tape& t, ValueRef leaf) {
                   Rng r2(22);
                   ValueRef e = t.constant(enc, B, net.input_width());
                   CoefficientNet::Heads h = net.forward(t, leaf, e);
                   return t.add(t.add(weighted_sum(t, h.sigma, r2), weighted_sum(t, h.beta, r2)),
                                weighted_sum(t, h.gamma, r2));
                 }});

  // Deform wrt the rest state; heads and basis rows are constants.
  const int k = 3, l = 2, m = 2;
  std::vector<double> sig = rand_vec(rng, B * 3 * k, -0.3, 0.3);
  std::vector<double> bet = rand_vec(rng, B * 3 * l, -0.3, 0.3);
  std::vector<double> gam = rand_vec(rng, B * 4 * m, -0.3, 0.3);
  std::vector<double> th = rand_vec(rng, k, -0.5, 0.5);
  std::vector<double> la = rand_vec(rng, l, -0.5, 0.5);
  std::vector<double> et = rand_vec(rng, m, -0.5, 0.5);
  std::vector<double> xs = rand_vec(rng, B * 3, -1.0, 1.0);
  std::vector<double> ss = rand_vec(rng, B * 3, -2.0, -1.0);
  std::vector<double> rs(B * 4);
  for (int i = 0; i < B; ++i) {
    double q[4], nq = 0.0;
    for (int d = 0; d < 4; ++d) {
      q[d] = rng.normal();
      nq += q[d] * q[d];
    }
    nq = std::sqrt(nq);
    for (int d = 0; d < 4; ++d) rs[static_cast<size_t>(i) * 4 + d] = q[d] / nq;
  }
  auto deform_loss = [=](Tape& t, ValueRef x, ValueRef s, ValueRef r) {
    Rng r3(23);
    CoefficientNet::Heads h;
    h.sigma = t.constant(sig, B, 3 * k);
    h.beta = t.constant(bet, B, 3 * l);
    h.gamma = t.constant(gam, B, 4 * m);
    DeformedRefs d = deform(t, x, s, r, h, t.constant(th, 1, k), t.constant(la, 1, l),
                            t.constant(et, 1, m));
    return t.add(
        t.add(weighted_sum(t, d.position, r3), weighted_sum(t, d.log_scale, r3)),
        weighted_sum(t, d.rotation, r3));
  };
  out.push_back({"motion_field", "deform_rest_position", xs, B, 3,
                 [=](Tape& t, ValueRef leaf) {
                   return deform_loss(t, leaf, t.constant(ss, B, 3), t.constant(rs, B, 4));
                 }});
  out.push_back({"motion_field", "deform_rest_rotation", rs, B, 4,
                 [=](Tape& t, ValueRef leaf) {
                   return deform_loss(t, t.constant(xs, B, 3), t.constant(ss, B, 3), leaf);
                 }});
  // Basis leaf through fractional-time interpolation.
  const int N = 5;
  std::vector<double> theta_mat = rand_vec(rng, static_cast<size_t>(N) * k, -0.5, 0.5);
  out.push_back({"motion_field", "basis_matrix", theta_mat, N, k,
                 [=](Tape& t, ValueRef leaf) {
                   Rng r4(24);
                   ValueRef th_t = basis_row_at(t, leaf, N, 1.7);
                   CoefficientNet::Heads h;
                   h.sigma = t.constant(sig, B, 3 * k);
                   h.beta = t.constant(bet, B, 3 * l);
                   h.gamma = t.constant(gam, B, 4 * m);
                   DeformedRefs d = deform(t, t.constant(xs, B, 3), t.constant(ss, B, 3),
                                           t.constant(rs, B, 4), h, th_t, t.constant(la, 1, l),
                                           t.constant(et, 1, m));
                   return weighted_sum(t, d.position, r4);
                 }});
}

struct RasterFixture {
  int R = 6, W = 8, H = 8;
  std::vector<double> mu2d, cov2d, opacity, vals, depths, bg{0.1, 0.2, 0.3};
};

RasterFixture raster_fixture() {
  RasterFixture f;
  Rng rng(31);
  for (int i = 0; i < f.R; ++i) {
    f.mu2d.push_back(rng.uniform(1.5, 6.5));
    f.mu2d.push_back(rng.uniform(1.5, 6.5));
    const double a = rng.uniform(2.0, 4.0);
    const double c = rng.uniform(2.0, 4.0);
    const double b = rng.uniform(-0.5, 0.5);
    f.cov2d.insert(f.cov2d.end(), {a, b, c});
    f.opacity.push_back(rng.uniform(0.35, 0.75));
    for (int ch = 0; ch < 3; ++ch) f.vals.push_back(rng.uniform(0.1, 0.9));
    f.depths.push_back(1.0 + 0.7 * i);
  }
  return f;
}

void rasterizer_probes(std::vector<Probe>& out) {
  const RasterFixture f = raster_fixture();
  auto loss_of = [f](Tape& t, ValueRef mu, ValueRef cov, ValueRef op, ValueRef va) {
    Rng rw(32);
    ValueRef img = rasterize(t, mu, cov, op, va, f.depths, f.W, f.H, f.bg);
    return weighted_sum(t, img, rw);
  };
  out.push_back({"rasterizer", "mean2d", f.mu2d, f.R, 2,
                 [=](Tape& t, ValueRef leaf) {
                   return loss_of(t, leaf, t.constant(f.cov2d, f.R, 3),
                                  t.constant(f.opacity, f.R, 1), t.constant(f.vals, f.R, 3));
                 }});
  out.push_back({"rasterizer", "cov2d", f.cov2d, f.R, 3,
                 [=](Tape& t, ValueRef leaf) {
                   return loss_of(t, t.constant(f.mu2d, f.R, 2), leaf,
                                  t.constant(f.opacity, f.R, 1), t.constant(f.vals, f.R, 3));
                 }});
  out.push_back({"rasterizer", "opacity", f.opacity, f.R, 1,
                 [=](Tape& t, ValueRef leaf) {
                   return loss_of(t, t.constant(f.mu2d, f.R, 2), t.constant(f.cov2d, f.R, 3), leaf,
                                  t.constant(f.vals, f.R, 3));
                 }});
  out.push_back({"rasterizer", "values", f.vals, f.R, 3,
                 [=](Tape& t, ValueRef leaf) {
                   return loss_of(t, t.constant(f.mu2d, f.R, 2), t.constant(f.cov2d, f.R, 3),
                                  t.constant(f.opacity, f.R, 1), leaf);
                 }});

  // Through projection: world-space positions and covariances.
  Camera cam;
  cam.fx = cam.fy = 8.0;
  cam.cx = cam.cy = 4.0;
  cam.width = cam.height = 8;
  for (int i = 0; i < 16; ++i) cam.W[i] = (i % 5 == 0) ? 1.0 : 0.0;
  Rng rng(33);
  const int P = 5;
  std::vector<double> pos, cov6, opa, val;
  for (int i = 0; i < P; ++i) {
    pos.push_back(rng.uniform(-1.2, 1.2));
    pos.push_back(rng.uniform(-1.2, 1.2));
    pos.push_back(4.0 + 0.9 * i);
    // SPD with dominant diagonal.
    const double sx = rng.uniform(0.25, 0.5), sy = rng.uniform(0.25, 0.5),
                 sz = rng.uniform(0.25, 0.5);
    const double oxy = rng.uniform(-0.02, 0.02);
    cov6.insert(cov6.end(), {sx * sx, oxy, 0.0, sy * sy, 0.0, sz * sz});
    opa.push_back(rng.uniform(0.4, 0.8));
    for (int ch = 0; ch < 3; ++ch) val.push_back(rng.uniform(0.1, 0.9));
  }
  auto proj_loss = [cam](Tape& t, ValueRef position, ValueRef cov,
                         const std::vector<double>& opa_v, const std::vector<double>& val_v) {
    Rng rw(34);
    ProjectedScene pr = project_on_tape(t, position, cov, cam);
    const int R = static_cast<int>(pr.keep.size());
    std::vector<double> ok, vk;
    for (int r : pr.keep) {
      ok.push_back(opa_v[r]);
      for (int ch = 0; ch < 3; ++ch) vk.push_back(val_v[static_cast<size_t>(r) * 3 + ch]);
    }
    ValueRef img = rasterize(t, pr.mu2d, pr.cov2d, t.constant(ok, R, 1), t.constant(vk, R, 3),
                             pr.depths, cam.width, cam.height, {0.0, 0.0, 0.0});
    return weighted_sum(t, img, rw);
  };
  out.push_back({"rasterizer", "world_position", pos, P, 3,
                 [=](Tape& t, ValueRef leaf) {
                   return proj_loss(t, leaf, t.constant(cov6, P, 6), opa, val);
                 }});
  out.push_back({"rasterizer", "world_covariance", cov6, P, 6,
                 [=](Tape& t, ValueRef leaf) {
                   return proj_loss(t, t.constant(pos, P, 3), leaf, opa, val);
                 }});
}

void losses_probes(std::vector<Probe>& out) {
  Rng rng(41);
  const int W = 8, H = 8;
  std::vector<double> a = rand_vec(rng, static_cast<size_t>(W) * H * 3, 0.15, 0.85);
  std::vector<double> b = rand_vec(rng, static_cast<size_t>(W) * H * 3, 0.15, 0.85);
  out.push_back({"losses", "photometric", a, W * H, 3,
                 [=](Tape& t, ValueRef leaf) {
                   return photometric_loss(t, leaf, t.constant(b, W * H, 3), W, H, 0.2);
                 }});
  std::vector<double> ma = rand_vec(rng, static_cast<size_t>(W) * H, 0.1, 0.9);
  std::vector<double> mb = rand_vec(rng, static_cast<size_t>(W) * H, 0.0, 1.0);
  out.push_back({"losses", "mask", ma, W * H, 1,
                 [=](Tape& t, ValueRef leaf) {
                   return mask_loss(t, leaf, t.constant(mb, W * H, 1));
                 }});
  std::vector<double> pv = rand_vec(rng, 12, 0.08, 0.92);
  out.push_back({"losses", "entropy", pv, 12, 1,
                 [](Tape& t, ValueRef leaf) { return entropy_loss(t, leaf); }});

  // ARAP over a 6-point pair list.
  const int D = 6;
  std::vector<double> p_prev = rand_vec(rng, D * 3, -1.0, 1.0);
  std::vector<double> p_cur = p_prev;
  for (double& v : p_cur) v += rng.uniform(-0.1, 0.1);
  std::vector<double> q_prev(D * 4), q_cur(D * 4);
  auto rand_quat = [&](double* q) {
    double nq = 0.0;
    for (int d = 0; d < 4; ++d) {
      q[d] = rng.normal();
      nq += q[d] * q[d];
    }
    nq = std::sqrt(nq);
    for (int d = 0; d < 4; ++d) q[d] /= nq;
  };
  for (int i = 0; i < D; ++i) {
    rand_quat(q_prev.data() + static_cast<size_t>(i) * 4);
    rand_quat(q_cur.data() + static_cast<size_t>(i) * 4);
  }
  std::vector<int> pi, pj;
  std::vector<double> pw;
  for (int i = 0; i < D; ++i)
    for (int s = 1; s <= 2; ++s) {
      pi.push_back(i);
      pj.push_back((i + s) % D);
      pw.push_back(rng.uniform(0.2, 1.0));
    }
  auto arap_of = [=](Tape& t, ValueRef pp, ValueRef pc, ValueRef rp, ValueRef rc) {
    return arap_loss(t, pp, pc, rp, rc, pi, pj, pw, 2, D);
  };
  out.push_back({"losses", "arap_position", p_cur, D, 3,
                 [=](Tape& t, ValueRef leaf) {
                   return arap_of(t, t.constant(p_prev, D, 3), leaf, t.constant(q_prev, D, 4),
                                  t.constant(q_cur, D, 4));
                 }});
  out.push_back({"losses", "arap_rotation", q_cur, D, 4,
                 [=](Tape& t, ValueRef leaf) {
                   return arap_of(t, t.constant(p_prev, D, 3), t.constant(p_cur, D, 3),
                                  t.constant(q_prev, D, 4), leaf);
                 }});

  // Spatial smoothness wrt net parameters.
  CoefficientNet net;
  net.L = 2;
  net.k = 3;
  net.l = 2;
  net.m = 2;
  net.hidden = 8;
  Rng rng2(42);
  std::vector<double> params = net.init_params(rng2);
  for (double& p : params) p += rng2.uniform(-0.05, 0.05);
  const int S = 3;
  std::vector<double> ea(static_cast<size_t>(S) * net.input_width());
  std::vector<double> eb(static_cast<size_t>(S) * net.input_width());
  for (int i = 0; i < S; ++i) {
    double x[3] = {rng2.uniform(-1.0, 1.0), rng2.uniform(-1.0, 1.0), rng2.uniform(-1.0, 1.0)};
    encode(x, net.L, ea.data() + static_cast<size_t>(i) * net.input_width());
    double d[3];
    rng2.unit_vector3(d);
    for (int c = 0; c < 3; ++c) x[c] += 1e-3 * d[c];
    encode(x, net.L, eb.data() + static_cast<size_t>(i) * net.input_width());
  }
  out.push_back({"losses", "spatial_smoothness", params, 1, net.n_params(),
                 [=](Tape& t, ValueRef leaf) {
                   ValueRef na = t.constant(ea, S, net.input_width());
                   ValueRef nb = t.constant(eb, S, net.input_width());
                   return spatial_smoothness_loss(t, net, leaf, na, nb, 0.5, 0.5);
                 }});
}

// Full training graph at toy scale: photometric + mask + entropy + ARAP +
// spatial smoothness over a 20-Gaussian scene on an 8x8 frame.
struct FullFixture {
  GaussianSet set;
  CoefficientNet net;
  std::vector<double> net_params, theta, lambda, eta;
  int n_frames = 4;
  std::vector<int> dyn;
  Camera cam;
  std::vector<double> target, mask_target;
  std::vector<int> pairs_i, pairs_j;
  std::vector<double> pair_w;
  LossWeights weights;
  // The trainer renders the mask channel with geometry and opacity detached.
  // detach passes perturbed values forward, so finite differences of a graph
  // built with detach would see sensitivity the tape deliberately withholds.
  // The fixture bakes that geometry to honest constants instead; gradient
  // semantics of the two graphs match, and FD stays well defined.
  std::vector<double> mask_mu2d, mask_cov2d, mask_opa, mask_depths;
  std::vector<int> mask_keep;
};

struct SceneGraph {
  SceneLeaves leaves;
  MotionLeaves motion;
  CoefficientNet::Heads heads;
  SnapshotRefs snap;
  ProjectedScene proj;
  ValueRef opa_k;
};

constexpr double kFullTime = 2.0;

SceneGraph build_scene_graph(Tape& t, const FullFixture& f, const std::string& varied,
                             ValueRef leaf) {
  const int P = f.set.size();
  auto pick = [&](const std::string& name, const std::vector<double>& vals, int rows,
                  int cols) {
    return varied == name ? leaf : t.constant(vals, rows, cols, name);
  };
  SceneGraph g;
  g.leaves.x = pick("x_star", f.set.x_star.values, P, 3);
  g.leaves.s = pick("log_scale", f.set.log_scale.values, P, 3);
  g.leaves.r = pick("rotation", f.set.rotation.values, P, 4);
  g.leaves.o = pick("opacity_logit", f.set.opacity_logit.values, P, 1);
  g.leaves.c = pick("color", f.set.color.values, P, 3);
  g.leaves.dyn = pick("dyn_logit", f.set.dyn_logit.values, P, 1);
  g.motion.net = pick("net", f.net_params, 1, f.net.n_params());
  g.motion.theta = pick("theta", f.theta, f.n_frames, f.net.k);
  g.motion.lambda = pick("lambda", f.lambda, f.n_frames, f.net.l);
  g.motion.eta = pick("eta", f.eta, f.n_frames, f.net.m);
  g.snap = build_snapshot(t, f.set, g.leaves, &f.net, &g.motion, f.n_frames, kFullTime, f.dyn,
                          true, &g.heads);
  g.proj = project_on_tape(t, g.snap.position, g.snap.cov6, f.cam);
  if (g.proj.keep.empty()) throw std::runtime_error("gradcheck: full fixture culled everything");
  g.opa_k = t.gather_rows(g.snap.opacity, g.proj.keep);
  return g;
}

FullFixture full_fixture() {
  FullFixture f;
  Rng rng(51);
  const int P = 20;
  std::vector<double> xyz(P * 3), rgb(P * 3);
  for (int i = 0; i < P; ++i) {
    xyz[i * 3 + 0] = rng.uniform(-1.0, 1.0);
    xyz[i * 3 + 1] = rng.uniform(-1.0, 1.0);
    xyz[i * 3 + 2] = 4.0 + rng.uniform(0.0, 2.0);
    for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = rng.uniform(0.1, 0.9);
  }
  f.set = scene_from_points(xyz, rgb);
  // Half the points dynamic, logits clear of the decision boundary; mixed
  // opacities; anisotropic scales.
  for (int i = 0; i < P; ++i) {
    f.set.dyn_logit.values[i] = i % 2 == 0 ? 2.0 : -2.0;
    f.set.opacity_logit.values[i] = rng.uniform(-0.5, 1.5);
    for (int d = 0; d < 3; ++d)
      f.set.log_scale.values[static_cast<size_t>(i) * 3 + d] = std::log(rng.uniform(0.15, 0.35));
    double q[4], nq = 0.0;
    for (int d = 0; d < 4; ++d) {
      q[d] = rng.normal();
      nq += q[d] * q[d];
    }
    nq = std::sqrt(nq);
    for (int d = 0; d < 4; ++d) f.set.rotation.values[static_cast<size_t>(i) * 4 + d] = q[d] / nq;
  }
  f.dyn = f.set.dynamic_indices(0.8);

  f.net.L = 2;
  f.net.k = 3;
  f.net.l = 2;
  f.net.m = 2;
  f.net.hidden = 8;
  f.net_params = f.net.init_params(rng);
  for (double& p : f.net_params) p += rng.uniform(-0.05, 0.05);
  MotionBasis basis = make_motion_basis(f.n_frames, f.net.k, f.net.l, f.net.m);
  auto flat = [](const Eigen::MatrixXd& m, std::vector<double>& out) {
    out.resize(static_cast<size_t>(m.rows()) * m.cols());
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) out[static_cast<size_t>(r) * m.cols() + c] = m(r, c);
  };
  flat(basis.theta, f.theta);
  flat(basis.lambda, f.lambda);
  flat(basis.eta, f.eta);

  f.cam.fx = f.cam.fy = 8.0;
  f.cam.cx = f.cam.cy = 4.0;
  f.cam.width = f.cam.height = 8;
  for (int i = 0; i < 16; ++i) f.cam.W[i] = (i % 5 == 0) ? 1.0 : 0.0;

  f.target = rand_vec(rng, 8 * 8 * 3, 0.0, 1.0);
  f.mask_target.resize(8 * 8);
  for (double& v : f.mask_target) v = rng.uniform(0.0, 1.0) < 0.4 ? 1.0 : 0.0;

  KnnIndex knn = KnnIndex::build(f.set, f.dyn, 3, 10.0, 0);
  std::vector<int> where(P, -1);
  for (size_t i = 0; i < f.dyn.size(); ++i) where[f.dyn[i]] = static_cast<int>(i);
  for (size_t e = 0; e < knn.pool.size(); ++e)
    for (int s = 0; s < knn.k; ++s) {
      f.pairs_i.push_back(where[knn.pool[e]]);
      f.pairs_j.push_back(where[knn.pool[knn.neighbors[e * knn.k + s]]]);
      f.pair_w.push_back(knn.weights[e * knn.k + s]);
    }
  f.weights.rho_w = 10.0;
  f.weights.knn_k = knn.k;

  // Bake the mask pass geometry from an all-constant forward (see the field
  // comment); gathered opacity is read back through the kept order.
  {
    Tape t;
    SceneGraph g = build_scene_graph(t, f, "", ValueRef{});
    auto copy = [&](ValueRef r, std::vector<double>& out) {
      std::span<const double> v = t.val(r);
      out.assign(v.begin(), v.end());
    };
    copy(g.proj.mu2d, f.mask_mu2d);
    copy(g.proj.cov2d, f.mask_cov2d);
    copy(g.opa_k, f.mask_opa);
    f.mask_depths = g.proj.depths;
    f.mask_keep = g.proj.keep;
  }
  return f;
}

ValueRef build_full(Tape& t, const FullFixture& f, const std::string& varied, ValueRef leaf) {
  SceneGraph g = build_scene_graph(t, f, varied, leaf);
  const SnapshotRefs& snap = g.snap;
  const MotionLeaves& motion = g.motion;
  ValueRef col_k = t.gather_rows(snap.color, g.proj.keep);
  ValueRef img = rasterize(t, g.proj.mu2d, g.proj.cov2d, g.opa_k, col_k, g.proj.depths,
                           f.cam.width, f.cam.height, {0.05, 0.05, 0.05});
  ValueRef pho = photometric_loss(t, img, t.constant(f.target, 64, 3), 8, 8, 0.2);

  const int MR = static_cast<int>(f.mask_keep.size());
  ValueRef p_k = t.gather_rows(snap.pvals, f.mask_keep);
  ValueRef mimg = rasterize(t, t.constant(f.mask_mu2d, MR, 2), t.constant(f.mask_cov2d, MR, 3),
                            t.constant(f.mask_opa, MR, 1), p_k, f.mask_depths, f.cam.width,
                            f.cam.height, {0.0});
  ValueRef mask = mask_loss(t, mimg, t.constant(f.mask_target, 64, 1));
  ValueRef entropy = entropy_loss(t, snap.pvals);

  ValueRef th_p = basis_row_at(t, motion.theta, f.n_frames, kFullTime - 1.0);
  ValueRef la_p = basis_row_at(t, motion.lambda, f.n_frames, kFullTime - 1.0);
  ValueRef et_p = basis_row_at(t, motion.eta, f.n_frames, kFullTime - 1.0);
  DeformedRefs prev = deform(t, snap.dyn_x, snap.dyn_s, snap.dyn_r, g.heads, th_p, la_p, et_p);
  ValueRef arap = arap_loss(t, prev.position, snap.dyn_position, prev.rotation,
                            snap.dyn_rotation, f.pairs_i, f.pairs_j, f.pair_w, f.weights.knn_k,
                            static_cast<int>(f.dyn.size()));

  // Perturbed-twin encodings of every dynamic point (fixed directions).
  const int D = static_cast<int>(f.dyn.size());
  const int ew = f.net.input_width();
  std::vector<double> enc_b(static_cast<size_t>(D) * ew);
  Rng rd(52);
  for (int i = 0; i < D; ++i) {
    const double* xp = f.set.x_star.values.data() + 3 * f.dyn[i];
    double nx[3];
    for (int d = 0; d < 3; ++d) nx[d] = (xp[d] - f.set.scene_center[d]) / f.set.scene_extent;
    double dir[3];
    rd.unit_vector3(dir);
    for (int d = 0; d < 3; ++d) nx[d] += 1e-3 * dir[d];
    encode(nx, f.net.L, enc_b.data() + static_cast<size_t>(i) * ew);
  }
  ValueRef spatial = spatial_smoothness_loss(t, f.net, motion.net, snap.enc,
                                             t.constant(enc_b, D, ew), f.weights.w_beta,
                                             f.weights.w_gamma);
  return total_loss(t, pho, mask, entropy, arap, spatial, f.weights);
}

void full_probes(std::vector<Probe>& out) {
  const FullFixture f = full_fixture();
  const int P = f.set.size();
  auto probe = [&](const std::string& name, const std::vector<double>& x0, int rows, int cols) {
    out.push_back({"full", name, x0, rows, cols,
                   [f, name](Tape& t, ValueRef leaf) { return build_full(t, f, name, leaf); }});
  };
  probe("x_star", f.set.x_star.values, P, 3);
  probe("log_scale", f.set.log_scale.values, P, 3);
  probe("rotation", f.set.rotation.values, P, 4);
  probe("opacity_logit", f.set.opacity_logit.values, P, 1);
  probe("color", f.set.color.values, P, 3);
  probe("dyn_logit", f.set.dyn_logit.values, P, 1);
  probe("net", f.net_params, 1, f.net.n_params());
  probe("theta", f.theta, f.n_frames, f.net.k);
  probe("lambda", f.lambda, f.n_frames, f.net.l);
  probe("eta", f.eta, f.n_frames, f.net.m);
}

}  // namespace

std::vector<GradCheckResult> run_gradcheck(const std::string& module_filter, double tol) {
  std::vector<Probe> probes;
  if (module_filter.empty() || module_filter == "trajectory") trajectory_probes(probes);
  if (module_filter.empty() || module_filter == "motion_field") motion_field_probes(probes);
  if (module_filter.empty() || module_filter == "rasterizer") rasterizer_probes(probes);
  if (module_filter.empty() || module_filter == "losses") losses_probes(probes);
  if (module_filter.empty() || module_filter == "full") full_probes(probes);
  if (probes.empty())
    throw std::invalid_argument("gradcheck: unknown module '" + module_filter + "'");
  std::vector<GradCheckResult> results;
  results.reserve(probes.size());
  for (const Probe& p : probes) results.push_back(check_probe(p, tol));
  return results;
}

}  // namespace dgtraj
