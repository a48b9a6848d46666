#include "dgtraj/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dgtraj {

namespace {

// Splat data laid out for the pixel loop, already depth-sorted.
struct Splats {
  int count = 0;
  int channels = 0;
  std::vector<double> mu2d;    // 2 per splat
  std::vector<double> conic;   // 3 per splat (A, B, C) = inverse covariance
  std::vector<double> opacity; // 1 per splat
  std::vector<double> vals;    // C per splat
  std::vector<int> bbox;       // 4 per splat: x0, x1, y0, y1 inclusive, clipped
  std::vector<int> src;        // original (pre-sort) row of each splat
};

void conic_of(const double* c2d, double conic[3]) {
  const double a = c2d[0], b = c2d[1], c = c2d[2];
  const double det = a * c - b * b;
  if (!(det > 0.0) || !(a > 0.0))
    throw std::runtime_error("rasterize: projected covariance not positive definite");
  conic[0] = c / det;
  conic[1] = -b / det;
  conic[2] = a / det;
}

void bbox_of(const double* mu, const double* c2d, int W, int H, int box[4]) {
  const double a = c2d[0], b = c2d[1], c = c2d[2];
  const double mid = 0.5 * (a + c);
  const double disc = std::sqrt(std::max(0.0, mid * mid - (a * c - b * b)));
  const double radius = std::ceil(3.0 * std::sqrt(std::max(mid + disc, 0.0)));
  box[0] = std::max(0, static_cast<int>(std::floor(mu[0] - radius)));
  box[1] = std::min(W - 1, static_cast<int>(std::ceil(mu[0] + radius)));
  box[2] = std::max(0, static_cast<int>(std::floor(mu[1] - radius)));
  box[3] = std::min(H - 1, static_cast<int>(std::ceil(mu[1] + radius)));
}

// Sort order: depth ascending, ties by row index (stable sort over increasing
// input order).
std::vector<int> depth_order(const std::vector<double>& depths) {
  std::vector<int> order(depths.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return depths[a] < depths[b]; });
  return order;
}

Splats build_splats(int count, int channels, const double* mu2d, const double* cov2d,
                    const double* opacity, const double* vals,
                    const std::vector<double>& depths, int W, int H) {
  if (static_cast<int>(depths.size()) != count)
    throw std::invalid_argument("rasterize: depth count mismatch");
  const std::vector<int> order = depth_order(depths);
  Splats sp;
  sp.count = count;
  sp.channels = channels;
  sp.mu2d.resize(static_cast<size_t>(count) * 2);
  sp.conic.resize(static_cast<size_t>(count) * 3);
  sp.opacity.resize(count);
  sp.vals.resize(static_cast<size_t>(count) * channels);
  sp.bbox.resize(static_cast<size_t>(count) * 4);
  sp.src.resize(count);
  for (int i = 0; i < count; ++i) {
    const int s = order[i];
    sp.src[i] = s;
    sp.mu2d[i * 2] = mu2d[s * 2];
    sp.mu2d[i * 2 + 1] = mu2d[s * 2 + 1];
    conic_of(cov2d + s * 3, sp.conic.data() + static_cast<size_t>(i) * 3);
    sp.opacity[i] = opacity[s];
    for (int c = 0; c < channels; ++c)
      sp.vals[static_cast<size_t>(i) * channels + c] =
          vals[static_cast<size_t>(s) * channels + c];
    bbox_of(mu2d + s * 2, cov2d + s * 3, W, H,
            sp.bbox.data() + static_cast<size_t>(i) * 4);
  }
  return sp;
}

struct Contrib {
  int splat;   // index into sorted splat arrays
  double alpha;
  double T;    // transmittance before this contribution
};

// Composite one pixel over a subset of splats (already in depth order).
// `subset` lists sorted-splat indices; when null, all splats are used.
// Records contributions when `contribs` is non-null.
template <typename F>
double composite_pixel(const Splats& sp, int px, int py, const int* subset, int subset_n,
                       const std::vector<double>& bg, double* out_pixel, F&& record) {
  const int C = sp.channels;
  for (int c = 0; c < C; ++c) out_pixel[c] = 0.0;
  double T = 1.0;
  const int n = subset ? subset_n : sp.count;
  for (int ii = 0; ii < n; ++ii) {
    const int i = subset ? subset[ii] : ii;
    if (T < kTransmittanceCutoff) break;
    const int* box = sp.bbox.data() + static_cast<size_t>(i) * 4;
    if (px < box[0] || px > box[1] || py < box[2] || py > box[3]) continue;
    const double dx = px - sp.mu2d[i * 2];
    const double dy = py - sp.mu2d[i * 2 + 1];
    const double* con = sp.conic.data() + static_cast<size_t>(i) * 3;
    const double q = con[0] * dx * dx + 2.0 * con[1] * dx * dy + con[2] * dy * dy;
    const double alpha = sp.opacity[i] * std::exp(-0.5 * q);
    if (alpha < kAlphaSkip) continue;
    for (int c = 0; c < C; ++c)
      out_pixel[c] += sp.vals[static_cast<size_t>(i) * C + c] * alpha * T;
    record(i, alpha, T);
    T *= 1.0 - alpha;
  }
  for (int c = 0; c < C; ++c) out_pixel[c] += bg[c] * T;
  return T;
}

void forward_reference(const Splats& sp, int W, int H, const std::vector<double>& bg,
                       double* out, std::vector<std::vector<Contrib>>* contribs,
                       RenderDebug* debug) {
  const int C = sp.channels;
  if (debug) {
    debug->transmittance.assign(static_cast<size_t>(W) * H, 1.0);
    debug->n_contrib.assign(static_cast<size_t>(W) * H, 0);
    debug->val_min.assign(static_cast<size_t>(W) * H * C, 0.0);
    debug->val_max.assign(static_cast<size_t>(W) * H * C, 0.0);
  }
  for (int py = 0; py < H; ++py)
    for (int px = 0; px < W; ++px) {
      const size_t pix = static_cast<size_t>(py) * W + px;
      bool first = true;
      auto record = [&](int i, double alpha, double T) {
        if (contribs) (*contribs)[pix].push_back({i, alpha, T});
        if (debug) {
          debug->n_contrib[pix] += 1;
          for (int c = 0; c < C; ++c) {
            const double v = sp.vals[static_cast<size_t>(i) * C + c];
            double& lo = debug->val_min[pix * C + c];
            double& hi = debug->val_max[pix * C + c];
            if (first) {
              lo = hi = v;
            } else {
              lo = std::min(lo, v);
              hi = std::max(hi, v);
            }
          }
          first = false;
        }
      };
      const double T = composite_pixel(sp, px, py, nullptr, 0, bg, out + pix * C, record);
      if (debug) debug->transmittance[pix] = T;
    }
}

void forward_tiled(const Splats& sp, int W, int H, const std::vector<double>& bg,
                   double* out) {
  constexpr int kTile = 16;
  const int tx_n = (W + kTile - 1) / kTile;
  const int ty_n = (H + kTile - 1) / kTile;
  std::vector<std::vector<int>> tile_lists(static_cast<size_t>(tx_n) * ty_n);
  for (int i = 0; i < sp.count; ++i) {
    const int* box = sp.bbox.data() + static_cast<size_t>(i) * 4;
    if (box[0] > box[1] || box[2] > box[3]) continue;
    for (int ty = box[2] / kTile; ty <= box[3] / kTile; ++ty)
      for (int tx = box[0] / kTile; tx <= box[1] / kTile; ++tx)
        tile_lists[static_cast<size_t>(ty) * tx_n + tx].push_back(i);
  }
  auto no_record = [](int, double, double) {};
  const int C = sp.channels;
  for (int ty = 0; ty < ty_n; ++ty)
    for (int tx = 0; tx < tx_n; ++tx) {
      const auto& list = tile_lists[static_cast<size_t>(ty) * tx_n + tx];
      const int y1 = std::min(H, (ty + 1) * kTile);
      const int x1 = std::min(W, (tx + 1) * kTile);
      for (int py = ty * kTile; py < y1; ++py)
        for (int px = tx * kTile; px < x1; ++px) {
          const size_t pix = static_cast<size_t>(py) * W + px;
          composite_pixel(sp, px, py, list.data(), static_cast<int>(list.size()), bg,
                          out + pix * C, no_record);
        }
    }
}

// Differentiable compositing payload. Inputs: mu2d, cov2d, opacity, vals.
struct RasterCtx final : OpCtx {
  int W, H, channels;
  std::vector<double> bg;
  std::vector<double> depths;
  Splats sp;  // built in forward
  std::vector<std::vector<Contrib>> contribs;

  RasterCtx(int w, int h, int c, std::vector<double> background, std::vector<double> d)
      : W(w), H(h), channels(c), bg(std::move(background)), depths(std::move(d)) {}

  void forward(std::span<const std::span<const double>> ins,
               std::vector<double>& out) override {
    const int R = static_cast<int>(depths.size());
    sp = build_splats(R, channels, ins[0].data(), ins[1].data(), ins[2].data(),
                      ins[3].data(), depths, W, H);
    out.assign(static_cast<size_t>(W) * H * channels, 0.0);
    contribs.assign(static_cast<size_t>(W) * H, {});
    forward_reference(sp, W, H, bg, out.data(), &contribs, nullptr);
  }

  void backward(std::span<const double> out_grad,
                std::span<const std::span<const double>> ins,
                std::span<const std::span<double>> in_grads) override {
    const int C = sp.channels;
    // Per-sorted-splat accumulators; scattered to inputs at the end so the
    // accumulation order is fixed by the pixel loop.
    std::vector<double> g_mu(sp.mu2d.size(), 0.0);
    std::vector<double> g_conic(sp.conic.size(), 0.0);
    std::vector<double> g_opa(sp.opacity.size(), 0.0);
    std::vector<double> g_vals(sp.vals.size(), 0.0);
    std::vector<double> S(C);

    for (size_t pix = 0; pix < contribs.size(); ++pix) {
      const auto& list = contribs[pix];
      if (list.empty()) continue;
      const double* go = out_grad.data() + pix * C;
      const int px = static_cast<int>(pix % W);
      const int py = static_cast<int>(pix / W);
      // Transmittance after the last contribution.
      const Contrib& last = list.back();
      double T_final = last.T * (1.0 - last.alpha);
      for (int c = 0; c < C; ++c) S[c] = bg[c] * T_final;
      for (size_t li = list.size(); li-- > 0;) {
        const Contrib& cb = list[li];
        const int i = cb.splat;
        const double* val = sp.vals.data() + static_cast<size_t>(i) * C;
        double dalpha = 0.0;
        for (int c = 0; c < C; ++c) {
          g_vals[static_cast<size_t>(i) * C + c] += go[c] * cb.alpha * cb.T;
          dalpha += go[c] * (val[c] * cb.T - S[c] / (1.0 - cb.alpha));
        }
        // alpha = o * exp(-q/2)
        const double G = cb.alpha / sp.opacity[i];
        g_opa[i] += dalpha * G;
        const double dq = -0.5 * cb.alpha * dalpha;
        const double dx = px - sp.mu2d[i * 2];
        const double dy = py - sp.mu2d[i * 2 + 1];
        const double* con = sp.conic.data() + static_cast<size_t>(i) * 3;
        // dx = px - mu_x, so dq/dmu = -dq/d(dx).
        g_mu[i * 2] += dq * -(2.0 * con[0] * dx + 2.0 * con[1] * dy);
        g_mu[i * 2 + 1] += dq * -(2.0 * con[1] * dx + 2.0 * con[2] * dy);
        g_conic[i * 3] += dq * dx * dx;
        g_conic[i * 3 + 1] += dq * 2.0 * dx * dy;
        g_conic[i * 3 + 2] += dq * dy * dy;
        for (int c = 0; c < C; ++c) S[c] += val[c] * cb.alpha * cb.T;
      }
    }

    // Scatter to input rows; conic gradients map back through the 2x2 inverse.
    std::span<double> gi_mu = in_grads[0];
    std::span<double> gi_cov = in_grads[1];
    std::span<double> gi_opa = in_grads[2];
    std::span<double> gi_vals = in_grads[3];
    for (int i = 0; i < sp.count; ++i) {
      const int s = sp.src[i];
      gi_mu[s * 2] += g_mu[i * 2];
      gi_mu[s * 2 + 1] += g_mu[i * 2 + 1];
      gi_opa[s] += g_opa[i];
      for (int c = 0; c < C; ++c)
        gi_vals[static_cast<size_t>(s) * C + c] += g_vals[static_cast<size_t>(i) * C + c];
      // d(cov)/d(conic): dM = -Conic * dConic * Conic with symmetric matrices;
      // packed off-diagonal gradients carry both slots.
      const double* con = sp.conic.data() + static_cast<size_t>(i) * 3;
      const double gA = g_conic[i * 3], gB = g_conic[i * 3 + 1], gC = g_conic[i * 3 + 2];
      const double Gm[2][2] = {{gA, 0.5 * gB}, {0.5 * gB, gC}};
      const double Cn[2][2] = {{con[0], con[1]}, {con[1], con[2]}};
      double CG[2][2];
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          CG[a][b] = Cn[a][0] * Gm[0][b] + Cn[a][1] * Gm[1][b];
      double Gcov[2][2];
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          Gcov[a][b] = -(CG[a][0] * Cn[0][b] + CG[a][1] * Cn[1][b]);
      gi_cov[s * 3] += Gcov[0][0];
      gi_cov[s * 3 + 1] += 2.0 * Gcov[0][1];
      gi_cov[s * 3 + 2] += Gcov[1][1];
    }
  }
};

}  // namespace

bool project_point(const double* mu, const double* cov6, const Camera& cam,
                   double mu2d[2], double cov2d[3], double* depth) {
  const auto R = cam.rot3();
  const auto t = cam.trans();
  double pc[3];
  for (int i = 0; i < 3; ++i)
    pc[i] = R[i * 3] * mu[0] + R[i * 3 + 1] * mu[1] + R[i * 3 + 2] * mu[2] + t[i];
  if (!(pc[2] > cam.near) || !(pc[2] < cam.far)) return false;
  mu2d[0] = cam.fx * pc[0] / pc[2] + cam.cx;
  mu2d[1] = cam.fy * pc[1] / pc[2] + cam.cy;
  if (depth) *depth = pc[2];

  // Camera-space covariance R S R^T from the packed world covariance.
  const double S[3][3] = {{cov6[0], cov6[1], cov6[2]},
                          {cov6[1], cov6[3], cov6[4]},
                          {cov6[2], cov6[4], cov6[5]}};
  double RS[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      RS[i][j] = R[i * 3] * S[0][j] + R[i * 3 + 1] * S[1][j] + R[i * 3 + 2] * S[2][j];
  double Sc[3][3];
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      Sc[i][j] = RS[i][0] * R[j * 3] + RS[i][1] * R[j * 3 + 1] + RS[i][2] * R[j * 3 + 2];

  const double x = pc[0], y = pc[1], z = pc[2];
  const double j0 = cam.fx / z, j2 = -cam.fx * x / (z * z);
  const double k1 = cam.fy / z, k2 = -cam.fy * y / (z * z);
  cov2d[0] = j0 * j0 * Sc[0][0] + 2 * j0 * j2 * Sc[0][2] + j2 * j2 * Sc[2][2] + kCovLowpass;
  cov2d[1] = j0 * (Sc[0][1] * k1 + Sc[0][2] * k2) + j2 * (Sc[2][1] * k1 + Sc[2][2] * k2);
  cov2d[2] = k1 * k1 * Sc[1][1] + 2 * k1 * k2 * Sc[1][2] + k2 * k2 * Sc[2][2] + kCovLowpass;
  return true;
}

std::vector<double> render_plain(const PlainSnapshot& snap, const Camera& cam,
                                 bool mask_channel, const std::vector<double>& background,
                                 bool tiled, RenderDebug* debug) {
  const int C = mask_channel ? 1 : 3;
  if (static_cast<int>(background.size()) != C)
    throw std::invalid_argument("render: background channel mismatch");
  std::vector<double> mu2d, cov2d, opa, vals, depths;
  for (int i = 0; i < snap.count; ++i) {
    double m2[2], c2[3], d;
    if (!project_point(snap.position.data() + 3 * i, snap.cov6.data() + 6 * i, cam, m2,
                       c2, &d))
      continue;
    mu2d.insert(mu2d.end(), {m2[0], m2[1]});
    cov2d.insert(cov2d.end(), {c2[0], c2[1], c2[2]});
    opa.push_back(snap.opacity[i]);
    if (mask_channel)
      vals.push_back(snap.p[i]);
    else
      vals.insert(vals.end(), snap.color.begin() + 3 * i, snap.color.begin() + 3 * i + 3);
    depths.push_back(d);
  }
  const int R = static_cast<int>(depths.size());
  const Splats sp = build_splats(R, C, mu2d.data(), cov2d.data(), opa.data(), vals.data(),
                                 depths, cam.width, cam.height);
  std::vector<double> out(static_cast<size_t>(cam.width) * cam.height * C, 0.0);
  if (tiled)
    forward_tiled(sp, cam.width, cam.height, background, out.data());
  else
    forward_reference(sp, cam.width, cam.height, background, out.data(), nullptr, debug);
  return out;
}

ProjectedScene project_on_tape(Tape& tape, ValueRef position, ValueRef cov6,
                               const Camera& cam) {
  const auto R = cam.rot3();
  const auto t = cam.trans();
  ValueRef cam_pts = tape.const_affine(position, R.data(), t.data());
  const std::span<const double> pc = tape.val(cam_pts);
  ProjectedScene out;
  const int P = tape.rows(cam_pts);
  for (int i = 0; i < P; ++i) {
    const double z = pc[static_cast<size_t>(i) * 3 + 2];
    if (z > cam.near && z < cam.far) out.keep.push_back(i);
  }
  ValueRef kept_pts = tape.gather_rows(cam_pts, out.keep);
  ValueRef kept_cov = tape.gather_rows(cov6, out.keep);
  ValueRef cam_cov = tape.const_rot_sym(kept_cov, R.data());
  out.mu2d = tape.perspective(kept_pts, cam.fx, cam.fy, cam.cx, cam.cy);
  out.cov2d = tape.cov_project(kept_pts, cam_cov, cam.fx, cam.fy, kCovLowpass);
  out.depths.reserve(out.keep.size());
  for (int i : out.keep) out.depths.push_back(pc[static_cast<size_t>(i) * 3 + 2]);
  return out;
}

ValueRef rasterize(Tape& tape, ValueRef mu2d, ValueRef cov2d, ValueRef opacity,
                   ValueRef vals, const std::vector<double>& depths, int width,
                   int height, const std::vector<double>& background) {
  const int C = tape.cols(vals);
  if (static_cast<int>(background.size()) != C)
    throw std::invalid_argument("rasterize: background channel mismatch");
  auto ctx = std::make_unique<RasterCtx>(width, height, C, background, depths);
  const ValueRef inputs[4] = {mu2d, cov2d, opacity, vals};
  return tape.raster_node({inputs, 4}, width * height, C, std::move(ctx));
}

}  // namespace dgtraj
