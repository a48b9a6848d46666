#include "dgtraj/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dgtraj {

KnnIndex KnnIndex::build(const GaussianSet& set, const std::vector<int>& dynamic_rows,
                         int knn_k, double rho_w, int64_t iter) {
  KnnIndex idx;
  idx.pool = dynamic_rows;
  std::sort(idx.pool.begin(), idx.pool.end());
  const int n = static_cast<int>(idx.pool.size());
  idx.k = std::min(knn_k, std::max(0, n - 1));
  idx.built_at_iter = iter;
  idx.neighbors.assign(static_cast<size_t>(n) * idx.k, -1);
  idx.weights.assign(static_cast<size_t>(n) * idx.k, 0.0);
  if (idx.k == 0) return idx;

  std::vector<std::pair<double, int>> dists;
  dists.reserve(n - 1);
  for (int a = 0; a < n; ++a) {
    dists.clear();
    const double* pa = set.x_star.values.data() + 3 * idx.pool[a];
    for (int b = 0; b < n; ++b) {
      if (b == a) continue;
      const double* pb = set.x_star.values.data() + 3 * idx.pool[b];
      double d2 = 0.0;
      for (int d = 0; d < 3; ++d) {
        const double dd = pa[d] - pb[d];
        d2 += dd * dd;
      }
      dists.emplace_back(d2, b);
    }
    std::partial_sort(dists.begin(), dists.begin() + idx.k, dists.end());
    for (int s = 0; s < idx.k; ++s) {
      idx.neighbors[static_cast<size_t>(a) * idx.k + s] = dists[s].second;
      idx.weights[static_cast<size_t>(a) * idx.k + s] = std::exp(-rho_w * dists[s].first);
    }
  }
  return idx;
}

namespace {

// Unnormalized Gaussian half-kernel (center..edge); conv1d renormalizes per
// position, which handles both interior windows and truncated borders.
std::vector<double> ssim_kernel_half() {
  const double sigma = 1.5;
  std::vector<double> k(6);
  for (int i = 0; i < 6; ++i) k[i] = std::exp(-0.5 * (i * i) / (sigma * sigma));
  return k;
}

}  // namespace

ValueRef ssim_on_tape(Tape& tape, ValueRef a, ValueRef b, int width, int height) {
  if (tape.rows(a) != tape.rows(b) || tape.cols(a) != tape.cols(b))
    throw std::invalid_argument("ssim: image dimension mismatch");
  if (tape.rows(a) != width * height)
    throw std::invalid_argument("ssim: pixel count does not match width*height");
  const int C = tape.cols(a);
  const std::vector<double> kern = ssim_kernel_half();
  auto blur = [&](ValueRef v) {
    ValueRef hx = tape.conv1d(v, 0, width, height, 1, kern);
    return tape.conv1d(hx, 1, width, height, 1, kern);
  };
  ValueRef acc{};
  for (int c = 0; c < C; ++c) {
    ValueRef x = tape.slice_cols(a, c, c + 1);
    ValueRef y = tape.slice_cols(b, c, c + 1);
    ValueRef mx = blur(x);
    ValueRef my = blur(y);
    ValueRef mxx = tape.mul(mx, mx);
    ValueRef myy = tape.mul(my, my);
    ValueRef mxy = tape.mul(mx, my);
    ValueRef sx = tape.sub(blur(tape.mul(x, x)), mxx);
    ValueRef sy = tape.sub(blur(tape.mul(y, y)), myy);
    ValueRef sxy = tape.sub(blur(tape.mul(x, y)), mxy);
    ValueRef num = tape.mul(tape.add_scalar(tape.scale(mxy, 2.0), kSsimC1),
                            tape.add_scalar(tape.scale(sxy, 2.0), kSsimC2));
    ValueRef den = tape.mul(tape.add_scalar(tape.add(mxx, myy), kSsimC1),
                            tape.add_scalar(tape.add(sx, sy), kSsimC2));
    ValueRef m = tape.mean(tape.div(num, den));
    acc = c == 0 ? m : tape.add(acc, m);
  }
  return C == 1 ? acc : tape.scale(acc, 1.0 / C);
}

ValueRef photometric_loss(Tape& tape, ValueRef rendered, ValueRef target, int width,
                          int height, double dssim_mix) {
  if (tape.rows(rendered) != tape.rows(target) || tape.cols(rendered) != tape.cols(target))
    throw std::invalid_argument("photometric: image dimension mismatch");
  ValueRef l1 = tape.mean(tape.abs(tape.sub(rendered, target)));
  ValueRef dssim =
      tape.add_scalar(tape.neg(ssim_on_tape(tape, rendered, target, width, height)), 1.0);
  return tape.add(tape.scale(l1, 1.0 - dssim_mix), tape.scale(dssim, dssim_mix));
}

ValueRef mask_loss(Tape& tape, ValueRef rendered_mask, ValueRef target_mask) {
  if (tape.rows(rendered_mask) != tape.rows(target_mask) ||
      tape.cols(rendered_mask) != 1 || tape.cols(target_mask) != 1)
    throw std::invalid_argument("mask_loss: need matching single-channel images");
  ValueRef d = tape.sub(rendered_mask, target_mask);
  return tape.mean(tape.mul(d, d));
}

ValueRef entropy_loss(Tape& tape, ValueRef pvals) {
  ValueRef p = tape.clamp(pvals, 1e-6, 1.0 - 1e-6);
  ValueRef q = tape.add_scalar(tape.neg(p), 1.0);
  ValueRef e = tape.neg(tape.add(tape.mul(p, tape.log(p)), tape.mul(q, tape.log(q))));
  return tape.mean(e);
}

ValueRef arap_loss(Tape& tape, ValueRef pos_prev, ValueRef pos_cur, ValueRef rot_prev,
                   ValueRef rot_cur, const std::vector<int>& pairs_i,
                   const std::vector<int>& pairs_j, const std::vector<double>& weights,
                   int knn_k, int n_samples) {
  if (pairs_i.size() != pairs_j.size() || pairs_i.size() != weights.size())
    throw std::invalid_argument("arap: pair list size mismatch");
  if (pairs_i.empty() || knn_k == 0 || n_samples == 0) return tape.constant_scalar(0.0);
  ValueRef Rp = tape.quat_to_rotmat(rot_prev);
  ValueRef Rc = tape.quat_to_rotmat(rot_cur);
  // R_prev R_cur^T realizes R^{t-1} (R^t)^{-1} for unit quaternions.
  ValueRef Rrel = tape.rows_matmul_abt3(Rp, Rc);
  ValueRef Ri = tape.gather_rows(Rrel, pairs_i);
  ValueRef dprev = tape.sub(tape.gather_rows(pos_prev, pairs_j),
                            tape.gather_rows(pos_prev, pairs_i));
  ValueRef dcur = tape.sub(tape.gather_rows(pos_cur, pairs_j),
                           tape.gather_rows(pos_cur, pairs_i));
  ValueRef diff = tape.sub(dprev, tape.rows_matvec3(Ri, dcur));
  ValueRef norms = tape.rows_norm(diff);
  ValueRef w = tape.constant(weights, static_cast<int>(weights.size()), 1);
  return tape.scale(tape.sum(tape.mul(norms, w)),
                    1.0 / (static_cast<double>(knn_k) * n_samples));
}

ValueRef spatial_smoothness_loss(Tape& tape, const CoefficientNet& net, ValueRef net_params,
                                 ValueRef enc_a, ValueRef enc_b, double w_beta,
                                 double w_gamma) {
  const CoefficientNet::Heads ha = net.forward(tape, net_params, enc_a);
  const CoefficientNet::Heads hb = net.forward(tape, net_params, enc_b);
  const int S = tape.rows(enc_a);
  auto term = [&](ValueRef x, ValueRef y, int nb, int w) {
    ValueRef d = tape.reshape(tape.sub(x, y), S * nb, w);
    return tape.mean(tape.rows_norm(d));
  };
  ValueRef ts = term(ha.sigma, hb.sigma, net.k, 3);
  ValueRef tb = term(ha.beta, hb.beta, net.l, 3);
  ValueRef tg = term(ha.gamma, hb.gamma, net.m, 4);
  return tape.add(ts, tape.add(tape.scale(tb, w_beta), tape.scale(tg, w_gamma)));
}

ValueRef total_loss(Tape& tape, ValueRef pho, ValueRef mask, ValueRef entropy,
                    ValueRef arap, ValueRef spatial, const LossWeights& w) {
  ValueRef total = pho;
  if (!total.valid()) throw std::invalid_argument("total_loss: photometric term required");
  if (mask.valid()) total = tape.add(total, mask);
  if (entropy.valid()) total = tape.add(total, entropy);
  if (arap.valid()) total = tape.add(total, tape.scale(arap, w.lambda_a));
  if (spatial.valid()) total = tape.add(total, tape.scale(spatial, w.lambda_s));
  return total;
}

}  // namespace dgtraj
