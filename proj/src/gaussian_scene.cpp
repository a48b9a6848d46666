#include "dgtraj/gaussian_scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dgtraj {

MotionClass classify(double p, double static_threshold) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("classify: p outside [0,1]");
  return (1.0 - p) >= static_threshold ? MotionClass::Static : MotionClass::Dynamic;
}

Eigen::Matrix3d covariance(const Eigen::Vector3d& scale, const Eigen::Vector4d& rot) {
  const double nrm = rot.norm();
  if (std::abs(nrm - 1.0) > 1e-6)
    throw std::invalid_argument("covariance: quaternion is not unit");
  const double w = rot[0], x = rot[1], y = rot[2], z = rot[3];
  Eigen::Matrix3d R;
  R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  const Eigen::Matrix3d M = R * scale.asDiagonal();
  return M * M.transpose();
}

std::vector<int> GaussianSet::dynamic_indices(double static_threshold) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (classify(p_of(i), static_threshold) == MotionClass::Dynamic) out.push_back(i);
  return out;
}

void GaussianSet::validate() const {
  const size_t P = opacity_logit.values.size();
  if (P < 1) throw std::runtime_error("GaussianSet: empty");
  if (x_star.values.size() != 3 * P || log_scale.values.size() != 3 * P ||
      rotation.values.size() != 4 * P || color.values.size() != 3 * P ||
      dyn_logit.values.size() != P)
    throw std::runtime_error("GaussianSet: inconsistent array lengths");
}

void GaussianSet::resize_all_state() {
  for (ParamGroup* g : {&x_star, &log_scale, &rotation, &opacity_logit, &color, &dyn_logit})
    g->resize_state();
  grad_accum.assign(size(), 0.0);
  grad_count.assign(size(), 0);
}

void GaussianSet::normalize_rotations() {
  for (int i = 0; i < size(); ++i) {
    double* q = rotation.values.data() + 4 * i;
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (n <= 1e-12) throw std::runtime_error("GaussianSet: zero-norm quaternion");
    for (int d = 0; d < 4; ++d) q[d] /= n;
  }
}

void GaussianSet::add_grad_stat(int i, double grad_norm) {
  grad_accum[i] += grad_norm;
  grad_count[i] += 1;
}

void GaussianSet::reset_grad_stats() {
  std::fill(grad_accum.begin(), grad_accum.end(), 0.0);
  std::fill(grad_count.begin(), grad_count.end(), 0);
}

namespace {

// Rebuild a group's values and Adam state from kept rows plus appended rows.
// New rows get zero optimizer state.
void rebuild_group(ParamGroup& g, int width, const std::vector<int>& keep,
                   const std::vector<std::vector<double>>& appended) {
  std::vector<double> nv, nm, nvv;
  const size_t total = (keep.size() + appended.size()) * width;
  nv.reserve(total);
  nm.reserve(total);
  nvv.reserve(total);
  for (int i : keep)
    for (int d = 0; d < width; ++d) {
      nv.push_back(g.values[static_cast<size_t>(i) * width + d]);
      nm.push_back(g.m[static_cast<size_t>(i) * width + d]);
      nvv.push_back(g.v[static_cast<size_t>(i) * width + d]);
    }
  for (const auto& row : appended)
    for (int d = 0; d < width; ++d) {
      nv.push_back(row[d]);
      nm.push_back(0.0);
      nvv.push_back(0.0);
    }
  g.values = std::move(nv);
  g.m = std::move(nm);
  g.v = std::move(nvv);
}

}  // namespace

DensifyReport GaussianSet::densify_and_prune(const DensifyConfig& cfg, Rng& rng) {
  validate();
  const int P = size();
  DensifyReport rep;

  // Row plans: keep list (pruning + split-parent removal), appended rows per group.
  std::vector<int> keep;
  std::vector<std::vector<double>> app_x, app_s, app_r, app_o, app_c, app_d;

  auto append_row = [&](int src, const double* pos, const double* ls) {
    app_x.push_back({pos[0], pos[1], pos[2]});
    app_s.push_back({ls[0], ls[1], ls[2]});
    const double* q = rotation.values.data() + 4 * src;
    app_r.push_back({q[0], q[1], q[2], q[3]});
    app_o.push_back({opacity_logit.values[src]});
    const double* col = color.values.data() + 3 * src;
    app_c.push_back({col[0], col[1], col[2]});
    app_d.push_back({dyn_logit.values[src]});
  };

  for (int i = 0; i < P; ++i) {
    const double opa = sigmoid(opacity_logit.values[i]);
    if (opa < cfg.opacity_floor) {
      ++rep.pruned;
      continue;
    }
    const double mean_grad = grad_count[i] > 0 ? grad_accum[i] / grad_count[i] : 0.0;
    const double thr = classify(p_of(i), cfg.static_threshold) == MotionClass::Static
                           ? cfg.thr_static
                           : cfg.thr_dynamic;
    if (mean_grad <= thr) {
      keep.push_back(i);
      continue;
    }
    const double* ls = log_scale.values.data() + 3 * i;
    const double max_scale = std::exp(std::max({ls[0], ls[1], ls[2]}));
    const double* pos = x_star.values.data() + 3 * i;
    if (max_scale < cfg.clone_scale_frac * scene_extent) {
      // Clone: keep the original, append an identical copy.
      keep.push_back(i);
      append_row(i, pos, ls);
      ++rep.cloned;
    } else {
      // Split: two children sampled from the parent Gaussian, scales shrunk.
      const Eigen::Vector3d s(std::exp(ls[0]), std::exp(ls[1]), std::exp(ls[2]));
      Eigen::Vector4d q(rotation.values[4 * i], rotation.values[4 * i + 1],
                        rotation.values[4 * i + 2], rotation.values[4 * i + 3]);
      q.normalize();
      const double w = q[0], x = q[1], y = q[2], z = q[3];
      Eigen::Matrix3d R;
      R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
          2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
          2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
      double child_ls[3] = {ls[0] - std::log(cfg.split_factor),
                            ls[1] - std::log(cfg.split_factor),
                            ls[2] - std::log(cfg.split_factor)};
      for (int c = 0; c < 2; ++c) {
        Eigen::Vector3d n(rng.normal(), rng.normal(), rng.normal());
        const Eigen::Vector3d offset = R * (s.cwiseProduct(n));
        double child_pos[3] = {pos[0] + offset[0], pos[1] + offset[1], pos[2] + offset[2]};
        append_row(i, child_pos, child_ls);
      }
      ++rep.split;
    }
  }

  if (keep.empty() && app_o.empty())
    throw std::runtime_error("densify_and_prune: pruning would empty the set");

  rebuild_group(x_star, 3, keep, app_x);
  rebuild_group(log_scale, 3, keep, app_s);
  rebuild_group(rotation, 4, keep, app_r);
  rebuild_group(opacity_logit, 1, keep, app_o);
  rebuild_group(color, 3, keep, app_c);
  rebuild_group(dyn_logit, 1, keep, app_d);
  grad_accum.assign(size(), 0.0);
  grad_count.assign(size(), 0);
  return rep;
}

namespace {

void finish_scene(GaussianSet& set, const std::vector<double>& xyz) {
  const int n = static_cast<int>(xyz.size() / 3);
  // Scene center and bounding-sphere radius drive extent-scaled parameters.
  double c[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d) c[d] += xyz[3 * i + d];
  for (double& v : c) v /= n;
  double r2max = 0.0;
  for (int i = 0; i < n; ++i) {
    double r2 = 0.0;
    for (int d = 0; d < 3; ++d) {
      const double dd = xyz[3 * i + d] - c[d];
      r2 += dd * dd;
    }
    r2max = std::max(r2max, r2);
  }
  set.scene_extent = std::max(std::sqrt(r2max), 1e-6);
  for (int d = 0; d < 3; ++d) set.scene_center[d] = c[d];

  // Mean nearest-neighbor spacing sets the initial scale, as in point-cloud
  // initialized splatting.
  double mean_nn = 0.0;
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      double d2 = 0.0;
      for (int d = 0; d < 3; ++d) {
        const double dd = xyz[3 * i + d] - xyz[3 * j + d];
        d2 += dd * dd;
      }
      best = std::min(best, d2);
    }
    mean_nn += n > 1 ? std::sqrt(best) : 0.1;
  }
  mean_nn = n > 1 ? std::max(mean_nn / n, 1e-4) : 0.1;
  const double ls = std::log(mean_nn);
  set.log_scale.values.assign(static_cast<size_t>(n) * 3, ls);

  set.rotation.values.assign(static_cast<size_t>(n) * 4, 0.0);
  for (int i = 0; i < n; ++i) set.rotation.values[4 * i] = 1.0;
  set.opacity_logit.values.assign(n, logit(0.1));
  set.dyn_logit.values.assign(n, 0.0);  // p = 0.5: undecided, treated dynamic
  set.resize_all_state();
  set.validate();
}

}  // namespace

GaussianSet random_scene(int n, const double* bbox_min, const double* bbox_max, Rng& rng) {
  if (n < 1) throw std::invalid_argument("random_scene: need n >= 1");
  GaussianSet set;
  set.x_star.values.resize(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < 3; ++d)
      set.x_star.values[3 * i + d] = rng.uniform(bbox_min[d], bbox_max[d]);
  set.color.values.assign(static_cast<size_t>(n) * 3, 0.0);
  finish_scene(set, set.x_star.values);
  return set;
}

GaussianSet scene_from_points(const std::vector<double>& xyz,
                              const std::vector<double>& rgb) {
  if (xyz.empty() || xyz.size() % 3 != 0)
    throw std::invalid_argument("scene_from_points: xyz must be non-empty multiple of 3");
  const int n = static_cast<int>(xyz.size() / 3);
  GaussianSet set;
  set.x_star.values = xyz;
  set.color.values.assign(static_cast<size_t>(n) * 3, 0.0);
  if (!rgb.empty()) {
    if (rgb.size() != xyz.size())
      throw std::invalid_argument("scene_from_points: rgb size mismatch");
    for (size_t i = 0; i < rgb.size(); ++i)
      set.color.values[i] = (rgb[i] - 0.5) / kShC0;
  }
  finish_scene(set, xyz);
  return set;
}

SceneLeaves make_scene_leaves(Tape& tape, const GaussianSet& set) {
  const int P = set.size();
  SceneLeaves lv;
  lv.x = tape.leaf(set.x_star.values, P, 3, "x_star");
  lv.s = tape.leaf(set.log_scale.values, P, 3, "log_scale");
  lv.r = tape.leaf(set.rotation.values, P, 4, "rotation");
  lv.o = tape.leaf(set.opacity_logit.values, P, 1, "opacity_logit");
  lv.c = tape.leaf(set.color.values, P, 3, "color");
  lv.dyn = tape.leaf(set.dyn_logit.values, P, 1, "dyn_logit");
  return lv;
}

SnapshotRefs build_snapshot(Tape& tape, const GaussianSet& set, const SceneLeaves& leaves,
                            const CoefficientNet* net, const MotionLeaves* motion,
                            int n_frames, double t, const std::vector<int>& dynamic_rows,
                            bool apply_motion, CoefficientNet::Heads* heads_out) {
  SnapshotRefs out;
  ValueRef pos = leaves.x;
  ValueRef ls = leaves.s;
  ValueRef rot = tape.rows_normalize(leaves.r);

  if (apply_motion && !dynamic_rows.empty()) {
    if (!net || !motion)
      throw std::invalid_argument("build_snapshot: motion requested without net/basis");
    const int D = static_cast<int>(dynamic_rows.size());
    // Encodings of detached reference points: plain data, so no gradient can
    // reach x_star through the field input.
    const int ew = net->input_width();
    std::vector<double> enc(static_cast<size_t>(D) * ew);
    for (int i = 0; i < D; ++i) {
      const double* xp = set.x_star.values.data() + 3 * dynamic_rows[i];
      double nx[3];
      for (int d = 0; d < 3; ++d)
        nx[d] = (xp[d] - set.scene_center[d]) / set.scene_extent;
      encode(nx, net->L, enc.data() + static_cast<size_t>(i) * ew);
    }
    ValueRef enc_node = tape.constant(enc, D, ew);
    CoefficientNet::Heads heads = net->forward(tape, motion->net, enc_node);
    if (heads_out) *heads_out = heads;

    ValueRef theta_t = basis_row_at(tape, motion->theta, n_frames, t);
    ValueRef lambda_t = basis_row_at(tape, motion->lambda, n_frames, t);
    ValueRef eta_t = basis_row_at(tape, motion->eta, n_frames, t);

    ValueRef xd = tape.gather_rows(leaves.x, dynamic_rows);
    ValueRef sd = tape.gather_rows(leaves.s, dynamic_rows);
    ValueRef rd = tape.gather_rows(leaves.r, dynamic_rows);
    DeformedRefs def = deform(tape, xd, sd, rd, heads, theta_t, lambda_t, eta_t);

    pos = tape.overwrite_rows(leaves.x, def.position, dynamic_rows);
    ls = tape.overwrite_rows(leaves.s, def.log_scale, dynamic_rows);
    rot = tape.overwrite_rows(tape.rows_normalize(leaves.r), def.rotation, dynamic_rows);

    out.has_motion = true;
    out.dyn_x = xd;
    out.dyn_s = sd;
    out.dyn_r = rd;
    out.dyn_position = def.position;
    out.dyn_rotation = def.rotation;
    out.enc = enc_node;
  }

  ValueRef scale_act = tape.exp(ls);
  ValueRef M = tape.rows_mat_diag(tape.quat_to_rotmat(rot), scale_act);
  out.cov6 = tape.rows_mmt_sym(M);
  out.position = pos;
  out.rotation = rot;
  out.opacity = tape.sigmoid(leaves.o);
  out.color = tape.clamp(tape.add_scalar(tape.scale(leaves.c, kShC0), 0.5), 0.0, 1.0);
  out.pvals = tape.sigmoid(leaves.dyn);
  return out;
}

PlainSnapshot snapshot_plain(const GaussianSet& set, const CoefficientNet* net,
                             const std::vector<double>* net_params, const MotionBasis* basis,
                             double t, double static_threshold) {
  set.validate();
  const int P = set.size();
  PlainSnapshot snap;
  snap.count = P;
  snap.position = set.x_star.values;
  snap.rotation = set.rotation.values;
  snap.cov6.resize(static_cast<size_t>(P) * 6);
  snap.opacity.resize(P);
  snap.color.resize(static_cast<size_t>(P) * 3);
  snap.p.resize(P);

  std::vector<double> log_scales = set.log_scale.values;

  if (net && net_params && basis) {
    const std::vector<int> dyn = set.dynamic_indices(static_threshold);
    if (!dyn.empty()) {
      const int D = static_cast<int>(dyn.size());
      const int ew = net->input_width();
      std::vector<double> enc(static_cast<size_t>(D) * ew);
      for (int i = 0; i < D; ++i) {
        const double* xp = set.x_star.values.data() + 3 * dyn[i];
        double nx[3];
        for (int d = 0; d < 3; ++d)
          nx[d] = (xp[d] - set.scene_center[d]) / set.scene_extent;
        encode(nx, net->L, enc.data() + static_cast<size_t>(i) * ew);
      }
      std::vector<double> sig, bet, gam;
      net->forward_plain(*net_params, enc.data(), D, sig, bet, gam);
      for (int i = 0; i < D; ++i) {
        const int g = dyn[i];
        const DeformedState ds = deform_plain(
            set.x_star.values.data() + 3 * g, set.log_scale.values.data() + 3 * g,
            set.rotation.values.data() + 4 * g, sig.data() + static_cast<size_t>(i) * 3 * net->k,
            bet.data() + static_cast<size_t>(i) * 3 * net->l,
            gam.data() + static_cast<size_t>(i) * 4 * net->m, *basis, t, net->k, net->l, net->m);
        for (int d = 0; d < 3; ++d) snap.position[3 * g + d] = ds.position[d];
        for (int d = 0; d < 3; ++d) log_scales[3 * g + d] = ds.log_scale[d];
        for (int d = 0; d < 4; ++d) snap.rotation[4 * g + d] = ds.rotation[d];
      }
    }
  }

  for (int i = 0; i < P; ++i) {
    double* q = snap.rotation.data() + 4 * i;
    const double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (n <= 1e-12) throw std::runtime_error("snapshot: zero-norm quaternion");
    for (int d = 0; d < 4; ++d) q[d] /= n;
    const Eigen::Vector3d s(std::exp(log_scales[3 * i]), std::exp(log_scales[3 * i + 1]),
                            std::exp(log_scales[3 * i + 2]));
    const Eigen::Matrix3d cov =
        covariance(s, Eigen::Vector4d(q[0], q[1], q[2], q[3]));
    double* c6 = snap.cov6.data() + static_cast<size_t>(i) * 6;
    c6[0] = cov(0, 0);
    c6[1] = cov(0, 1);
    c6[2] = cov(0, 2);
    c6[3] = cov(1, 1);
    c6[4] = cov(1, 2);
    c6[5] = cov(2, 2);
    snap.opacity[i] = sigmoid(set.opacity_logit.values[i]);
    for (int d = 0; d < 3; ++d)
      snap.color[3 * i + d] =
          std::clamp(0.5 + kShC0 * set.color.values[3 * i + d], 0.0, 1.0);
    snap.p[i] = set.p_of(i);
  }
  return snap;
}

}  // namespace dgtraj
