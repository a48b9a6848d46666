#include "dgtraj/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dgtraj/rasterizer.hpp"
#include "dgtraj/tape.hpp"
#include "dgtraj/trajectory.hpp"

using nlohmann::json;
namespace fs = std::filesystem;

namespace dgtraj {

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (total_iters < 1) throw std::invalid_argument("TrainConfig: total_iters must be >= 1");
  if (!(warmup_frac >= 0.0 && warmup_frac <= densify_until_frac && densify_until_frac <= 1.0))
    throw std::invalid_argument("TrainConfig: need 0 <= warmup_frac <= densify_until_frac <= 1");
  if (late_stage_frac < 0.0 || late_stage_frac > 1.0)
    throw std::invalid_argument("TrainConfig: late_stage_frac must be in [0, 1]");
  if (densify_interval < 1 || eval_interval < 1)
    throw std::invalid_argument("TrainConfig: intervals must be >= 1");
  if (k < 1 || l < 1 || m < 1 || L < 1)
    throw std::invalid_argument("TrainConfig: basis counts and L must be >= 1");
  if (init_points < 1) throw std::invalid_argument("TrainConfig: init_points must be >= 1");
  for (double lr : {lr_position, lr_opacity, lr_scale, lr_rotation, lr_color, lr_dyn_logit,
                    lr_net, lr_basis})
    if (lr <= 0.0) throw std::invalid_argument("TrainConfig: learning rates must be positive");
  if (lr_position_final_ratio <= 0.0 || lr_position_final_ratio > 1.0)
    throw std::invalid_argument("TrainConfig: lr_position_final_ratio must be in (0, 1]");
  if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0)
    throw std::invalid_argument("TrainConfig: lr_decay_factor must be in (0, 1]");
  if (lr_decay_frac <= 0.0 || lr_decay_frac > 1.0)
    throw std::invalid_argument("TrainConfig: lr_decay_frac must be in (0, 1]");
  if (weights.knn_k < 1 || weights.arap_samples < 1)
    throw std::invalid_argument("TrainConfig: knn_k and arap_samples must be >= 1");
}

namespace {

template <typename T>
void read_key(const json& j, const char* key, T& out, bool& known) {
  if (j.contains(key)) {
    out = j.at(key).get<T>();
    known = true;
  }
}

}  // namespace

TrainConfig train_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string("train config: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw std::runtime_error("train config: expected a JSON object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "total_iters") c.total_iters = v.get<int>();
    else if (k == "warmup_frac") c.warmup_frac = v.get<double>();
    else if (k == "densify_until_frac") c.densify_until_frac = v.get<double>();
    else if (k == "late_stage_frac") c.late_stage_frac = v.get<double>();
    else if (k == "densify_interval") c.densify_interval = v.get<int>();
    else if (k == "eval_interval") c.eval_interval = v.get<int>();
    else if (k == "k") c.k = v.get<int>();
    else if (k == "l") c.l = v.get<int>();
    else if (k == "m") c.m = v.get<int>();
    else if (k == "L") c.L = v.get<int>();
    else if (k == "seed") c.seed = v.get<uint64_t>();
    else if (k == "init_points") c.init_points = v.get<int>();
    else if (k == "lr_position") c.lr_position = v.get<double>();
    else if (k == "lr_position_final_ratio") c.lr_position_final_ratio = v.get<double>();
    else if (k == "lr_opacity") c.lr_opacity = v.get<double>();
    else if (k == "lr_scale") c.lr_scale = v.get<double>();
    else if (k == "lr_rotation") c.lr_rotation = v.get<double>();
    else if (k == "lr_color") c.lr_color = v.get<double>();
    else if (k == "lr_dyn_logit") c.lr_dyn_logit = v.get<double>();
    else if (k == "lr_net") c.lr_net = v.get<double>();
    else if (k == "lr_basis") c.lr_basis = v.get<double>();
    else if (k == "lr_decay_factor") c.lr_decay_factor = v.get<double>();
    else if (k == "lr_decay_frac") c.lr_decay_frac = v.get<double>();
    else if (k == "lambda_a") c.weights.lambda_a = v.get<double>();
    else if (k == "lambda_s") c.weights.lambda_s = v.get<double>();
    else if (k == "w_beta") c.weights.w_beta = v.get<double>();
    else if (k == "w_gamma") c.weights.w_gamma = v.get<double>();
    else if (k == "dssim_mix") c.weights.dssim_mix = v.get<double>();
    else if (k == "rho_w") c.weights.rho_w = v.get<double>();
    else if (k == "arap_samples") c.weights.arap_samples = v.get<int>();
    else if (k == "knn_k") c.weights.knn_k = v.get<int>();
    else if (k == "densify_grad_static") c.densify.thr_static = v.get<double>();
    else if (k == "densify_grad_dynamic") c.densify.thr_dynamic = v.get<double>();
    else if (k == "clone_scale_frac") c.densify.clone_scale_frac = v.get<double>();
    else if (k == "split_factor") c.densify.split_factor = v.get<double>();
    else if (k == "opacity_floor") c.densify.opacity_floor = v.get<double>();
    else if (k == "static_threshold") c.densify.static_threshold = v.get<double>();
    else throw std::runtime_error("train config: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

TrainConfig parse_train_config(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw std::runtime_error("train config: cannot open " + json_path);
  std::stringstream ss;
  ss << in.rdbuf();
  return train_config_from_json_text(ss.str());
}

std::string train_config_to_json(const TrainConfig& c) {
  json j;
  j["total_iters"] = c.total_iters;
  j["warmup_frac"] = c.warmup_frac;
  j["densify_until_frac"] = c.densify_until_frac;
  j["late_stage_frac"] = c.late_stage_frac;
  j["densify_interval"] = c.densify_interval;
  j["eval_interval"] = c.eval_interval;
  j["k"] = c.k;
  j["l"] = c.l;
  j["m"] = c.m;
  j["L"] = c.L;
  j["seed"] = c.seed;
  j["init_points"] = c.init_points;
  j["lr_position"] = c.lr_position;
  j["lr_position_final_ratio"] = c.lr_position_final_ratio;
  j["lr_opacity"] = c.lr_opacity;
  j["lr_scale"] = c.lr_scale;
  j["lr_rotation"] = c.lr_rotation;
  j["lr_color"] = c.lr_color;
  j["lr_dyn_logit"] = c.lr_dyn_logit;
  j["lr_net"] = c.lr_net;
  j["lr_basis"] = c.lr_basis;
  j["lr_decay_factor"] = c.lr_decay_factor;
  j["lr_decay_frac"] = c.lr_decay_frac;
  j["lambda_a"] = c.weights.lambda_a;
  j["lambda_s"] = c.weights.lambda_s;
  j["w_beta"] = c.weights.w_beta;
  j["w_gamma"] = c.weights.w_gamma;
  j["dssim_mix"] = c.weights.dssim_mix;
  j["rho_w"] = c.weights.rho_w;
  j["arap_samples"] = c.weights.arap_samples;
  j["knn_k"] = c.weights.knn_k;
  j["densify_grad_static"] = c.densify.thr_static;
  j["densify_grad_dynamic"] = c.densify.thr_dynamic;
  j["clone_scale_frac"] = c.densify.clone_scale_frac;
  j["split_factor"] = c.densify.split_factor;
  j["opacity_floor"] = c.densify.opacity_floor;
  j["static_threshold"] = c.densify.static_threshold;
  return j.dump();
}

// ---------------------------------------------------------------------------
// Model state helpers

MotionBasis ModelState::motion_basis() const {
  MotionBasis b;
  b.n_frames = n_frames;
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  b.theta = Eigen::Map<const RowMat>(theta_group.values.data(), n_frames, net.k);
  b.lambda = Eigen::Map<const RowMat>(lambda_group.values.data(), n_frames, net.l);
  b.eta = Eigen::Map<const RowMat>(eta_group.values.data(), n_frames, net.m);
  return b;
}

namespace {

void flatten_basis(const Eigen::MatrixXd& mat, std::vector<double>& out) {
  out.resize(static_cast<size_t>(mat.rows()) * mat.cols());
  for (int r = 0; r < mat.rows(); ++r)
    for (int c = 0; c < mat.cols(); ++c) out[static_cast<size_t>(r) * mat.cols() + c] = mat(r, c);
}

// Schedules are derived state: reconstructed from config + extent on both
// fresh init and checkpoint load.
void assign_schedules(ModelState& s) {
  const TrainConfig& c = s.cfg;
  const int total = c.total_iters;
  s.set.x_star.sched = {c.lr_position * s.set.scene_extent,
                        std::pow(c.lr_position_final_ratio, 1.0 / total), 1};
  s.set.log_scale.sched = {c.lr_scale, 1.0, 1};
  s.set.rotation.sched = {c.lr_rotation, 1.0, 1};
  s.set.opacity_logit.sched = {c.lr_opacity, 1.0, 1};
  s.set.color.sched = {c.lr_color, 1.0, 1};
  s.set.dyn_logit.sched = {c.lr_dyn_logit, 1.0, 1};
  const int every = std::max(1, static_cast<int>(std::llround(c.lr_decay_frac * total)));
  s.net_group.sched = {c.lr_net, c.lr_decay_factor, every};
  s.theta_group.sched = {c.lr_basis, c.lr_decay_factor, every};
  s.lambda_group.sched = {c.lr_basis, c.lr_decay_factor, every};
  s.eta_group.sched = {c.lr_basis, c.lr_decay_factor, every};
}

double frame_psnr(std::span<const double> a, const std::vector<double>& b) {
  double mse = 0.0;
  for (size_t i = 0; i < b.size(); ++i) {
    const double d = a[i] - b[i];
    mse += d * d;
  }
  mse /= static_cast<double>(b.size());
  return mse <= 0.0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));
}

void check_term(const Tape& tape, ValueRef ref, const char* name, int64_t iter) {
  if (!ref.valid()) return;
  const double v = tape.val(ref)[0];
  if (!std::isfinite(v))
    throw std::runtime_error("train: non-finite " + std::string(name) + " loss at iteration " +
                             std::to_string(iter));
}

}  // namespace

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const Dataset& ds, const TrainConfig& cfg) : ds_(&ds) {
  cfg.validate();
  if (ds.frames.size() < 2) throw std::invalid_argument("train: dataset needs at least 2 frames");
  train_idx_ = ds.train_indices();
  if (train_idx_.empty()) throw std::invalid_argument("train: dataset has no training frames");

  st_.cfg = cfg;
  st_.rng.reseed(cfg.seed);
  st_.n_frames = ds.n_frames;
  st_.masked = ds.masked;
  st_.background = ds.background;

  if (!ds.init_xyz.empty()) {
    st_.set = scene_from_points(ds.init_xyz, ds.init_rgb);
  } else {
    const double half = ds.scene_extent_override > 0.0 ? ds.scene_extent_override : 1.3;
    const double lo[3] = {-half, -half, -half};
    const double hi[3] = {half, half, half};
    st_.set = random_scene(cfg.init_points, lo, hi, st_.rng);
  }
  if (ds.scene_extent_override > 0.0) st_.set.scene_extent = ds.scene_extent_override;

  // A trajectory over N frames spans at most N DCT modes; short sequences
  // clamp the configured ranks.
  st_.net.L = cfg.L;
  st_.net.k = std::min(cfg.k, ds.n_frames);
  st_.net.l = std::min(cfg.l, ds.n_frames);
  st_.net.m = std::min(cfg.m, ds.n_frames);
  st_.net_group.values = st_.net.init_params(st_.rng);
  st_.net_group.resize_state();

  MotionBasis basis = make_motion_basis(ds.n_frames, st_.net.k, st_.net.l, st_.net.m);
  flatten_basis(basis.theta, st_.theta_group.values);
  flatten_basis(basis.lambda, st_.lambda_group.values);
  flatten_basis(basis.eta, st_.eta_group.values);
  st_.theta_group.resize_state();
  st_.lambda_group.resize_state();
  st_.eta_group.resize_state();

  assign_schedules(st_);
}

Trainer::Trainer(const Dataset& ds, ModelState state) : ds_(&ds), st_(std::move(state)) {
  train_idx_ = ds.train_indices();
  if (train_idx_.empty()) throw std::invalid_argument("train: dataset has no training frames");
  if (ds.n_frames != st_.n_frames)
    throw std::invalid_argument("train: checkpoint frame count does not match dataset");
  if (ds.masked != st_.masked)
    throw std::invalid_argument("train: checkpoint mask mode does not match dataset");
}

const ImageBuffer& Trainer::image_of(int frame_index) {
  auto it = img_cache_.find(frame_index);
  if (it != img_cache_.end()) return it->second;
  ImageBuffer img = read_png(ds_->frames[frame_index].image_path);
  if (img.channels == 1) {
    ImageBuffer rgb;
    rgb.width = img.width;
    rgb.height = img.height;
    rgb.channels = 3;
    rgb.pixels.resize(img.pixels.size() * 3);
    for (size_t i = 0; i < img.pixels.size(); ++i)
      for (int c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = img.pixels[i];
    img = std::move(rgb);
  }
  return img_cache_.emplace(frame_index, std::move(img)).first->second;
}

const ImageBuffer& Trainer::mask_of(int frame_index) {
  auto it = mask_cache_.find(frame_index);
  if (it != mask_cache_.end()) return it->second;
  ImageBuffer img = read_png(ds_->frames[frame_index].mask_path);
  if (img.channels != 1) {
    ImageBuffer gray;
    gray.width = img.width;
    gray.height = img.height;
    gray.channels = 1;
    gray.pixels.resize(img.pixels.size() / img.channels);
    for (size_t i = 0; i < gray.pixels.size(); ++i) gray.pixels[i] = img.pixels[i * img.channels];
    img = std::move(gray);
  }
  // >= 128/255 means dynamic; binarize so the MSE target is exact.
  for (double& v : img.pixels) v = v >= 128.0 / 255.0 ? 1.0 : 0.0;
  return mask_cache_.emplace(frame_index, std::move(img)).first->second;
}

StepStats Trainer::step() {
  ModelState& s = st_;
  const TrainConfig& cfg = s.cfg;
  const int64_t it = s.iter;
  if (it >= cfg.total_iters) throw std::logic_error("train: run already complete");
  const bool warm = it < cfg.warmup_iters();
  const bool late = it >= cfg.late_stage();

  if (s.cursor >= s.perm.size()) {
    s.perm = s.rng.permutation(static_cast<int>(train_idx_.size()));
    s.cursor = 0;
  }
  const int frame_index = train_idx_[s.perm[s.cursor++]];
  const Frame& fr = ds_->frames[frame_index];
  const Camera& cam = fr.cam;
  const ImageBuffer& target = image_of(frame_index);
  if (target.width != cam.width || target.height != cam.height)
    throw std::runtime_error("train: image size does not match camera for frame " +
                             std::to_string(frame_index));

  Tape tape;
  SceneLeaves leaves = make_scene_leaves(tape, s.set);
  MotionLeaves motion;
  CoefficientNet::Heads heads;
  std::vector<int> dyn;
  SnapshotRefs snap;
  if (!warm) {
    dyn = s.set.dynamic_indices(cfg.densify.static_threshold);
    motion.net = tape.leaf(s.net_group.values, 1, s.net.n_params(), "net");
    motion.theta = tape.leaf(s.theta_group.values, s.n_frames, s.net.k, "theta");
    motion.lambda = tape.leaf(s.lambda_group.values, s.n_frames, s.net.l, "lambda");
    motion.eta = tape.leaf(s.eta_group.values, s.n_frames, s.net.m, "eta");
    snap = build_snapshot(tape, s.set, leaves, &s.net, &motion, s.n_frames,
                          static_cast<double>(fr.time), dyn, true, &heads);
  } else {
    snap = build_snapshot(tape, s.set, leaves, nullptr, nullptr, s.n_frames,
                          static_cast<double>(fr.time), {}, false);
  }

  ProjectedScene proj = project_on_tape(tape, snap.position, snap.cov6, cam);
  if (proj.keep.empty())
    throw std::runtime_error("train: no Gaussian survives frustum culling in frame " +
                             std::to_string(frame_index));
  ValueRef opa_k = tape.gather_rows(snap.opacity, proj.keep);
  ValueRef col_k = tape.gather_rows(snap.color, proj.keep);
  const std::vector<double> bg(s.background.begin(), s.background.end());
  ValueRef img = rasterize(tape, proj.mu2d, proj.cov2d, opa_k, col_k, proj.depths, cam.width,
                           cam.height, bg);
  ValueRef target_node =
      tape.constant(target.pixels, cam.width * cam.height, 3, "target");
  ValueRef pho = photometric_loss(tape, img, target_node, cam.width, cam.height,
                                  cfg.weights.dssim_mix);

  ValueRef mask_term{}, entropy_term{}, arap_term{}, spatial_term{};
  if (s.masked) {
    const ImageBuffer& mt = mask_of(frame_index);
    if (mt.width != cam.width || mt.height != cam.height)
      throw std::runtime_error("train: mask size does not match camera for frame " +
                               std::to_string(frame_index));
    // Geometry and opacity are detached: the mask pass only teaches p.
    ValueRef p_k = tape.gather_rows(snap.pvals, proj.keep);
    ValueRef mimg = rasterize(tape, tape.detach(proj.mu2d), tape.detach(proj.cov2d),
                              tape.detach(opa_k), p_k, proj.depths, cam.width, cam.height, {0.0});
    ValueRef mask_target = tape.constant(mt.pixels, cam.width * cam.height, 1, "mask_target");
    mask_term = mask_loss(tape, mimg, mask_target);
    if (late) entropy_term = entropy_loss(tape, snap.pvals);
  }

  if (snap.has_motion && fr.time >= 1 && cfg.weights.lambda_a > 0.0) {
    if (s.knn.built_at_iter < 0)
      s.knn = KnnIndex::build(s.set, dyn, cfg.weights.knn_k, cfg.weights.rho_w, it);
    if (s.knn.k > 0 && !s.knn.pool.empty()) {
      std::vector<int> where(s.set.size(), -1);
      for (size_t i = 0; i < dyn.size(); ++i) where[dyn[i]] = static_cast<int>(i);
      std::vector<int> eligible;  // pool-relative entries still classified dynamic
      for (size_t e = 0; e < s.knn.pool.size(); ++e)
        if (where[s.knn.pool[e]] >= 0) eligible.push_back(static_cast<int>(e));
      std::vector<int> sampled;
      if (static_cast<int>(eligible.size()) <= cfg.weights.arap_samples) {
        sampled = eligible;
      } else {
        std::vector<int> order = s.rng.permutation(static_cast<int>(eligible.size()));
        sampled.reserve(cfg.weights.arap_samples);
        for (int i = 0; i < cfg.weights.arap_samples; ++i) sampled.push_back(eligible[order[i]]);
      }
      std::vector<int> pairs_i, pairs_j;
      std::vector<double> pair_w;
      for (int e : sampled) {
        const int i_row = where[s.knn.pool[e]];
        for (int slot = 0; slot < s.knn.k; ++slot) {
          const int nb = s.knn.neighbors[static_cast<size_t>(e) * s.knn.k + slot];
          const int j_row = where[s.knn.pool[nb]];
          if (j_row < 0) continue;  // neighbor no longer classified dynamic
          pairs_i.push_back(i_row);
          pairs_j.push_back(j_row);
          pair_w.push_back(s.knn.weights[static_cast<size_t>(e) * s.knn.k + slot]);
        }
      }
      if (!sampled.empty()) {
        ValueRef th_p = basis_row_at(tape, motion.theta, s.n_frames, fr.time - 1.0);
        ValueRef la_p = basis_row_at(tape, motion.lambda, s.n_frames, fr.time - 1.0);
        ValueRef et_p = basis_row_at(tape, motion.eta, s.n_frames, fr.time - 1.0);
        DeformedRefs prev = deform(tape, snap.dyn_x, snap.dyn_s, snap.dyn_r, heads, th_p, la_p, et_p);
        arap_term = arap_loss(tape, prev.position, snap.dyn_position, prev.rotation,
                              snap.dyn_rotation, pairs_i, pairs_j, pair_w, s.knn.k,
                              static_cast<int>(sampled.size()));
      }
    }
  }

  if (snap.has_motion && cfg.weights.lambda_s > 0.0) {
    const int D = static_cast<int>(dyn.size());
    std::vector<int> sampled;
    if (D <= cfg.weights.arap_samples) {
      sampled.resize(D);
      for (int i = 0; i < D; ++i) sampled[i] = i;
    } else {
      std::vector<int> order = s.rng.permutation(D);
      sampled.assign(order.begin(), order.begin() + cfg.weights.arap_samples);
    }
    const int ew = s.net.input_width();
    std::vector<double> enc_b(sampled.size() * static_cast<size_t>(ew));
    for (size_t i = 0; i < sampled.size(); ++i) {
      const int g = dyn[sampled[i]];
      const double* xp = s.set.x_star.values.data() + 3 * g;
      double nx[3];
      for (int d = 0; d < 3; ++d) nx[d] = (xp[d] - s.set.scene_center[d]) / s.set.scene_extent;
      double dir[3];
      s.rng.unit_vector3(dir);
      // eps = 0.001 x extent in world units, i.e. 0.001 in normalized coords.
      for (int d = 0; d < 3; ++d) nx[d] += 1e-3 * dir[d];
      encode(nx, s.net.L, enc_b.data() + i * static_cast<size_t>(ew));
    }
    ValueRef enc_a = tape.gather_rows(snap.enc, sampled);
    ValueRef enc_b_node = tape.constant(enc_b, static_cast<int>(sampled.size()), ew);
    spatial_term = spatial_smoothness_loss(tape, s.net, motion.net, enc_a, enc_b_node,
                                           cfg.weights.w_beta, cfg.weights.w_gamma);
  }

  ValueRef total = total_loss(tape, pho, mask_term, entropy_term, arap_term, spatial_term,
                              cfg.weights);
  check_term(tape, pho, "photometric", it);
  check_term(tape, mask_term, "mask", it);
  check_term(tape, entropy_term, "entropy", it);
  check_term(tape, arap_term, "rigidity", it);
  check_term(tape, spatial_term, "spatial smoothness", it);
  check_term(tape, total, "total", it);

  tape.backward(total);

  {
    std::span<const double> g2d = tape.grad(proj.mu2d);
    for (size_t r = 0; r < proj.keep.size(); ++r)
      s.set.add_grad_stat(proj.keep[r], std::hypot(g2d[2 * r], g2d[2 * r + 1]));
  }

  std::vector<double> grad_buf;
  auto update = [&](ParamGroup& g, ValueRef leaf) {
    std::span<const double> gr = tape.grad(leaf);
    grad_buf.assign(gr.begin(), gr.end());
    adam_step(g, grad_buf, static_cast<int>(it));
  };
  update(s.set.x_star, leaves.x);
  update(s.set.log_scale, leaves.s);
  update(s.set.rotation, leaves.r);
  update(s.set.opacity_logit, leaves.o);
  update(s.set.color, leaves.c);
  update(s.set.dyn_logit, leaves.dyn);
  if (!warm) {
    update(s.net_group, motion.net);
    update(s.theta_group, motion.theta);
    update(s.lambda_group, motion.lambda);
    update(s.eta_group, motion.eta);
  }
  s.set.normalize_rotations();

  StepStats stats;
  stats.iter = it;
  stats.total = tape.scalar(total);
  stats.pho = tape.scalar(pho);
  stats.mask = mask_term.valid() ? tape.scalar(mask_term) : 0.0;
  stats.entropy = entropy_term.valid() ? tape.scalar(entropy_term) : 0.0;
  stats.arap = arap_term.valid() ? tape.scalar(arap_term) : 0.0;
  stats.spatial = spatial_term.valid() ? tape.scalar(spatial_term) : 0.0;
  stats.psnr = frame_psnr(tape.val(img), target.pixels);
  stats.n_gaussians = s.set.size();

  const int64_t done = it + 1;
  if (done % cfg.densify_interval == 0 && done < cfg.densify_until()) {
    s.set.densify_and_prune(cfg.densify, s.rng);
    s.knn = KnnIndex{};  // rebuilt lazily on next use
    stats.n_gaussians = s.set.size();
  }
  s.iter = done;
  return stats;
}

void Trainer::run(const std::string& metrics_path) {
  std::ofstream log;
  if (!metrics_path.empty()) {
    // Fresh runs truncate; a resumed run continues the existing log.
    log.open(metrics_path, st_.iter > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("train: cannot open metrics log " + metrics_path);
  }
  while (st_.iter < st_.cfg.total_iters) {
    StepStats t = step();
    const bool last = st_.iter == st_.cfg.total_iters;
    if (log && (t.iter % st_.cfg.eval_interval == 0 || last)) {
      json rec;
      rec["iter"] = t.iter;
      rec["loss"] = t.total;
      rec["pho"] = t.pho;
      rec["mask"] = t.mask;
      rec["entropy"] = t.entropy;
      rec["arap"] = t.arap;
      rec["spatial"] = t.spatial;
      rec["psnr"] = t.psnr;
      rec["n_gaussians"] = t.n_gaussians;
      log << rec.dump() << "\n";
      log.flush();
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation / render / export

EvalResult evaluate(const ModelState& ms, const Dataset& ds) {
  std::vector<int> test = ds.test_indices();
  if (test.empty()) throw std::invalid_argument("evaluate: dataset has no test frames");
  const MotionBasis basis = ms.motion_basis();
  const std::vector<double> bg(ms.background.begin(), ms.background.end());
  EvalResult res;
  for (int idx : test) {
    const Frame& fr = ds.frames[idx];
    PlainSnapshot snap =
        snapshot_plain(ms.set, &ms.net, &ms.net_group.values, &basis,
                       static_cast<double>(fr.time), ms.cfg.densify.static_threshold);
    std::vector<double> px = render_plain(snap, fr.cam, false, bg);
    ImageBuffer rendered;
    rendered.width = fr.cam.width;
    rendered.height = fr.cam.height;
    rendered.channels = 3;
    rendered.pixels = std::move(px);
    ImageBuffer truth = read_png(fr.image_path);
    if (truth.channels == 1) {
      ImageBuffer rgb;
      rgb.width = truth.width;
      rgb.height = truth.height;
      rgb.channels = 3;
      rgb.pixels.resize(truth.pixels.size() * 3);
      for (size_t i = 0; i < truth.pixels.size(); ++i)
        for (int c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = truth.pixels[i];
      truth = std::move(rgb);
    }
    ImageMetrics m = image_metrics(rendered, truth);
    res.rows.push_back({idx, fr.time, m.psnr, m.ssim});
    res.mean_psnr += m.psnr;
    res.mean_ssim += m.ssim;
  }
  res.mean_psnr /= static_cast<double>(res.rows.size());
  res.mean_ssim /= static_cast<double>(res.rows.size());
  return res;
}

std::vector<double> render_model(const ModelState& ms, const Camera& cam, double t) {
  if (t < 0.0 || t > ms.n_frames - 1)
    throw std::invalid_argument("render: time " + std::to_string(t) + " outside [0, " +
                                std::to_string(ms.n_frames - 1) + "]");
  const MotionBasis basis = ms.motion_basis();
  PlainSnapshot snap = snapshot_plain(ms.set, &ms.net, &ms.net_group.values, &basis, t,
                                      ms.cfg.densify.static_threshold);
  const std::vector<double> bg(ms.background.begin(), ms.background.end());
  return render_plain(snap, cam, false, bg);
}

std::vector<TrajRow> export_trajectories(const ModelState& ms, const std::vector<double>& times,
                                         bool dynamic_only) {
  for (double t : times)
    if (t < 0.0 || t > ms.n_frames - 1)
      throw std::invalid_argument("export: time " + std::to_string(t) + " outside [0, " +
                                  std::to_string(ms.n_frames - 1) + "]");
  std::vector<int> ids;
  if (dynamic_only) {
    ids = ms.set.dynamic_indices(ms.cfg.densify.static_threshold);
  } else {
    ids.resize(ms.set.size());
    for (int i = 0; i < ms.set.size(); ++i) ids[i] = i;
  }
  const MotionBasis basis = ms.motion_basis();
  std::vector<PlainSnapshot> snaps;
  snaps.reserve(times.size());
  for (double t : times)
    snaps.push_back(snapshot_plain(ms.set, &ms.net, &ms.net_group.values, &basis, t,
                                   ms.cfg.densify.static_threshold));
  std::vector<TrajRow> rows;
  rows.reserve(ids.size() * times.size());
  for (int id : ids)
    for (size_t ti = 0; ti < times.size(); ++ti) {
      const PlainSnapshot& sn = snaps[ti];
      rows.push_back({id, times[ti], sn.position[3 * id], sn.position[3 * id + 1],
                      sn.position[3 * id + 2], sn.p[id]});
    }
  return rows;
}

// ---------------------------------------------------------------------------
// Checkpoint

namespace {

struct ByteWriter {
  std::string buf;
  void raw(const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); }
  void u8(uint8_t v) { raw(&v, 1); }
  void u32(uint32_t v) { raw(&v, 4); }
  void u64(uint64_t v) { raw(&v, 8); }
  void i64(int64_t v) { raw(&v, 8); }
  void f64(double v) { raw(&v, 8); }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    raw(v.data(), v.size() * 8);
  }
  void ints(const std::vector<int>& v) {
    u64(v.size());
    for (int x : v) i64(x);
  }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
};

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  explicit ByteReader(const std::string& b) : buf(b) {}
  void raw(void* p, size_t n) {
    if (pos + n > buf.size()) throw std::runtime_error("load_checkpoint: truncated section");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  uint8_t u8() {
    uint8_t v;
    raw(&v, 1);
    return v;
  }
  uint32_t u32() {
    uint32_t v;
    raw(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    raw(&v, 8);
    return v;
  }
  int64_t i64() {
    int64_t v;
    raw(&v, 8);
    return v;
  }
  double f64() {
    double v;
    raw(&v, 8);
    return v;
  }
  std::vector<double> doubles() {
    std::vector<double> v(u64());
    raw(v.data(), v.size() * 8);
    return v;
  }
  std::vector<int> ints() {
    std::vector<int> v(u64());
    for (int& x : v) x = static_cast<int>(i64());
    return v;
  }
  std::string str() {
    std::string s(u64(), '\0');
    raw(s.data(), s.size());
    return s;
  }
};

void put_group(ByteWriter& w, const ParamGroup& g) {
  w.doubles(g.values);
  w.doubles(g.m);
  w.doubles(g.v);
  w.i64(g.step);
}

void get_group(ByteReader& r, ParamGroup& g) {
  g.values = r.doubles();
  g.m = r.doubles();
  g.v = r.doubles();
  g.step = r.i64();
  if (g.m.size() != g.values.size() || g.v.size() != g.values.size())
    throw std::runtime_error("load_checkpoint: optimizer state size mismatch in group " + g.name);
}

constexpr char kMagic[4] = {'D', 'G', 'T', 'J'};
constexpr uint32_t kVersion = 1;

}  // namespace

void save_checkpoint(const ModelState& ms, const std::string& path) {
  std::vector<std::pair<std::string, std::string>> sections;

  sections.emplace_back("config", train_config_to_json(ms.cfg));

  {
    ByteWriter w;
    w.u64(static_cast<uint64_t>(ms.set.size()));
    w.f64(ms.set.scene_extent);
    for (double c : ms.set.scene_center) w.f64(c);
    put_group(w, ms.set.x_star);
    put_group(w, ms.set.log_scale);
    put_group(w, ms.set.rotation);
    put_group(w, ms.set.opacity_logit);
    put_group(w, ms.set.color);
    put_group(w, ms.set.dyn_logit);
    w.doubles(ms.set.grad_accum);
    w.u64(ms.set.grad_count.size());
    for (int c : ms.set.grad_count) w.i64(c);
    sections.emplace_back("scene", std::move(w.buf));
  }
  {
    ByteWriter w;
    w.u64(static_cast<uint64_t>(ms.net.L));
    w.u64(static_cast<uint64_t>(ms.net.k));
    w.u64(static_cast<uint64_t>(ms.net.l));
    w.u64(static_cast<uint64_t>(ms.net.m));
    w.u64(static_cast<uint64_t>(ms.net.hidden));
    put_group(w, ms.net_group);
    put_group(w, ms.theta_group);
    put_group(w, ms.lambda_group);
    put_group(w, ms.eta_group);
    sections.emplace_back("motion", std::move(w.buf));
  }
  {
    ByteWriter w;
    w.i64(ms.iter);
    for (uint64_t v : ms.rng.state()) w.u64(v);
    w.ints(ms.perm);
    w.u64(ms.cursor);
    w.u8(ms.masked ? 1 : 0);
    for (double c : ms.background) w.f64(c);
    w.u64(static_cast<uint64_t>(ms.n_frames));
    sections.emplace_back("loop", std::move(w.buf));
  }
  {
    ByteWriter w;
    w.i64(ms.knn.built_at_iter);
    w.u64(static_cast<uint64_t>(ms.knn.k));
    w.ints(ms.knn.pool);
    w.ints(ms.knn.neighbors);
    w.doubles(ms.knn.weights);
    sections.emplace_back("knn", std::move(w.buf));
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    out.write(kMagic, 4);
    uint32_t ver = kVersion;
    out.write(reinterpret_cast<const char*>(&ver), 4);
    for (auto& [name, payload] : sections) {
      uint32_t nl = static_cast<uint32_t>(name.size());
      out.write(reinterpret_cast<const char*>(&nl), 4);
      out.write(name.data(), nl);
      uint64_t pl = payload.size();
      out.write(reinterpret_cast<const char*>(&pl), 8);
      out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), 4);
  if (!in || ver != kVersion)
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(ver));

  std::unordered_map<std::string, std::string> sections;
  while (true) {
    uint32_t nl = 0;
    in.read(reinterpret_cast<char*>(&nl), 4);
    if (in.eof()) break;
    if (!in || nl > 256) throw std::runtime_error("load_checkpoint: corrupt section header");
    std::string name(nl, '\0');
    in.read(name.data(), nl);
    uint64_t pl = 0;
    in.read(reinterpret_cast<char*>(&pl), 8);
    std::string payload(pl, '\0');
    in.read(payload.data(), static_cast<std::streamsize>(pl));
    if (!in) throw std::runtime_error("load_checkpoint: truncated section " + name);
    sections.emplace(std::move(name), std::move(payload));
  }
  for (const char* need : {"config", "scene", "motion", "loop", "knn"})
    if (!sections.count(need))
      throw std::runtime_error(std::string("load_checkpoint: missing section ") + need);

  ModelState ms;
  ms.cfg = train_config_from_json_text(sections["config"]);

  {
    ByteReader r(sections["scene"]);
    const uint64_t P = r.u64();
    ms.set.scene_extent = r.f64();
    for (double& c : ms.set.scene_center) c = r.f64();
    get_group(r, ms.set.x_star);
    get_group(r, ms.set.log_scale);
    get_group(r, ms.set.rotation);
    get_group(r, ms.set.opacity_logit);
    get_group(r, ms.set.color);
    get_group(r, ms.set.dyn_logit);
    ms.set.grad_accum = r.doubles();
    const uint64_t nc = r.u64();
    ms.set.grad_count.resize(nc);
    for (uint64_t i = 0; i < nc; ++i) ms.set.grad_count[i] = static_cast<int>(r.i64());
    if (ms.set.opacity_logit.values.size() != P)
      throw std::runtime_error("load_checkpoint: scene size mismatch");
    ms.set.validate();
  }
  {
    ByteReader r(sections["motion"]);
    ms.net.L = static_cast<int>(r.u64());
    ms.net.k = static_cast<int>(r.u64());
    ms.net.l = static_cast<int>(r.u64());
    ms.net.m = static_cast<int>(r.u64());
    ms.net.hidden = static_cast<int>(r.u64());
    get_group(r, ms.net_group);
    get_group(r, ms.theta_group);
    get_group(r, ms.lambda_group);
    get_group(r, ms.eta_group);
    if (ms.net_group.values.size() != static_cast<size_t>(ms.net.n_params()))
      throw std::runtime_error("load_checkpoint: net parameter count mismatch");
  }
  {
    ByteReader r(sections["loop"]);
    ms.iter = r.i64();
    std::array<uint64_t, 4> st;
    for (uint64_t& v : st) v = r.u64();
    ms.rng.set_state(st);
    ms.perm = r.ints();
    ms.cursor = r.u64();
    ms.masked = r.u8() != 0;
    for (double& c : ms.background) c = r.f64();
    ms.n_frames = static_cast<int>(r.u64());
  }
  {
    ByteReader r(sections["knn"]);
    ms.knn.built_at_iter = r.i64();
    ms.knn.k = static_cast<int>(r.u64());
    ms.knn.pool = r.ints();
    ms.knn.neighbors = r.ints();
    ms.knn.weights = r.doubles();
  }

  ms.net_group.name = "net";
  ms.theta_group.name = "theta";
  ms.lambda_group.name = "lambda";
  ms.eta_group.name = "eta";
  assign_schedules(ms);
  return ms;
}

}  // namespace dgtraj
