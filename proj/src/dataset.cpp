#include "dgtraj/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "dgtraj/gaussian_scene.hpp"
#include "dgtraj/losses.hpp"
#include "dgtraj/rasterizer.hpp"
#include "dgtraj/rng.hpp"
#include "dgtraj/tape.hpp"
#include "dgtraj/trajectory.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace dgtraj {

namespace {

std::string frame_png(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d.png", index);
  return buf;
}

json load_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error(std::string(what) + ": malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

void require_keys(const json& j, std::initializer_list<const char*> keys, const char* what) {
  for (const char* k : keys)
    if (!j.contains(k)) throw std::runtime_error(std::string(what) + ": missing key '" + k + "'");
}

Camera camera_from_json(const json& e, const char* what) {
  require_keys(e, {"K", "W", "width", "height"}, what);
  Camera cam;
  const json& K = e.at("K");
  const json& W = e.at("W");
  if (!K.is_array() || K.size() != 4)
    throw std::runtime_error(std::string(what) + ": K must have 4 entries");
  if (!W.is_array() || W.size() != 16)
    throw std::runtime_error(std::string(what) + ": W must be a 4x4 row-major matrix (16 entries)");
  cam.fx = K[0].get<double>();
  cam.fy = K[1].get<double>();
  cam.cx = K[2].get<double>();
  cam.cy = K[3].get<double>();
  for (int k = 0; k < 16; ++k) cam.W[k] = W[k].get<double>();
  cam.width = e.at("width").get<int>();
  cam.height = e.at("height").get<int>();
  if (e.contains("time")) cam.time = e.at("time").get<int>();
  cam.validate();
  return cam;
}

}  // namespace

Camera parse_camera_file(const std::string& path) {
  json j = load_json_file(path, "parse_camera_file");
  if (!j.is_object()) throw std::runtime_error("parse_camera_file: expected a JSON object");
  return camera_from_json(j, "parse_camera_file");
}

std::vector<int> Dataset::train_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < frames.size(); ++i)
    if (!frames[i].test) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Dataset::test_indices() const {
  std::vector<int> out;
  for (size_t i = 0; i < frames.size(); ++i)
    if (frames[i].test) out.push_back(static_cast<int>(i));
  return out;
}

Dataset load_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("load_dataset: missing directory " + dir);
  const fs::path root(dir);
  const fs::path cam_file = root / "cameras.json";
  if (!fs::exists(cam_file))
    throw std::runtime_error("load_dataset: missing camera file " + cam_file.string());

  json cams = load_json_file(cam_file.string(), "load_dataset");
  if (!cams.is_array() || cams.empty())
    throw std::runtime_error("load_dataset: cameras.json must be a non-empty list");

  Dataset ds;
  ds.dir = dir;
  const bool has_masks = fs::is_directory(root / "masks");
  ds.masked = has_masks;

  for (size_t i = 0; i < cams.size(); ++i) {
    const json& e = cams[i];
    require_keys(e, {"time", "split"}, "load_dataset: camera entry");
    Frame f;
    try {
      f.cam = camera_from_json(e, "camera entry");
    } catch (const std::exception& ex) {
      throw std::runtime_error("load_dataset: camera " + std::to_string(i) + ": " + ex.what());
    }
    f.time = f.cam.time;
    const std::string split = e.at("split").get<std::string>();
    if (split == "train")
      f.test = false;
    else if (split == "test")
      f.test = true;
    else
      throw std::runtime_error("load_dataset: camera " + std::to_string(i) +
                               " split must be 'train' or 'test', got '" + split + "'");

    const fs::path img = root / "images" / frame_png(static_cast<int>(i));
    if (!fs::exists(img))
      throw std::runtime_error("load_dataset: mismatched image count, missing " + img.string());
    f.image_path = img.string();

    const fs::path msk = root / "masks" / frame_png(static_cast<int>(i));
    if (has_masks && fs::exists(msk)) f.mask_path = msk.string();
    if (has_masks && !f.test && f.mask_path.empty())
      throw std::runtime_error("load_dataset: masked dataset is missing " + msk.string() +
                               " for training frame " + std::to_string(i));
    ds.frames.push_back(std::move(f));
  }

  std::set<int> times;
  for (const Frame& f : ds.frames) times.insert(f.time);
  int expect = 0;
  for (int t : times) {
    if (t != expect)
      throw std::runtime_error("load_dataset: non-contiguous timestamps, expected " +
                               std::to_string(expect) + " but found " + std::to_string(t));
    ++expect;
  }
  ds.n_frames = expect;
  if (ds.n_frames == 0) throw std::runtime_error("load_dataset: no timestamps");

  const fs::path meta = root / "meta.json";
  if (fs::exists(meta)) {
    json m = load_json_file(meta.string(), "load_dataset");
    for (auto it = m.begin(); it != m.end(); ++it) {
      if (it.key() == "background") {
        auto bg = it.value();
        if (!bg.is_array() || bg.size() != 3)
          throw std::runtime_error("load_dataset: meta.json background must have 3 entries");
        for (int c = 0; c < 3; ++c) ds.background[c] = bg[c].get<double>();
      } else if (it.key() == "scene_extent") {
        ds.scene_extent_override = it.value().get<double>();
        if (ds.scene_extent_override <= 0.0)
          throw std::runtime_error("load_dataset: meta.json scene_extent must be positive");
      } else {
        throw std::runtime_error("load_dataset: unknown key '" + it.key() + "' in meta.json");
      }
    }
  }

  const fs::path ply = root / "points.ply";
  if (fs::exists(ply)) read_ply(ply.string(), ds.init_xyz, ds.init_rgb);
  return ds;
}

// ---------------------------------------------------------------------------
// PLY

namespace {

struct PlyProp {
  std::string type;
  std::string name;
};

size_t ply_type_size(const std::string& t) {
  if (t == "float" || t == "float32") return 4;
  if (t == "double" || t == "float64") return 8;
  if (t == "uchar" || t == "uint8") return 1;
  throw std::runtime_error("read_ply: unsupported property type " + t);
}

}  // namespace

void read_ply(const std::string& path, std::vector<double>& xyz, std::vector<double>& rgb) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ply: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0)
    throw std::runtime_error("read_ply: not a PLY file: " + path);

  bool binary = false;
  size_t n_vertex = 0;
  std::vector<PlyProp> props;
  bool in_vertex = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ss(line);
    std::string tok;
    ss >> tok;
    if (tok == "comment") continue;
    if (tok == "format") {
      std::string f;
      ss >> f;
      if (f == "ascii")
        binary = false;
      else if (f == "binary_little_endian")
        binary = true;
      else
        throw std::runtime_error("read_ply: unsupported format " + f);
    } else if (tok == "element") {
      std::string name;
      size_t count;
      ss >> name >> count;
      if (name == "vertex") {
        n_vertex = count;
        in_vertex = true;
      } else {
        if (count != 0) throw std::runtime_error("read_ply: unsupported element " + name);
        in_vertex = false;
      }
    } else if (tok == "property") {
      if (!in_vertex) continue;
      PlyProp p;
      ss >> p.type >> p.name;
      if (p.type == "list") throw std::runtime_error("read_ply: list properties unsupported");
      props.push_back(p);
    } else if (tok == "end_header") {
      break;
    }
  }
  if (n_vertex == 0) throw std::runtime_error("read_ply: no vertex element in " + path);

  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1;
  for (size_t i = 0; i < props.size(); ++i) {
    const std::string& n = props[i].name;
    if (n == "x") ix = static_cast<int>(i);
    if (n == "y") iy = static_cast<int>(i);
    if (n == "z") iz = static_cast<int>(i);
    if (n == "red") ir = static_cast<int>(i);
    if (n == "green") ig = static_cast<int>(i);
    if (n == "blue") ib = static_cast<int>(i);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw std::runtime_error("read_ply: missing x/y/z properties");
  const bool has_rgb = ir >= 0 && ig >= 0 && ib >= 0;

  xyz.assign(n_vertex * 3, 0.0);
  rgb.clear();
  if (has_rgb) rgb.assign(n_vertex * 3, 0.0);

  std::vector<double> vals(props.size());
  if (binary) {
    for (size_t v = 0; v < n_vertex; ++v) {
      for (size_t p = 0; p < props.size(); ++p) {
        const size_t sz = ply_type_size(props[p].type);
        unsigned char buf[8];
        if (!in.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(sz)))
          throw std::runtime_error("read_ply: truncated vertex data in " + path);
        if (sz == 4) {
          float f;
          std::memcpy(&f, buf, 4);
          vals[p] = f;
        } else if (sz == 8) {
          double d;
          std::memcpy(&d, buf, 8);
          vals[p] = d;
        } else {
          vals[p] = buf[0];
        }
      }
      xyz[v * 3 + 0] = vals[ix];
      xyz[v * 3 + 1] = vals[iy];
      xyz[v * 3 + 2] = vals[iz];
      if (has_rgb) {
        rgb[v * 3 + 0] = vals[ir] / 255.0;
        rgb[v * 3 + 1] = vals[ig] / 255.0;
        rgb[v * 3 + 2] = vals[ib] / 255.0;
      }
    }
  } else {
    for (size_t v = 0; v < n_vertex; ++v) {
      for (size_t p = 0; p < props.size(); ++p)
        if (!(in >> vals[p]))
          throw std::runtime_error("read_ply: truncated vertex data in " + path);
      xyz[v * 3 + 0] = vals[ix];
      xyz[v * 3 + 1] = vals[iy];
      xyz[v * 3 + 2] = vals[iz];
      if (has_rgb) {
        rgb[v * 3 + 0] = vals[ir] / 255.0;
        rgb[v * 3 + 1] = vals[ig] / 255.0;
        rgb[v * 3 + 2] = vals[ib] / 255.0;
      }
    }
  }
}

void write_ply(const std::string& path, const std::vector<double>& xyz,
               const std::vector<double>& rgb) {
  if (xyz.size() % 3 != 0) throw std::invalid_argument("write_ply: xyz size must be 3*P");
  const size_t n = xyz.size() / 3;
  const bool has_rgb = !rgb.empty();
  if (has_rgb && rgb.size() != xyz.size())
    throw std::invalid_argument("write_ply: rgb size mismatch");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ply: cannot open " + path);
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << n << "\n"
      << "property float x\nproperty float y\nproperty float z\n";
  if (has_rgb) out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  out << "end_header\n";
  for (size_t v = 0; v < n; ++v) {
    for (int d = 0; d < 3; ++d) {
      float f = static_cast<float>(xyz[v * 3 + d]);
      out.write(reinterpret_cast<const char*>(&f), 4);
    }
    if (has_rgb) {
      for (int d = 0; d < 3; ++d) {
        double c = std::clamp(rgb[v * 3 + d], 0.0, 1.0);
        unsigned char b = static_cast<unsigned char>(std::lround(c * 255.0));
        out.write(reinterpret_cast<const char*>(&b), 1);
      }
    }
  }
  if (!out) throw std::runtime_error("write_ply: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Synthetic scenes

SyntheticSpec parse_synthetic_spec(const std::string& json_path) {
  json j = load_json_file(json_path, "parse_synthetic_spec");
  SyntheticSpec s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "n_static")
      s.n_static = v.get<int>();
    else if (k == "n_dynamic")
      s.n_dynamic = v.get<int>();
    else if (k == "n_frames")
      s.n_frames = v.get<int>();
    else if (k == "width")
      s.width = v.get<int>();
    else if (k == "height")
      s.height = v.get<int>();
    else if (k == "n_cameras")
      s.n_cameras = v.get<int>();
    else if (k == "seed")
      s.seed = v.get<uint64_t>();
    else if (k == "family") {
      const std::string f = v.get<std::string>();
      if (f == "sinusoid")
        s.family = TrajFamily::Sinusoid;
      else if (f == "low-rank-dct")
        s.family = TrajFamily::LowRankDct;
      else
        throw std::runtime_error("parse_synthetic_spec: unknown family '" + f + "'");
    } else if (k == "amp_lo")
      s.amp_lo = v.get<double>();
    else if (k == "amp_hi")
      s.amp_hi = v.get<double>();
    else if (k == "freq_lo")
      s.freq_lo = v.get<double>();
    else if (k == "freq_hi")
      s.freq_hi = v.get<double>();
    else if (k == "background") {
      if (!v.is_array() || v.size() != 3)
        throw std::runtime_error("parse_synthetic_spec: background must have 3 entries");
      for (int c = 0; c < 3; ++c) s.background[c] = v[c].get<double>();
    } else
      throw std::runtime_error("parse_synthetic_spec: unknown key '" + k + "'");
  }
  if (s.n_static < 0 || s.n_dynamic < 0 || s.n_static + s.n_dynamic == 0)
    throw std::runtime_error("parse_synthetic_spec: need at least one Gaussian");
  if (s.n_frames < 2) throw std::runtime_error("parse_synthetic_spec: n_frames must be >= 2");
  if (s.n_cameras < 1) throw std::runtime_error("parse_synthetic_spec: n_cameras must be >= 1");
  return s;
}

namespace {

constexpr int kDctModes = 10;  // dynamic motion lives in modes 1..9

void draw_common(SynthGaussian& g, Rng& rng, double pos_half, double scale_lo, double scale_hi) {
  for (int d = 0; d < 3; ++d) g.pos[d] = rng.uniform(-pos_half, pos_half);
  for (int d = 0; d < 3; ++d)
    g.log_scale[d] = std::log(rng.uniform(scale_lo, scale_hi));
  double nq = 0.0;
  for (int d = 0; d < 4; ++d) {
    g.quat[d] = rng.normal();
    nq += g.quat[d] * g.quat[d];
  }
  nq = std::sqrt(nq);
  for (int d = 0; d < 4; ++d) g.quat[d] /= nq;
  if (g.quat[0] < 0.0)
    for (int d = 0; d < 4; ++d) g.quat[d] = -g.quat[d];
  g.opacity = rng.uniform(0.70, 0.97);
  for (int d = 0; d < 3; ++d) g.color[d] = rng.uniform(0.10, 1.0);
}

}  // namespace

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec) {
  SyntheticScene scene;
  scene.family = spec.family;
  scene.n_frames = spec.n_frames;
  Rng rng(spec.seed);

  for (int i = 0; i < spec.n_static; ++i) {
    SynthGaussian g;
    draw_common(g, rng, 1.0, 0.06, 0.16);
    scene.statics.push_back(g);
  }

  Eigen::MatrixXd basis;
  if (spec.family == TrajFamily::LowRankDct)
    basis = dct_basis(spec.n_frames, kDctModes);

  for (int i = 0; i < spec.n_dynamic; ++i) {
    SynthGaussian g;
    draw_common(g, rng, 0.7, 0.06, 0.14);
    if (spec.family == TrajFamily::Sinusoid) {
      for (int d = 0; d < 3; ++d) {
        g.amp[d] = rng.uniform(spec.amp_lo, spec.amp_hi);
        g.freq[d] = rng.uniform(spec.freq_lo, spec.freq_hi);
        g.phase[d] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      }
    } else {
      // Random coefficients on DCT modes 1..9, rescaled so the per-axis peak
      // displacement over the frame range equals a drawn amplitude.
      g.dct_coef.assign(3 * kDctModes, 0.0);
      for (int d = 0; d < 3; ++d) {
        const double amp = rng.uniform(spec.amp_lo, spec.amp_hi);
        for (int j = 1; j < kDctModes; ++j)
          g.dct_coef[d * kDctModes + j] = rng.uniform(-1.0, 1.0);
        double peak = 0.0;
        for (int t = 0; t < spec.n_frames; ++t) {
          double v = 0.0;
          for (int j = 1; j < kDctModes; ++j)
            v += g.dct_coef[d * kDctModes + j] * basis(t, j);
          peak = std::max(peak, std::abs(v));
        }
        const double s = peak > 0.0 ? amp / peak : 0.0;
        for (int j = 1; j < kDctModes; ++j) g.dct_coef[d * kDctModes + j] *= s;
      }
    }
    scene.dynamics.push_back(std::move(g));
  }
  return scene;
}

std::array<double, 3> synthetic_position(const SynthGaussian& g, TrajFamily family,
                                         int n_frames, double t) {
  std::array<double, 3> out = g.pos;
  if (family == TrajFamily::Sinusoid) {
    for (int d = 0; d < 3; ++d)
      out[d] += g.amp[d] * std::sin(2.0 * std::numbers::pi * g.freq[d] * t / n_frames + g.phase[d]);
  } else if (!g.dct_coef.empty()) {
    // Continuous extension of the DCT columns; matches dct_basis at integer t.
    const double c = std::sqrt(2.0 / n_frames);
    for (int d = 0; d < 3; ++d)
      for (int j = 1; j < kDctModes; ++j)
        out[d] += g.dct_coef[d * kDctModes + j] * c *
                  std::cos(std::numbers::pi * (2.0 * t + 1.0) * j / (2.0 * n_frames));
  }
  return out;
}

namespace {

Camera orbit_camera(double angle, double radius, double cam_height, double f, int width,
                    int height, int time, bool test) {
  Camera cam;
  cam.fx = cam.fy = f;
  cam.cx = width / 2.0;
  cam.cy = height / 2.0;
  cam.width = width;
  cam.height = height;
  cam.time = time;
  const double C[3] = {radius * std::cos(angle), radius * std::sin(angle), cam_height};
  // CV convention: x right, y down, z forward; look at the origin, up = +z.
  double zc[3] = {-C[0], -C[1], -C[2]};
  double nz = std::sqrt(zc[0] * zc[0] + zc[1] * zc[1] + zc[2] * zc[2]);
  for (double& v : zc) v /= nz;
  const double up[3] = {0.0, 0.0, 1.0};
  double xc[3] = {zc[1] * up[2] - zc[2] * up[1], zc[2] * up[0] - zc[0] * up[2],
                  zc[0] * up[1] - zc[1] * up[0]};
  double nx = std::sqrt(xc[0] * xc[0] + xc[1] * xc[1] + xc[2] * xc[2]);
  for (double& v : xc) v /= nx;
  const double yc[3] = {zc[1] * xc[2] - zc[2] * xc[1], zc[2] * xc[0] - zc[0] * xc[2],
                        zc[0] * xc[1] - zc[1] * xc[0]};
  const double* rows[3] = {xc, yc, zc};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) cam.W[r * 4 + c] = rows[r][c];
    cam.W[r * 4 + 3] = -(rows[r][0] * C[0] + rows[r][1] * C[1] + rows[r][2] * C[2]);
  }
  cam.W[12] = cam.W[13] = cam.W[14] = 0.0;
  cam.W[15] = 1.0;
  (void)test;
  return cam;
}

json camera_to_json(const Camera& cam, bool test) {
  json e;
  e["K"] = {cam.fx, cam.fy, cam.cx, cam.cy};
  e["W"] = cam.W;
  e["width"] = cam.width;
  e["height"] = cam.height;
  e["time"] = cam.time;
  e["split"] = test ? "test" : "train";
  return e;
}

// Snapshot of the ground-truth scene at time t; dynamic_only selects the mask
// pass (vals = 1 for every dynamic Gaussian).
PlainSnapshot synth_snapshot(const SyntheticScene& scene, double t, bool dynamic_only) {
  PlainSnapshot snap;
  auto push = [&](const SynthGaussian& g, const std::array<double, 3>& pos, double p) {
    for (int d = 0; d < 3; ++d) snap.position.push_back(pos[d]);
    for (int d = 0; d < 4; ++d) snap.rotation.push_back(g.quat[d]);
    Eigen::Vector3d sc(std::exp(g.log_scale[0]), std::exp(g.log_scale[1]),
                       std::exp(g.log_scale[2]));
    Eigen::Vector4d q(g.quat[0], g.quat[1], g.quat[2], g.quat[3]);
    Eigen::Matrix3d cov = covariance(sc, q);
    snap.cov6.push_back(cov(0, 0));
    snap.cov6.push_back(cov(0, 1));
    snap.cov6.push_back(cov(0, 2));
    snap.cov6.push_back(cov(1, 1));
    snap.cov6.push_back(cov(1, 2));
    snap.cov6.push_back(cov(2, 2));
    snap.opacity.push_back(g.opacity);
    for (int d = 0; d < 3; ++d) snap.color.push_back(g.color[d]);
    snap.p.push_back(p);
    ++snap.count;
  };
  if (!dynamic_only)
    for (const SynthGaussian& g : scene.statics) push(g, g.pos, 0.0);
  for (const SynthGaussian& g : scene.dynamics)
    push(g, synthetic_position(g, scene.family, scene.n_frames, t), 1.0);
  return snap;
}

}  // namespace

void generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  SyntheticScene scene = make_synthetic_scene(spec);
  const fs::path root(out_dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");

  // Cameras: one train frame per timestamp on an orbit, plus test frames at
  // every third timestamp from offset poses.
  const double radius = 4.0;
  const double cam_height = 1.5;
  const double f = 0.78 * std::min(spec.width, spec.height);
  std::vector<std::pair<Camera, bool>> cams;
  for (int t = 0; t < spec.n_frames; ++t) {
    const double ang = 2.0 * std::numbers::pi * (t % spec.n_cameras) / spec.n_cameras;
    cams.emplace_back(orbit_camera(ang, radius, cam_height, f, spec.width, spec.height, t, false),
                      false);
  }
  for (int t = 0; t < spec.n_frames; t += 3) {
    const double ang = 2.0 * std::numbers::pi * ((t % spec.n_cameras) + 0.5) / spec.n_cameras;
    cams.emplace_back(orbit_camera(ang, radius, cam_height, f, spec.width, spec.height, t, true),
                      true);
  }

  json cam_list = json::array();
  for (auto& [cam, test] : cams) cam_list.push_back(camera_to_json(cam, test));
  {
    std::ofstream out((root / "cameras.json").string());
    out << cam_list.dump(1) << "\n";
  }
  {
    json meta;
    meta["background"] = spec.background;
    std::ofstream out((root / "meta.json").string());
    out << meta.dump(1) << "\n";
  }

  // Images and masks from the reference rasterizer.
  const std::vector<double> bg(spec.background.begin(), spec.background.end());
  const std::vector<double> bg0{0.0};
  for (size_t i = 0; i < cams.size(); ++i) {
    const Camera& cam = cams[i].first;
    PlainSnapshot snap = synth_snapshot(scene, cam.time, false);
    std::vector<double> px = render_plain(snap, cam, false, bg);
    ImageBuffer img;
    img.width = cam.width;
    img.height = cam.height;
    img.channels = 3;
    img.pixels = std::move(px);
    write_png((root / "images" / frame_png(static_cast<int>(i))).string(), img);

    ImageBuffer msk;
    msk.width = cam.width;
    msk.height = cam.height;
    msk.channels = 1;
    if (spec.n_dynamic > 0) {
      PlainSnapshot dyn = synth_snapshot(scene, cam.time, true);
      msk.pixels = render_plain(dyn, cam, true, bg0);
      for (double& v : msk.pixels) v = v >= 0.5 ? 1.0 : 0.0;
    } else {
      msk.pixels.assign(static_cast<size_t>(cam.width) * cam.height, 0.0);
    }
    write_png((root / "masks" / frame_png(static_cast<int>(i))).string(), msk);
  }

  // Initial points: ground-truth positions at t = 0, statics first. The same
  // order defines gaussian_id in the ground-truth CSV and labels.
  std::vector<double> xyz, rgb;
  std::vector<TrajRow> rows;
  std::vector<std::pair<int64_t, int>> labels;
  int64_t gid = 0;
  double max_r2 = 0.0;
  auto add_point = [&](const std::array<double, 3>& p, const std::array<double, 3>& c) {
    for (int d = 0; d < 3; ++d) xyz.push_back(p[d]);
    for (int d = 0; d < 3; ++d) rgb.push_back(c[d]);
    max_r2 = std::max(max_r2, p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  };
  for (const SynthGaussian& g : scene.statics) {
    add_point(g.pos, g.color);
    for (int t = 0; t < spec.n_frames; ++t)
      rows.push_back({gid, static_cast<double>(t), g.pos[0], g.pos[1], g.pos[2], 0.0});
    labels.emplace_back(gid, 0);
    ++gid;
  }
  for (const SynthGaussian& g : scene.dynamics) {
    add_point(synthetic_position(g, scene.family, scene.n_frames, 0.0), g.color);
    for (int t = 0; t < spec.n_frames; ++t) {
      auto p = synthetic_position(g, scene.family, scene.n_frames, t);
      rows.push_back({gid, static_cast<double>(t), p[0], p[1], p[2], 1.0});
    }
    labels.emplace_back(gid, 1);
    ++gid;
  }
  write_ply((root / "points.ply").string(), xyz, rgb);
  write_trajectory_csv((root / "gt_trajectories.csv").string(), rows);
  {
    std::ofstream out((root / "gt_labels.csv").string());
    out << "gaussian_id,label\n";
    for (auto& [id, lab] : labels) out << id << "," << lab << "\n";
  }

  // Amplitude invariant: motion stays within 0.3 x the extent of the initial
  // cloud (measured from the origin here since the cloud is centered).
  const double extent = std::sqrt(max_r2);
  for (const SynthGaussian& g : scene.dynamics)
    for (int t = 0; t < spec.n_frames; ++t) {
      auto p = synthetic_position(g, scene.family, scene.n_frames, t);
      double d2 = 0.0;
      for (int d = 0; d < 3; ++d) d2 += (p[d] - g.pos[d]) * (p[d] - g.pos[d]);
      if (std::sqrt(d2) > 0.3 * extent * std::sqrt(3.0) + 1e-9)
        throw std::runtime_error("generate_synthetic: amplitude exceeds 0.3 x scene extent");
    }
}

// ---------------------------------------------------------------------------
// Trajectory CSV

void write_trajectory_csv(const std::string& path, const std::vector<TrajRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_trajectory_csv: cannot open " + path);
  out << "gaussian_id,t,x,y,z,p\n";
  char buf[512];
  for (const TrajRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(r.id), r.t, r.x, r.y, r.z, r.p);
    out << buf;
  }
  if (!out) throw std::runtime_error("write_trajectory_csv: write failed for " + path);
}

std::vector<TrajRow> read_trajectory_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_trajectory_csv: cannot open " + path);
  std::vector<TrajRow> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("gaussian_id", 0) == 0) continue;
    }
    TrajRow r;
    char* end = nullptr;
    const char* s = line.c_str();
    r.id = std::strtoll(s, &end, 10);
    double* fields[5] = {&r.t, &r.x, &r.y, &r.z, &r.p};
    for (double* f : fields) {
      if (*end != ',') throw std::runtime_error("read_trajectory_csv: malformed row: " + line);
      s = end + 1;
      *f = std::strtod(s, &end);
    }
    rows.push_back(r);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Image metrics

ImageMetrics image_metrics(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw std::invalid_argument("image_metrics: dimension mismatch");
  if (a.pixels.size() != b.pixels.size() || a.pixels.empty())
    throw std::invalid_argument("image_metrics: empty or inconsistent buffers");

  ImageMetrics m;
  double mse = 0.0, l1 = 0.0;
  for (size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    mse += d * d;
    l1 += std::abs(d);
  }
  mse /= static_cast<double>(a.pixels.size());
  l1 /= static_cast<double>(a.pixels.size());
  m.l1 = l1;
  m.psnr = mse <= 0.0 ? 99.0 : std::min(99.0, 10.0 * std::log10(1.0 / mse));

  Tape tape;
  ValueRef ca = tape.constant(a.pixels, static_cast<int>(a.pixels.size()) / a.channels,
                              a.channels, "metrics_a");
  ValueRef cb = tape.constant(b.pixels, static_cast<int>(b.pixels.size()) / b.channels,
                              b.channels, "metrics_b");
  ValueRef s = ssim_on_tape(tape, ca, cb, a.width, a.height);
  m.ssim = tape.scalar(s);
  return m;
}

}  // namespace dgtraj
