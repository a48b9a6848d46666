#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dgtraj/dataset.hpp"
#include "dgtraj/losses.hpp"
#include "dgtraj/rng.hpp"

using namespace dgtraj;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("dgtraj_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SyntheticSpec tiny_spec() {
  SyntheticSpec spec;
  spec.n_static = 12;
  spec.n_dynamic = 5;
  spec.n_frames = 8;
  spec.width = 48;
  spec.height = 48;
  spec.n_cameras = 4;
  spec.seed = 11;
  return spec;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

// Joint 11x11 Gaussian-window SSIM, written independently of the graph
// version: per-pixel window renormalization over in-bounds taps.
double naive_ssim(const ImageBuffer& A, const ImageBuffer& B) {
  const int W = A.width, H = A.height, C = A.channels;
  double g[11];
  for (int i = -5; i <= 5; ++i) g[i + 5] = std::exp(-0.5 * i * i / (1.5 * 1.5));
  double acc = 0.0;
  for (int c = 0; c < C; ++c) {
    double sum = 0.0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double wsum = 0, ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            const int xx = x + dx, yy = y + dy;
            if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;
            const double w = g[dx + 5] * g[dy + 5];
            const double a = A.at(xx, yy, c), b = B.at(xx, yy, c);
            wsum += w;
            ma += w * a;
            mb += w * b;
            maa += w * a * a;
            mbb += w * b * b;
            mab += w * a * b;
          }
        ma /= wsum;
        mb /= wsum;
        maa /= wsum;
        mbb /= wsum;
        mab /= wsum;
        const double sa = maa - ma * ma, sb = mbb - mb * mb, sab = mab - ma * mb;
        sum += ((2 * ma * mb + kSsimC1) * (2 * sab + kSsimC2)) /
               ((ma * ma + mb * mb + kSsimC1) * (sa + sb + kSsimC2));
      }
    acc += sum / (static_cast<double>(W) * H);
  }
  return acc / C;
}

ImageBuffer random_buffer(int W, int H, int C, Rng& rng) {
  ImageBuffer b;
  b.width = W;
  b.height = H;
  b.channels = C;
  b.pixels.resize(static_cast<size_t>(W) * H * C);
  for (double& v : b.pixels) v = rng.uniform(0.0, 1.0);
  return b;
}

}  // namespace

TEST_CASE("generated datasets load back with the expected shape") {
  SyntheticSpec spec = tiny_spec();
  fs::path dir = fresh_dir("roundtrip");
  generate_synthetic(spec, dir.string());
  Dataset ds = load_dataset(dir.string());
  CHECK(ds.masked);
  CHECK(ds.n_frames == spec.n_frames);
  CHECK(ds.train_indices().size() == static_cast<size_t>(spec.n_frames));
  CHECK(ds.test_indices().size() == 3);  // every third timestamp of 8
  CHECK(ds.background == std::array<double, 3>{0.0, 0.0, 0.0});
  CHECK(ds.init_xyz.size() == static_cast<size_t>(spec.n_static + spec.n_dynamic) * 3);
  CHECK(ds.init_rgb.size() == ds.init_xyz.size());
  for (const Frame& f : ds.frames) {
    f.cam.validate();
    ImageBuffer img = read_png(f.image_path);
    CHECK(img.width == f.cam.width);
    CHECK(img.height == f.cam.height);
    CHECK(img.channels == 3);
    if (!f.test) {
      REQUIRE(!f.mask_path.empty());
      ImageBuffer msk = read_png(f.mask_path);
      CHECK(msk.channels == 1);
      for (double v : msk.pixels) CHECK((v == 0.0 || v == 1.0));
    }
  }
}

TEST_CASE("generation is deterministic under a fixed seed") {
  SyntheticSpec spec = tiny_spec();
  SyntheticScene a = make_synthetic_scene(spec);
  SyntheticScene b = make_synthetic_scene(spec);
  REQUIRE(a.dynamics.size() == b.dynamics.size());
  for (size_t i = 0; i < a.dynamics.size(); ++i) {
    CHECK(a.dynamics[i].pos == b.dynamics[i].pos);
    CHECK(a.dynamics[i].amp == b.dynamics[i].amp);
    CHECK(a.dynamics[i].freq == b.dynamics[i].freq);
    CHECK(a.dynamics[i].phase == b.dynamics[i].phase);
  }
  fs::path d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
  generate_synthetic(spec, d1.string());
  generate_synthetic(spec, d2.string());
  CHECK(slurp(d1 / "gt_trajectories.csv") == slurp(d2 / "gt_trajectories.csv"));
  CHECK(slurp(d1 / "gt_labels.csv") == slurp(d2 / "gt_labels.csv"));
  CHECK(slurp(d1 / "images" / "00000.png") == slurp(d2 / "images" / "00000.png"));
  CHECK(slurp(d1 / "images" / "00007.png") == slurp(d2 / "images" / "00007.png"));
  CHECK(slurp(d1 / "points.ply") == slurp(d2 / "points.ply"));
}

TEST_CASE("ground-truth trajectories follow the closed-form motion") {
  SyntheticSpec spec = tiny_spec();
  fs::path dir = fresh_dir("gt");
  generate_synthetic(spec, dir.string());
  SyntheticScene scene = make_synthetic_scene(spec);
  std::vector<TrajRow> rows = read_trajectory_csv((dir / "gt_trajectories.csv").string());
  REQUIRE(rows.size() ==
          static_cast<size_t>(spec.n_static + spec.n_dynamic) * spec.n_frames);
  for (const TrajRow& r : rows) {
    const bool dyn = r.id >= spec.n_static;
    CHECK(r.p == (dyn ? 1.0 : 0.0));
    const SynthGaussian& g =
        dyn ? scene.dynamics[r.id - spec.n_static] : scene.statics[r.id];
    auto p = synthetic_position(g, scene.family, scene.n_frames, r.t);
    CHECK(std::abs(r.x - p[0]) < 1e-10);
    CHECK(std::abs(r.y - p[1]) < 1e-10);
    CHECK(std::abs(r.z - p[2]) < 1e-10);
  }
  // Labels match the id layout: statics first.
  std::ifstream labels(dir / "gt_labels.csv");
  std::string line;
  std::getline(labels, line);
  CHECK(line == "gaussian_id,label");
  int n_static = 0, n_dynamic = 0;
  while (std::getline(labels, line)) {
    const auto comma = line.find(',');
    REQUIRE(comma != std::string::npos);
    const int id = std::stoi(line.substr(0, comma));
    const int lab = std::stoi(line.substr(comma + 1));
    if (lab == 0) {
      CHECK(id < spec.n_static);
      ++n_static;
    } else {
      CHECK(id >= spec.n_static);
      ++n_dynamic;
    }
  }
  CHECK(n_static == spec.n_static);
  CHECK(n_dynamic == spec.n_dynamic);
}

TEST_CASE("a scene without dynamics yields still images and empty masks") {
  SyntheticSpec spec = tiny_spec();
  spec.n_dynamic = 0;
  fs::path dir = fresh_dir("static_only");
  generate_synthetic(spec, dir.string());
  // Train frames t and t + n_cameras share the orbit pose; without motion the
  // renders must be byte-identical.
  CHECK(slurp(dir / "images" / "00000.png") == slurp(dir / "images" / "00004.png"));
  CHECK(slurp(dir / "images" / "00001.png") == slurp(dir / "images" / "00005.png"));
  ImageBuffer msk = read_png((dir / "masks" / "00000.png").string());
  for (double v : msk.pixels) CHECK(v == 0.0);
}

TEST_CASE("binary PLY survives a write/read round-trip at float precision") {
  fs::path dir = fresh_dir("ply");
  std::vector<double> xyz = {0.5, -1.25, 3.0, 1e-3, 2.5, -0.75};
  std::vector<double> rgb = {1.0, 0.0, 0.5, 0.25, 0.75, 0.1};
  write_ply((dir / "p.ply").string(), xyz, rgb);
  std::vector<double> x2, c2;
  read_ply((dir / "p.ply").string(), x2, c2);
  REQUIRE(x2.size() == xyz.size());
  REQUIRE(c2.size() == rgb.size());
  for (size_t i = 0; i < xyz.size(); ++i)
    CHECK(x2[i] == doctest::Approx(xyz[i]).epsilon(1e-6));
  for (size_t i = 0; i < rgb.size(); ++i) CHECK(std::abs(c2[i] - rgb[i]) <= 0.5 / 255.0);
}

TEST_CASE("ASCII PLY parses vertices and colors") {
  fs::path dir = fresh_dir("ply_ascii");
  spit(dir / "a.ply",
       "ply\nformat ascii 1.0\nelement vertex 2\n"
       "property float x\nproperty float y\nproperty float z\n"
       "property uchar red\nproperty uchar green\nproperty uchar blue\n"
       "end_header\n"
       "0.5 -1.25 3.0 255 0 128\n"
       "1.5 2.0 -0.5 0 51 255\n");
  std::vector<double> xyz, rgb;
  read_ply((dir / "a.ply").string(), xyz, rgb);
  REQUIRE(xyz.size() == 6);
  CHECK(xyz[0] == 0.5);
  CHECK(xyz[1] == -1.25);
  CHECK(xyz[5] == -0.5);
  REQUIRE(rgb.size() == 6);
  CHECK(rgb[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(rgb[4] == doctest::Approx(51.0 / 255.0).epsilon(1e-12));
}

TEST_CASE("trajectory CSV round-trips doubles exactly") {
  fs::path dir = fresh_dir("csv");
  std::vector<TrajRow> rows = {{0, 0.0, 0.1234567890123456, -2.5e-17, 3.0, 0.0},
                               {7, 2.0, -1.0 / 3.0, 0.70000000000000007, -4.25, 1.0}};
  write_trajectory_csv((dir / "t.csv").string(), rows);
  std::vector<TrajRow> back = read_trajectory_csv((dir / "t.csv").string());
  REQUIRE(back.size() == rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(back[i].id == rows[i].id);
    CHECK(back[i].t == rows[i].t);
    CHECK(back[i].x == rows[i].x);
    CHECK(back[i].y == rows[i].y);
    CHECK(back[i].z == rows[i].z);
    CHECK(back[i].p == rows[i].p);
  }
}

TEST_CASE("PSNR hits its closed-form anchors") {
  ImageBuffer black, half, white;
  for (ImageBuffer* b : {&black, &half, &white}) {
    b->width = 8;
    b->height = 8;
    b->channels = 3;
    b->pixels.assign(8 * 8 * 3, 0.0);
  }
  for (double& v : half.pixels) v = 0.5;
  for (double& v : white.pixels) v = 1.0;
  CHECK(image_metrics(black, half).psnr ==
        doctest::Approx(10.0 * std::log10(1.0 / 0.25)).epsilon(1e-12));
  CHECK(image_metrics(black, black).psnr == 99.0);
  CHECK(image_metrics(black, white).psnr == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(image_metrics(black, half).l1 == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("graph SSIM agrees with an independent dense implementation") {
  Rng rng(71);
  for (int trial = 0; trial < 3; ++trial) {
    ImageBuffer a = random_buffer(20, 16, 3, rng);
    ImageBuffer b = random_buffer(20, 16, 3, rng);
    const double got = image_metrics(a, b).ssim;
    const double want = naive_ssim(a, b);
    CHECK(got == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("load_dataset rejects broken directories with specific errors") {
  SyntheticSpec spec = tiny_spec();

  {  // missing training mask
    fs::path dir = fresh_dir("err_mask");
    generate_synthetic(spec, dir.string());
    fs::remove(dir / "masks" / "00001.png");
    CHECK_THROWS_WITH_AS(load_dataset(dir.string()),
                         doctest::Contains("missing"), std::runtime_error);
  }
  {  // non-contiguous timestamps
    fs::path dir = fresh_dir("err_time");
    generate_synthetic(spec, dir.string());
    std::string cams = slurp(dir / "cameras.json");
    const std::string needle = "\"time\": 7";
    const auto at = cams.find(needle);
    REQUIRE(at != std::string::npos);
    cams.replace(at, needle.size(), "\"time\": 99");
    spit(dir / "cameras.json", cams);
    CHECK_THROWS_WITH_AS(load_dataset(dir.string()),
                         doctest::Contains("non-contiguous"), std::runtime_error);
  }
  {  // unknown meta key
    fs::path dir = fresh_dir("err_meta");
    generate_synthetic(spec, dir.string());
    spit(dir / "meta.json", "{\"background\": [0,0,0], \"volume\": 2}\n");
    CHECK_THROWS_WITH_AS(load_dataset(dir.string()),
                         doctest::Contains("unknown key"), std::runtime_error);
  }
  {  // missing cameras.json
    fs::path dir = fresh_dir("err_cam");
    fs::create_directories(dir / "images");
    CHECK_THROWS_AS(load_dataset(dir.string()), std::runtime_error);
  }
}
