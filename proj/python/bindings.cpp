// Python bindings for the core operations: basis/factorization utilities,
// covariance and classification helpers, the synthetic generator, and the
// train/eval/export/render pipeline. Heavy state stays on the C++ side; the
// module passes file paths and numpy arrays.

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <string>
#include <vector>

#include "dgtraj/dataset.hpp"
#include "dgtraj/gaussian_scene.hpp"
#include "dgtraj/gradcheck.hpp"
#include "dgtraj/motion_field.hpp"
#include "dgtraj/png_io.hpp"
#include "dgtraj/trainer.hpp"
#include "dgtraj/trajectory.hpp"

namespace py = pybind11;
using namespace dgtraj;

namespace {

py::array_t<double> image_to_array(const std::vector<double>& img, int height, int width,
                                   int channels) {
  py::array_t<double> out({height, width, channels});
  std::copy(img.begin(), img.end(), out.mutable_data());
  return out;
}

std::vector<double> array_to_image(const py::array_t<double>& a, int& height, int& width,
                                   int& channels) {
  const py::buffer_info info = a.request();
  if (info.ndim != 3) throw std::invalid_argument("expected an HxWxC array");
  height = static_cast<int>(info.shape[0]);
  width = static_cast<int>(info.shape[1]);
  channels = static_cast<int>(info.shape[2]);
  const auto arr = a.unchecked<3>();
  std::vector<double> img(static_cast<size_t>(height) * width * channels);
  size_t i = 0;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c) img[i++] = arr(y, x, c);
  return img;
}

py::dict eval_to_dict(const EvalResult& ev) {
  py::dict d;
  d["mean_psnr"] = ev.mean_psnr;
  d["mean_ssim"] = ev.mean_ssim;
  py::list rows;
  for (const EvalRow& r : ev.rows) {
    py::dict row;
    row["frame"] = r.frame;
    row["time"] = r.time;
    row["psnr"] = r.psnr;
    row["ssim"] = r.ssim;
    rows.append(row);
  }
  d["rows"] = rows;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dynamic Gaussian trajectory-field reconstruction";

  // --- trajectory basis and factorization.
  m.def("dct_basis", &dct_basis, py::arg("n_frames"), py::arg("n_bases"),
        "Orthonormal DCT-II basis, N x k.");
  m.def(
      "fit_coefficients",
      [](const Eigen::MatrixXd& samples, const Eigen::MatrixXd& basis) {
        return fit_coefficients(samples, basis);
      },
      py::arg("samples"), py::arg("basis"),
      "Least-squares coefficients (k x C) for per-column samples (N x C).");
  m.def(
      "reconstruct",
      [](const Eigen::MatrixXd& basis, const Eigen::MatrixXd& coeffs) {
        return reconstruct(basis, coeffs);
      },
      py::arg("basis"), py::arg("coeffs"), "basis * coeffs.");

  // --- small scene helpers.
  m.def(
      "encode",
      [](py::array_t<double> x, int L) {
        const py::buffer_info info = x.request();
        if (info.size != 3) throw std::invalid_argument("encode: expected 3 values");
        std::vector<double> out(encoding_width(L));
        encode(static_cast<const double*>(info.ptr), L, out.data());
        return py::array_t<double>(static_cast<py::ssize_t>(out.size()), out.data());
      },
      py::arg("x"), py::arg("L") = 12,
      "Frequency encoding of one 3D point, width 6L.");
  m.def(
      "covariance",
      [](const Eigen::Vector3d& scale, const Eigen::Vector4d& rot) {
        return covariance(scale, rot);
      },
      py::arg("scale"), py::arg("rotation"),
      "World covariance R diag(s^2) R^T from scale and unit quaternion (w,x,y,z).");
  m.def(
      "classify",
      [](double p, double threshold) { return classify(p, threshold) == MotionClass::Dynamic; },
      py::arg("p"), py::arg("threshold") = 0.8,
      "True when the motion probability crosses the dynamic threshold.");
  m.def(
      "image_metrics",
      [](const py::array_t<double>& a, const py::array_t<double>& b) {
        ImageBuffer ia, ib;
        ia.pixels = array_to_image(a, ia.height, ia.width, ia.channels);
        ib.pixels = array_to_image(b, ib.height, ib.width, ib.channels);
        if (ia.width != ib.width || ia.height != ib.height || ia.channels != ib.channels)
          throw std::invalid_argument("image_metrics: shape mismatch");
        const ImageMetrics im = image_metrics(ia, ib);
        py::dict d;
        d["psnr"] = im.psnr;
        d["ssim"] = im.ssim;
        return d;
      },
      py::arg("a"), py::arg("b"), "PSNR and SSIM between two HxWxC arrays in [0,1].");

  // --- synthetic data.
  m.def(
      "generate_synthetic",
      [](const std::string& out_dir, int n_static, int n_dynamic, int n_frames, int width,
         int height, int n_cameras, uint64_t seed, const std::string& family) {
        SyntheticSpec spec;
        spec.n_static = n_static;
        spec.n_dynamic = n_dynamic;
        spec.n_frames = n_frames;
        spec.width = width;
        spec.height = height;
        spec.n_cameras = n_cameras;
        spec.seed = seed;
        if (family == "sinusoid")
          spec.family = TrajFamily::Sinusoid;
        else if (family == "lowrank_dct")
          spec.family = TrajFamily::LowRankDct;
        else
          throw std::invalid_argument("family must be 'sinusoid' or 'lowrank_dct'");
        generate_synthetic(spec, out_dir);
      },
      py::arg("out_dir"), py::arg("n_static") = 50, py::arg("n_dynamic") = 20,
      py::arg("n_frames") = 30, py::arg("width") = 64, py::arg("height") = 64,
      py::arg("n_cameras") = 12, py::arg("seed") = 0, py::arg("family") = "sinusoid",
      "Write a synthetic orbit-camera dataset (images, masks, cameras, ground truth).");

  // --- training pipeline.
  m.def(
      "train",
      [](const std::string& data_dir, const std::string& checkpoint_out,
         const std::string& config_json, const std::string& metrics_path) {
        const Dataset ds = load_dataset(data_dir);
        TrainConfig cfg;
        if (!config_json.empty()) cfg = train_config_from_json_text(config_json);
        Trainer tr(ds, cfg);
        tr.run(metrics_path);
        if (!checkpoint_out.empty()) tr.save(checkpoint_out);
        py::dict d;
        d["iters"] = tr.state().iter;
        d["n_gaussians"] = tr.state().set.size();
        return d;
      },
      py::arg("data_dir"), py::arg("checkpoint_out"), py::arg("config_json") = "",
      py::arg("metrics_path") = "",
      "Train on a dataset directory; returns {iters, n_gaussians}.");
  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& data_dir) {
        const ModelState ms = load_checkpoint(checkpoint);
        const Dataset ds = load_dataset(data_dir);
        return eval_to_dict(evaluate(ms, ds));
      },
      py::arg("checkpoint"), py::arg("data_dir"),
      "Held-out PSNR/SSIM for a checkpoint on the dataset's test split.");
  m.def(
      "render",
      [](const std::string& checkpoint, const std::string& data_dir, int frame_index) {
        const ModelState ms = load_checkpoint(checkpoint);
        const Dataset ds = load_dataset(data_dir);
        if (frame_index < 0 || frame_index >= static_cast<int>(ds.frames.size()))
          throw std::out_of_range("frame index out of range");
        const Frame& fr = ds.frames[frame_index];
        const std::vector<double> img = render_model(ms, fr.cam, fr.time);
        return image_to_array(img, fr.cam.height, fr.cam.width, 3);
      },
      py::arg("checkpoint"), py::arg("data_dir"), py::arg("frame_index"),
      "Render the model at one dataset frame's camera and time, HxWx3 in [0,1].");
  m.def(
      "export_trajectories",
      [](const std::string& checkpoint, const std::vector<double>& times, bool dynamic_only) {
        const ModelState ms = load_checkpoint(checkpoint);
        const std::vector<TrajRow> rows = export_trajectories(ms, times, dynamic_only);
        py::array_t<double> out({static_cast<py::ssize_t>(rows.size()), py::ssize_t(6)});
        auto a = out.mutable_unchecked<2>();
        for (size_t i = 0; i < rows.size(); ++i) {
          a(i, 0) = static_cast<double>(rows[i].id);
          a(i, 1) = rows[i].t;
          a(i, 2) = rows[i].x;
          a(i, 3) = rows[i].y;
          a(i, 4) = rows[i].z;
          a(i, 5) = rows[i].p;
        }
        return out;
      },
      py::arg("checkpoint"), py::arg("times"), py::arg("dynamic_only") = true,
      "Trajectory rows (id, t, x, y, z, p) for the checkpointed model.");

  // --- gradient suite.
  m.def(
      "gradcheck",
      [](const std::string& module, double tol) {
        py::list out;
        for (const GradCheckResult& r : run_gradcheck(module, tol)) {
          py::dict d;
          d["module"] = r.module;
          d["name"] = r.name;
          d["max_rel_err"] = r.max_rel_err;
          d["ok"] = r.ok;
          out.append(d);
        }
        return out;
      },
      py::arg("module") = "", py::arg("tol") = 1e-3,
      "Finite-difference gradient checks; empty module runs every suite.");
}
