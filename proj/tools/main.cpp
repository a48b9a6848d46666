#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI/CLI.hpp>
#include <nlohmann/json.hpp>

#include "dgtraj/dataset.hpp"
#include "dgtraj/gradcheck.hpp"
#include "dgtraj/png_io.hpp"
#include "dgtraj/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dgtraj;

namespace {

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path, bool seed_set, uint64_t seed) {
  Dataset ds = load_dataset(data_dir);
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : parse_train_config(config_path);
  if (seed_set) cfg.seed = seed;
  fs::create_directories(out_dir);
  Trainer trainer(ds, cfg);
  trainer.run((fs::path(out_dir) / "metrics.ndjson").string());
  const std::string ckpt = (fs::path(out_dir) / "checkpoint.dgtj").string();
  trainer.save(ckpt);
  std::cout << "trained " << cfg.total_iters << " iterations, " << trainer.state().set.size()
            << " Gaussians\ncheckpoint: " << ckpt << "\n";
  return 0;
}

int cmd_render(const std::string& ckpt, const std::string& camera_path, double time,
               const std::string& out_png) {
  ModelState ms = load_checkpoint(ckpt);
  Camera cam = parse_camera_file(camera_path);
  std::vector<double> px = render_model(ms, cam, time);
  ImageBuffer img;
  img.width = cam.width;
  img.height = cam.height;
  img.channels = 3;
  img.pixels = std::move(px);
  write_png(out_png, img);
  std::cout << "rendered t=" << time << " to " << out_png << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& out_json) {
  if (split != "test")
    throw std::invalid_argument("eval: only the test split is supported, got '" + split + "'");
  ModelState ms = load_checkpoint(ckpt);
  Dataset ds = load_dataset(data_dir);
  EvalResult res = evaluate(ms, ds);
  json j;
  j["mean_psnr"] = res.mean_psnr;
  j["mean_ssim"] = res.mean_ssim;
  json frames = json::array();
  for (const EvalRow& r : res.rows)
    frames.push_back({{"frame", r.frame}, {"time", r.time}, {"psnr", r.psnr}, {"ssim", r.ssim}});
  j["frames"] = frames;
  if (!out_json.empty()) {
    std::ofstream out(out_json);
    if (!out) throw std::runtime_error("eval: cannot open " + out_json);
    out << j.dump(1) << "\n";
  }
  std::cout << "mean PSNR " << res.mean_psnr << " dB, mean SSIM " << res.mean_ssim << " over "
            << res.rows.size() << " frames\n";
  return 0;
}

std::vector<double> parse_times(const std::string& times_arg, int n_frames) {
  std::vector<double> times;
  if (times_arg == "all") {
    for (int t = 0; t < n_frames; ++t) times.push_back(t);
    return times;
  }
  std::stringstream ss(times_arg);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    size_t used = 0;
    double v = std::stod(tok, &used);
    if (used != tok.size())
      throw std::invalid_argument("export-traj: bad time value '" + tok + "'");
    times.push_back(v);
  }
  if (times.empty()) throw std::invalid_argument("export-traj: no times given");
  return times;
}

int cmd_export(const std::string& ckpt, const std::string& times_arg, const std::string& subset,
               const std::string& out_csv) {
  if (subset != "dynamic" && subset != "all")
    throw std::invalid_argument("export-traj: subset must be 'dynamic' or 'all'");
  ModelState ms = load_checkpoint(ckpt);
  std::vector<double> times = parse_times(times_arg, ms.n_frames);
  std::vector<TrajRow> rows = export_trajectories(ms, times, subset == "dynamic");
  write_trajectory_csv(out_csv, rows);
  std::cout << "exported " << rows.size() << " rows to " << out_csv << "\n";
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir) {
  SyntheticSpec spec = spec_path.empty() ? SyntheticSpec{} : parse_synthetic_spec(spec_path);
  generate_synthetic(spec, out_dir);
  std::cout << "synthetic dataset written to " << out_dir << "\n";
  return 0;
}

int cmd_gradcheck(const std::string& module) {
  std::vector<GradCheckResult> results = run_gradcheck(module);
  double worst = 0.0;
  bool all_ok = true;
  for (const GradCheckResult& r : results) {
    std::printf("%-12s %-24s rel_err %.3e  %s\n", r.module.c_str(), r.name.c_str(),
                r.max_rel_err, r.ok ? "ok" : "FAIL");
    worst = std::max(worst, r.max_rel_err);
    all_ok = all_ok && r.ok;
  }
  std::printf("max relative error %.3e\n", worst);
  return all_ok ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic Gaussian trajectory-field reconstruction"};
  app.require_subcommand(1);

  std::string data_dir, out_dir, config_path, ckpt, camera_path, out_png, split = "test";
  std::string times_arg = "all", subset = "dynamic", out_csv, spec_path, out_json, module;
  double time = 0.0;
  uint64_t seed = 0;
  bool seed_set = false;

  CLI::App* train = app.add_subcommand("train", "Train on a dataset directory");
  train->add_option("--data", data_dir, "dataset directory")->required();
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--seed", seed, "RNG seed override")->each([&](const std::string&) {
    seed_set = true;
  });

  CLI::App* render = app.add_subcommand("render", "Render one view from a checkpoint");
  render->add_option("--ckpt", ckpt, "checkpoint file")->required();
  render->add_option("--camera", camera_path, "camera JSON file")->required();
  render->add_option("--time", time, "timestamp (fractional allowed)")->required();
  render->add_option("--out", out_png, "output PNG")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on held-out frames");
  eval_cmd->add_option("--ckpt", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
  eval_cmd->add_option("--split", split, "split to evaluate (test)");
  eval_cmd->add_option("--out", out_json, "output JSON report");

  CLI::App* exp = app.add_subcommand("export-traj", "Export Gaussian trajectories as CSV");
  exp->add_option("--ckpt", ckpt, "checkpoint file")->required();
  exp->add_option("--times", times_arg, "comma-separated times or 'all'");
  exp->add_option("--subset", subset, "dynamic|all");
  exp->add_option("--out", out_csv, "output CSV")->required();

  CLI::App* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--spec", spec_path, "synthetic spec JSON");
  synth->add_option("--out", out_dir, "output directory")->required();

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  gc->add_option("--module", module, "trajectory|motion_field|rasterizer|losses|full");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << "\n";
    return 1;
  }

  try {
    if (train->parsed()) return cmd_train(data_dir, out_dir, config_path, seed_set, seed);
    if (render->parsed()) return cmd_render(ckpt, camera_path, time, out_png);
    if (eval_cmd->parsed()) return cmd_eval(ckpt, data_dir, split, out_json);
    if (exp->parsed()) return cmd_export(ckpt, times_arg, subset, out_csv);
    if (synth->parsed()) return cmd_synth(spec_path, out_dir);
    if (gc->parsed()) return cmd_gradcheck(module);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
