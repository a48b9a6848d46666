#pragma once

#include <string>
#include <vector>

namespace dgtraj {

struct GradCheckResult {
  std::string module;
  std::string name;
  double max_rel_err = 0.0;
  bool ok = false;
};

// Finite-difference gradient suites over small instances of every module.
// module_filter selects one module ("trajectory", "motion_field",
// "rasterizer", "losses", "full"); empty runs all. Large parameter vectors
// are probed at a deterministic subsample of coordinates.
std::vector<GradCheckResult> run_gradcheck(const std::string& module_filter,
                                           double tol = 1e-3);

}  // namespace dgtraj
