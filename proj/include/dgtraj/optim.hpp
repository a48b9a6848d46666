#pragma once

#include <functional>
#include <string>
#include <vector>

namespace dgtraj {

// Step decay evaluated in closed form: lr(iter) = base * factor^floor(iter/decay_every).
// With decay_every = 1 and factor = target_ratio^(1/total_iters) this walks a
// geometric path from base to base*target_ratio over a run.
struct LrSchedule {
  double base = 1e-3;
  double factor = 0.5;
  int decay_every = 15000;

  double at(int iter) const;
};

// One named parameter tensor plus its Adam state. `values` is owned here;
// graphs take leaves that view it.
struct ParamGroup {
  std::string name;
  std::vector<double> values;
  LrSchedule sched;
  std::vector<double> m;
  std::vector<double> v;
  int64_t step = 0;

  explicit ParamGroup(std::string n = {}) : name(std::move(n)) {}
  void resize_state() {
    m.assign(values.size(), 0.0);
    v.assign(values.size(), 0.0);
  }
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update with bias correction. `grad` must match the group size and
// be finite; violations throw naming the group.
void adam_step(ParamGroup& g, const std::vector<double>& grad, int iter,
               const AdamConfig& cfg = {});

// Central finite differences of f around x.
std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, double h = 1e-5);

struct GradReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int worst_index = -1;
  bool ok(double tol) const { return max_rel_err < tol; }
};

// Elementwise rel err |a-f| / max(|a|,|f|,1e-8), reduced to the worst entry.
GradReport compare_gradients(const std::vector<double>& analytic,
                             const std::vector<double>& fd);

}  // namespace dgtraj
