#include "dgtraj/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dgtraj {

double LrSchedule::at(int iter) const {
  if (iter < 0) throw std::invalid_argument("LrSchedule: negative iter");
  const int k = decay_every > 0 ? iter / decay_every : 0;
  return base * std::pow(factor, static_cast<double>(k));
}

void adam_step(ParamGroup& g, const std::vector<double>& grad, int iter,
               const AdamConfig& cfg) {
  if (grad.size() != g.values.size())
    throw std::runtime_error("adam_step: gradient size mismatch for group '" + g.name + "'");
  if (g.m.size() != g.values.size() || g.v.size() != g.values.size())
    throw std::runtime_error("adam_step: optimizer state not sized for group '" + g.name + "'");
  for (double gv : grad)
    if (!std::isfinite(gv))
      throw std::runtime_error("adam_step: non-finite gradient in group '" + g.name + "'");

  const double lr = g.sched.at(iter);
  g.step += 1;
  const double t = static_cast<double>(g.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (size_t i = 0; i < g.values.size(); ++i) {
    g.m[i] = cfg.beta1 * g.m[i] + (1.0 - cfg.beta1) * grad[i];
    g.v[i] = cfg.beta2 * g.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = g.m[i] / bc1;
    const double vhat = g.v[i] / bc2;
    g.values[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, double h) {
  std::vector<double> grad(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    x[i] = xi + h;
    const double fp = f(x);
    x[i] = xi - h;
    const double fm = f(x);
    x[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("fd_gradient: non-finite loss during probe");
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

GradReport compare_gradients(const std::vector<double>& analytic,
                             const std::vector<double>& fd) {
  if (analytic.size() != fd.size())
    throw std::runtime_error("compare_gradients: size mismatch");
  GradReport r;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], f = fd[i];
    const double abs_err = std::abs(a - f);
    const double rel = abs_err / std::max({std::abs(a), std::abs(f), 1e-8});
    if (rel > r.max_rel_err) {
      r.max_rel_err = rel;
      r.worst_index = static_cast<int>(i);
    }
    r.max_abs_err = std::max(r.max_abs_err, abs_err);
  }
  return r;
}

}  // namespace dgtraj
