#include "dgtraj/motion_field.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace dgtraj {

void encode(const double* x, int L, double* out) {
  int o = 0;
  for (int d = 0; d < 3; ++d) {
    if (!std::isfinite(x[d])) throw std::invalid_argument("encode: non-finite input");
    for (int f = 0; f < L; ++f) {
      const double a = std::ldexp(1.0, f) * std::numbers::pi * x[d];
      out[o++] = std::sin(a);
      out[o++] = std::cos(a);
    }
  }
}

namespace {

struct Layout {
  // Offsets into the flat parameter vector; each weight is row-major
  // (out x in), followed by its bias.
  int w1, b1, w2, b2, w3, b3, ws, bs, wb, bb, wg, bg, total;
};

Layout layout_of(const CoefficientNet& n) {
  const int in = n.input_width(), h = n.hidden;
  const int so = 3 * n.k, bo = 3 * n.l, go = 4 * n.m;
  Layout L{};
  int o = 0;
  L.w1 = o; o += h * in;
  L.b1 = o; o += h;
  L.w2 = o; o += h * h;
  L.b2 = o; o += h;
  L.w3 = o; o += h * h;
  L.b3 = o; o += h;
  L.ws = o; o += so * h;
  L.bs = o; o += so;
  L.wb = o; o += bo * h;
  L.bb = o; o += bo;
  L.wg = o; o += go * h;
  L.bg = o; o += go;
  L.total = o;
  return L;
}

}  // namespace

int CoefficientNet::n_params() const { return layout_of(*this).total; }

std::vector<double> CoefficientNet::init_params(Rng& rng) const {
  const Layout lay = layout_of(*this);
  std::vector<double> p(lay.total, 0.0);
  const int in = input_width(), h = hidden;
  auto kaiming = [&](int off, int rows, int cols) {
    const double bound = std::sqrt(6.0 / static_cast<double>(cols));
    for (int i = 0; i < rows * cols; ++i) p[off + i] = rng.uniform(-bound, bound);
  };
  kaiming(lay.w1, h, in);
  kaiming(lay.w2, h, h);
  kaiming(lay.w3, h, h);
  // Heads stay zero: deformation starts as the identity.
  return p;
}

CoefficientNet::Heads CoefficientNet::forward(Tape& tape, ValueRef params,
                                              ValueRef enc) const {
  const Layout lay = layout_of(*this);
  if (tape.rows(params) * tape.cols(params) != lay.total)
    throw std::invalid_argument("CoefficientNet: parameter vector size mismatch");
  if (tape.cols(enc) != input_width())
    throw std::invalid_argument("CoefficientNet: encoding width mismatch");
  const int in = input_width(), h = hidden;
  ValueRef flat = tape.reshape(params, 1, lay.total);
  auto slice = [&](int off, int rows, int cols) {
    return tape.reshape(tape.slice_cols(flat, off, off + rows * cols), rows, cols);
  };
  auto linear = [&](ValueRef x, int woff, int boff, int rows, int cols) {
    return tape.affine(x, slice(woff, rows, cols), slice(boff, 1, rows));
  };
  ValueRef h1 = tape.relu(linear(enc, lay.w1, lay.b1, h, in));
  ValueRef h2 = tape.relu(linear(h1, lay.w2, lay.b2, h, h));
  ValueRef h3 = tape.relu(linear(h2, lay.w3, lay.b3, h, h));
  Heads out;
  out.sigma = linear(h3, lay.ws, lay.bs, 3 * k, h);
  out.beta = linear(h3, lay.wb, lay.bb, 3 * l, h);
  out.gamma = linear(h3, lay.wg, lay.bg, 4 * m, h);
  return out;
}

void CoefficientNet::forward_plain(const std::vector<double>& params, const double* enc,
                                   int batch, std::vector<double>& sigma,
                                   std::vector<double>& beta,
                                   std::vector<double>& gamma) const {
  const Layout lay = layout_of(*this);
  if (static_cast<int>(params.size()) != lay.total)
    throw std::invalid_argument("CoefficientNet: parameter vector size mismatch");
  using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const MatRM>;
  const int in = input_width(), h = hidden;
  MapC X(enc, batch, in);
  auto lin = [&](const Eigen::Ref<const MatRM>& x, int woff, int boff, int rows) {
    MapC W(params.data() + woff, rows, static_cast<int>(x.cols()));
    MatRM y = x * W.transpose();
    for (int r = 0; r < y.rows(); ++r)
      for (int c = 0; c < rows; ++c) y(r, c) += params[boff + c];
    return y;
  };
  MatRM h1 = lin(X, lay.w1, lay.b1, h).cwiseMax(0.0);
  MatRM h2 = lin(h1, lay.w2, lay.b2, h).cwiseMax(0.0);
  MatRM h3 = lin(h2, lay.w3, lay.b3, h).cwiseMax(0.0);
  MatRM s = lin(h3, lay.ws, lay.bs, 3 * k);
  MatRM b = lin(h3, lay.wb, lay.bb, 3 * l);
  MatRM g = lin(h3, lay.wg, lay.bg, 4 * m);
  sigma.assign(s.data(), s.data() + s.size());
  beta.assign(b.data(), b.data() + b.size());
  gamma.assign(g.data(), g.data() + g.size());
}

ValueRef basis_row_at(Tape& tape, ValueRef basis_leaf, int n_frames, double t) {
  if (!(t >= 0.0 && t <= static_cast<double>(n_frames - 1)))
    throw std::out_of_range("basis_row_at: t outside [0, N-1]");
  const int t0 = std::min(static_cast<int>(std::floor(t)), n_frames - 1);
  const double f = t - static_cast<double>(t0);
  ValueRef row0 = tape.gather_rows(basis_leaf, {t0});
  if (f == 0.0) return row0;
  ValueRef row1 = tape.gather_rows(basis_leaf, {t0 + 1});
  return tape.add(tape.scale(row0, 1.0 - f), tape.scale(row1, f));
}

DeformedRefs deform(Tape& tape, ValueRef x, ValueRef s, ValueRef r,
                    const CoefficientNet::Heads& heads, ValueRef theta_t,
                    ValueRef lambda_t, ValueRef eta_t) {
  DeformedRefs out;
  out.position = tape.add(x, tape.basis_combine(heads.sigma, theta_t, 3));
  out.log_scale = tape.add(s, tape.basis_combine(heads.beta, lambda_t, 3));
  out.rotation = tape.rows_normalize(tape.add(r, tape.basis_combine(heads.gamma, eta_t, 4)));
  return out;
}

DeformedState deform_plain(const double* x, const double* s, const double* r,
                           const double* sigma, const double* beta, const double* gamma,
                           const MotionBasis& basis, double t, int k, int l, int m) {
  const Eigen::VectorXd th = evaluate(basis.theta, t);
  const Eigen::VectorXd la = evaluate(basis.lambda, t);
  const Eigen::VectorXd et = evaluate(basis.eta, t);
  DeformedState out{};
  for (int d = 0; d < 3; ++d) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += sigma[j * 3 + d] * th[j];
    out.position[d] = x[d] + acc;
  }
  for (int d = 0; d < 3; ++d) {
    double acc = 0.0;
    for (int j = 0; j < l; ++j) acc += beta[j * 3 + d] * la[j];
    out.log_scale[d] = s[d] + acc;
  }
  double nrm = 0.0;
  for (int d = 0; d < 4; ++d) {
    double acc = 0.0;
    for (int j = 0; j < m; ++j) acc += gamma[j * 4 + d] * et[j];
    out.rotation[d] = r[d] + acc;
    nrm += out.rotation[d] * out.rotation[d];
  }
  nrm = std::sqrt(nrm);
  if (nrm <= 1e-12) throw std::runtime_error("deform: degenerate zero-norm rotation");
  for (int d = 0; d < 4; ++d) out.rotation[d] /= nrm;
  return out;
}

}  // namespace dgtraj
