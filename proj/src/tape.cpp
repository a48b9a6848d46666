#include "dgtraj/tape.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace dgtraj {

using detail::Node;
using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;

namespace {

void check(bool ok, const char* msg) {
  if (!ok) throw std::runtime_error(std::string("tape: ") + msg);
}

// Unpack packed symmetric (xx,xy,xz,yy,yz,zz) into a full 3x3.
inline void unpack_sym(const double* p, double s[3][3]) {
  s[0][0] = p[0];
  s[0][1] = s[1][0] = p[1];
  s[0][2] = s[2][0] = p[2];
  s[1][1] = p[3];
  s[1][2] = s[2][1] = p[4];
  s[2][2] = p[5];
}

}  // namespace

Node& Tape::node(ValueRef r) {
  check(r.id >= 0 && r.id < static_cast<int>(nodes_.size()), "value not on tape");
  return nodes_[r.id];
}

const Node& Tape::node(ValueRef r) const {
  check(r.id >= 0 && r.id < static_cast<int>(nodes_.size()), "value not on tape");
  return nodes_[r.id];
}

OpCtx* Tape::ctx(ValueRef r) {
  const Node& n = node(r);
  return n.ctx >= 0 ? ctxs_[n.ctx].get() : nullptr;
}

std::span<const double> Tape::grad(ValueRef r) const {
  check(grads_ready_, "backward() has not run");
  return node(r).grad;
}

double Tape::scalar(ValueRef r) const {
  const Node& n = node(r);
  check(n.rows == 1 && n.cols == 1, "value is not scalar");
  return n.data[0];
}

ValueRef Tape::push(Node n) {
  for (int i = 0; i < n.nin; ++i)
    check(n.in[i] >= 0 && n.in[i] < static_cast<int>(nodes_.size()),
          "node input must precede it");
  forward_node(n);
  nodes_.push_back(std::move(n));
  grads_ready_ = false;
  return ValueRef{static_cast<int32_t>(nodes_.size() - 1)};
}

ValueRef Tape::leaf(std::span<const double> v, int rows, int cols, std::string name) {
  check(static_cast<int>(v.size()) == rows * cols, "leaf size mismatch");
  Node n;
  n.op = Op::Leaf;
  n.rows = rows;
  n.cols = cols;
  n.data.assign(v.begin(), v.end());
  n.name = std::move(name);
  return push(std::move(n));
}

ValueRef Tape::constant(std::span<const double> v, int rows, int cols, std::string name) {
  check(static_cast<int>(v.size()) == rows * cols, "constant size mismatch");
  Node n;
  n.op = Op::Constant;
  n.rows = rows;
  n.cols = cols;
  n.data.assign(v.begin(), v.end());
  n.name = std::move(name);
  return push(std::move(n));
}

ValueRef Tape::constant_scalar(double v) { return constant({&v, 1}, 1, 1); }

ValueRef Tape::unary(Op op, ValueRef a) {
  const Node& na = node(a);
  Node n;
  n.op = op;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

ValueRef Tape::binary(Op op, ValueRef a, ValueRef b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  check(na.rows == nb.rows && na.cols == nb.cols, "shape mismatch");
  Node n;
  n.op = op;
  n.in[0] = a.id;
  n.in[1] = b.id;
  n.nin = 2;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

ValueRef Tape::detach(ValueRef a) { return unary(Op::Detach, a); }
ValueRef Tape::add(ValueRef a, ValueRef b) { return binary(Op::Add, a, b); }
ValueRef Tape::sub(ValueRef a, ValueRef b) { return binary(Op::Sub, a, b); }
ValueRef Tape::mul(ValueRef a, ValueRef b) { return binary(Op::Mul, a, b); }
ValueRef Tape::div(ValueRef a, ValueRef b) { return binary(Op::Div, a, b); }
ValueRef Tape::neg(ValueRef a) { return unary(Op::Neg, a); }
ValueRef Tape::exp(ValueRef a) { return unary(Op::Exp, a); }
ValueRef Tape::log(ValueRef a) { return unary(Op::Log, a); }
ValueRef Tape::sqrt(ValueRef a) { return unary(Op::Sqrt, a); }
ValueRef Tape::abs(ValueRef a) { return unary(Op::Abs, a); }
ValueRef Tape::relu(ValueRef a) { return unary(Op::Relu, a); }
ValueRef Tape::sigmoid(ValueRef a) { return unary(Op::Sigmoid, a); }

ValueRef Tape::scale(ValueRef a, double c) {
  Node n;
  n.op = Op::Scale;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = node(a).rows;
  n.cols = node(a).cols;
  n.d0 = c;
  return push(std::move(n));
}

ValueRef Tape::add_scalar(ValueRef a, double c) {
  Node n;
  n.op = Op::AddScalar;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = node(a).rows;
  n.cols = node(a).cols;
  n.d0 = c;
  return push(std::move(n));
}

ValueRef Tape::clamp(ValueRef a, double lo, double hi) {
  Node n;
  n.op = Op::Clamp;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = node(a).rows;
  n.cols = node(a).cols;
  n.d0 = lo;
  n.d1 = hi;
  return push(std::move(n));
}

ValueRef Tape::sum(ValueRef a) {
  Node n;
  n.op = Op::Sum;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = 1;
  n.cols = 1;
  return push(std::move(n));
}

ValueRef Tape::mean(ValueRef a) {
  Node n;
  n.op = Op::Mean;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = 1;
  n.cols = 1;
  return push(std::move(n));
}

ValueRef Tape::gather_rows(ValueRef a, std::vector<int> rows) {
  const Node& na = node(a);
  for (int r : rows) check(r >= 0 && r < na.rows, "gather row out of range");
  Node n;
  n.op = Op::GatherRows;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = static_cast<int>(rows.size());
  n.cols = na.cols;
  n.idx_set = static_cast<int>(index_sets_.size());
  index_sets_.push_back(std::move(rows));
  return push(std::move(n));
}

ValueRef Tape::overwrite_rows(ValueRef base, ValueRef repl, std::vector<int> rows) {
  const Node& nb = node(base);
  const Node& nr = node(repl);
  check(nr.cols == nb.cols, "overwrite width mismatch");
  check(static_cast<int>(rows.size()) == nr.rows, "overwrite row count mismatch");
  for (int r : rows) check(r >= 0 && r < nb.rows, "overwrite row out of range");
  Node n;
  n.op = Op::OverwriteRows;
  n.in[0] = base.id;
  n.in[1] = repl.id;
  n.nin = 2;
  n.rows = nb.rows;
  n.cols = nb.cols;
  n.idx_set = static_cast<int>(index_sets_.size());
  index_sets_.push_back(std::move(rows));
  return push(std::move(n));
}

ValueRef Tape::slice_cols(ValueRef a, int c0, int c1) {
  const Node& na = node(a);
  check(0 <= c0 && c0 < c1 && c1 <= na.cols, "bad column slice");
  Node n;
  n.op = Op::SliceCols;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = na.rows;
  n.cols = c1 - c0;
  n.i0 = c0;
  n.i1 = c1;
  return push(std::move(n));
}

ValueRef Tape::reshape(ValueRef a, int rows, int cols) {
  const Node& na = node(a);
  check(rows * cols == na.rows * na.cols, "reshape size mismatch");
  Node n;
  n.op = Op::Reshape;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = rows;
  n.cols = cols;
  return push(std::move(n));
}

ValueRef Tape::rows_scale(ValueRef a, ValueRef s) {
  const Node& na = node(a);
  const Node& ns = node(s);
  check(ns.rows == na.rows && ns.cols == 1, "rows_scale wants P x 1 scales");
  Node n;
  n.op = Op::RowsScale;
  n.in[0] = a.id;
  n.in[1] = s.id;
  n.nin = 2;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(std::move(n));
}

ValueRef Tape::rows_norm(ValueRef a) {
  Node n;
  n.op = Op::RowsNorm;
  n.in[0] = a.id;
  n.nin = 1;
  n.rows = node(a).rows;
  n.cols = 1;
  return push(std::move(n));
}

ValueRef Tape::rows_normalize(ValueRef a) { return unary(Op::RowsNormalize, a); }

ValueRef Tape::quat_to_rotmat(ValueRef q) {
  check(node(q).cols == 4, "quaternions are P x 4");
  Node n;
  n.op = Op::QuatToRotmat;
  n.in[0] = q.id;
  n.nin = 1;
  n.rows = node(q).rows;
  n.cols = 9;
  return push(std::move(n));
}

ValueRef Tape::rows_mat_diag(ValueRef rot, ValueRef s) {
  check(node(rot).cols == 9 && node(s).cols == 3, "rows_mat_diag wants P x 9, P x 3");
  check(node(rot).rows == node(s).rows, "row count mismatch");
  Node n;
  n.op = Op::RowsMatDiag;
  n.in[0] = rot.id;
  n.in[1] = s.id;
  n.nin = 2;
  n.rows = node(rot).rows;
  n.cols = 9;
  return push(std::move(n));
}

ValueRef Tape::rows_mmt_sym(ValueRef m) {
  check(node(m).cols == 9, "rows_mmt_sym wants P x 9");
  Node n;
  n.op = Op::RowsMmtSym;
  n.in[0] = m.id;
  n.nin = 1;
  n.rows = node(m).rows;
  n.cols = 6;
  return push(std::move(n));
}

ValueRef Tape::rows_matmul_abt3(ValueRef a, ValueRef b) {
  check(node(a).cols == 9 && node(b).cols == 9, "rows_matmul_abt3 wants P x 9");
  check(node(a).rows == node(b).rows, "row count mismatch");
  Node n;
  n.op = Op::RowsMatmulABt3;
  n.in[0] = a.id;
  n.in[1] = b.id;
  n.nin = 2;
  n.rows = node(a).rows;
  n.cols = 9;
  return push(std::move(n));
}

ValueRef Tape::rows_matvec3(ValueRef m, ValueRef v) {
  check(node(m).cols == 9 && node(v).cols == 3, "rows_matvec3 wants P x 9, P x 3");
  check(node(m).rows == node(v).rows, "row count mismatch");
  Node n;
  n.op = Op::RowsMatvec3;
  n.in[0] = m.id;
  n.in[1] = v.id;
  n.nin = 2;
  n.rows = node(m).rows;
  n.cols = 3;
  return push(std::move(n));
}

ValueRef Tape::const_affine(ValueRef x, const double* R, const double* t) {
  check(node(x).cols == 3, "const_affine wants P x 3");
  Node n;
  n.op = Op::ConstAffine;
  n.in[0] = x.id;
  n.nin = 1;
  n.rows = node(x).rows;
  n.cols = 3;
  n.const_set = static_cast<int>(const_sets_.size());
  std::vector<double> c(R, R + 9);
  c.insert(c.end(), t, t + 3);
  const_sets_.push_back(std::move(c));
  return push(std::move(n));
}

ValueRef Tape::const_rot_sym(ValueRef s, const double* R) {
  check(node(s).cols == 6, "const_rot_sym wants P x 6 packed");
  Node n;
  n.op = Op::ConstRotSym;
  n.in[0] = s.id;
  n.nin = 1;
  n.rows = node(s).rows;
  n.cols = 6;
  n.const_set = static_cast<int>(const_sets_.size());
  const_sets_.emplace_back(R, R + 9);
  return push(std::move(n));
}

ValueRef Tape::perspective(ValueRef cam_pts, double fx, double fy, double cx, double cy) {
  check(node(cam_pts).cols == 3, "perspective wants P x 3");
  Node n;
  n.op = Op::Perspective;
  n.in[0] = cam_pts.id;
  n.nin = 1;
  n.rows = node(cam_pts).rows;
  n.cols = 2;
  n.const_set = static_cast<int>(const_sets_.size());
  const_sets_.push_back({fx, fy, cx, cy});
  return push(std::move(n));
}

ValueRef Tape::cov_project(ValueRef cam_pts, ValueRef cam_cov, double fx, double fy,
                           double lowpass) {
  check(node(cam_pts).cols == 3 && node(cam_cov).cols == 6, "cov_project shapes");
  check(node(cam_pts).rows == node(cam_cov).rows, "row count mismatch");
  Node n;
  n.op = Op::CovProject;
  n.in[0] = cam_pts.id;
  n.in[1] = cam_cov.id;
  n.nin = 2;
  n.rows = node(cam_pts).rows;
  n.cols = 3;
  n.const_set = static_cast<int>(const_sets_.size());
  const_sets_.push_back({fx, fy, lowpass});
  return push(std::move(n));
}

ValueRef Tape::basis_combine(ValueRef coeffs, ValueRef basis, int width) {
  const Node& nc = node(coeffs);
  const Node& nb = node(basis);
  const int k = nb.rows * nb.cols;
  check(nc.cols == k * width, "basis_combine coeff width mismatch");
  Node n;
  n.op = Op::BasisCombine;
  n.in[0] = coeffs.id;
  n.in[1] = basis.id;
  n.nin = 2;
  n.rows = nc.rows;
  n.cols = width;
  n.i0 = k;
  n.i1 = width;
  return push(std::move(n));
}

ValueRef Tape::affine(ValueRef x, ValueRef w, ValueRef b) {
  const Node& nx = node(x);
  const Node& nw = node(w);
  const Node& nb = node(b);
  check(nw.cols == nx.cols, "affine: W columns must match X columns");
  check(nb.rows * nb.cols == nw.rows, "affine: bias length must match W rows");
  Node n;
  n.op = Op::Affine;
  n.in[0] = x.id;
  n.in[1] = w.id;
  n.in[2] = b.id;
  n.nin = 3;
  n.rows = nx.rows;
  n.cols = nw.rows;
  return push(std::move(n));
}

ValueRef Tape::conv1d(ValueRef img, int axis, int img_w, int img_h, int channels,
                      std::span<const double> kernel_half) {
  const Node& ni = node(img);
  check(ni.rows == img_w * img_h && ni.cols == channels, "conv1d image shape");
  check(axis == 0 || axis == 1, "conv1d axis");
  Node n;
  n.op = Op::Conv1D;
  n.in[0] = img.id;
  n.nin = 1;
  n.rows = ni.rows;
  n.cols = ni.cols;
  n.i0 = axis;
  n.i1 = img_w;
  n.i2 = img_h;
  n.const_set = static_cast<int>(const_sets_.size());
  const_sets_.emplace_back(kernel_half.begin(), kernel_half.end());
  return push(std::move(n));
}

ValueRef Tape::raster_node(std::span<const ValueRef> inputs, int rows, int cols,
                           std::unique_ptr<OpCtx> ctx) {
  check(inputs.size() <= 4, "too many raster inputs");
  Node n;
  n.op = Op::Rasterize;
  n.nin = static_cast<int>(inputs.size());
  for (int i = 0; i < n.nin; ++i) n.in[i] = inputs[i].id;
  n.rows = rows;
  n.cols = cols;
  n.ctx = static_cast<int>(ctxs_.size());
  ctxs_.push_back(std::move(ctx));
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward evaluation

void Tape::forward_node(Node& n) {
  if (n.op == Op::Leaf || n.op == Op::Constant) return;
  const auto in = [&](int i) -> const Node& { return nodes_[n.in[i]]; };
  const size_t sz = static_cast<size_t>(n.rows) * n.cols;
  n.data.resize(sz);
  double* out = n.data.data();

  switch (n.op) {
    case Op::Detach: {
      const auto& a = in(0).data;
      std::copy(a.begin(), a.end(), out);
      break;
    }
    case Op::Add: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = a[i] + b[i];
      break;
    }
    case Op::Sub: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = a[i] - b[i];
      break;
    }
    case Op::Mul: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = a[i] * b[i];
      break;
    }
    case Op::Div: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = a[i] / b[i];
      break;
    }
    case Op::Neg: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = -a[i];
      break;
    }
    case Op::Scale: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = a[i] * n.d0;
      break;
    }
    case Op::AddScalar: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = a[i] + n.d0;
      break;
    }
    case Op::Exp: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = std::exp(a[i]);
      break;
    }
    case Op::Log: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = std::log(a[i]);
      break;
    }
    case Op::Sqrt: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = std::sqrt(a[i]);
      break;
    }
    case Op::Abs: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = std::abs(a[i]);
      break;
    }
    case Op::Relu: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case Op::Sigmoid: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = 1.0 / (1.0 + std::exp(-a[i]));
      break;
    }
    case Op::Clamp: {
      const double* a = in(0).data.data();
      for (size_t i = 0; i < sz; ++i) out[i] = std::min(n.d1, std::max(n.d0, a[i]));
      break;
    }
    case Op::Sum:
    case Op::Mean: {
      const auto& a = in(0).data;
      double s = 0.0;
      for (double v : a) s += v;
      out[0] = n.op == Op::Sum ? s : s / static_cast<double>(a.size());
      break;
    }
    case Op::GatherRows: {
      const auto& idx = index_sets_[n.idx_set];
      const double* a = in(0).data.data();
      for (int r = 0; r < n.rows; ++r)
        std::copy_n(a + static_cast<size_t>(idx[r]) * n.cols, n.cols,
                    out + static_cast<size_t>(r) * n.cols);
      break;
    }
    case Op::OverwriteRows: {
      const auto& idx = index_sets_[n.idx_set];
      const auto& base = in(0).data;
      std::copy(base.begin(), base.end(), out);
      const double* rep = in(1).data.data();
      for (size_t r = 0; r < idx.size(); ++r)
        std::copy_n(rep + r * n.cols, n.cols, out + static_cast<size_t>(idx[r]) * n.cols);
      break;
    }
    case Op::SliceCols: {
      const Node& a = in(0);
      for (int r = 0; r < n.rows; ++r)
        std::copy_n(a.data.data() + static_cast<size_t>(r) * a.cols + n.i0, n.cols,
                    out + static_cast<size_t>(r) * n.cols);
      break;
    }
    case Op::Reshape: {
      const auto& a = in(0).data;
      std::copy(a.begin(), a.end(), out);
      break;
    }
    case Op::RowsScale: {
      const double* a = in(0).data.data();
      const double* s = in(1).data.data();
      for (int r = 0; r < n.rows; ++r)
        for (int c = 0; c < n.cols; ++c)
          out[static_cast<size_t>(r) * n.cols + c] =
              a[static_cast<size_t>(r) * n.cols + c] * s[r];
      break;
    }
    case Op::RowsNorm: {
      const Node& a = in(0);
      for (int r = 0; r < n.rows; ++r) {
        double s = 0.0;
        const double* row = a.data.data() + static_cast<size_t>(r) * a.cols;
        for (int c = 0; c < a.cols; ++c) s += row[c] * row[c];
        out[r] = std::sqrt(s);
      }
      break;
    }
    case Op::RowsNormalize: {
      const Node& a = in(0);
      for (int r = 0; r < n.rows; ++r) {
        const double* row = a.data.data() + static_cast<size_t>(r) * a.cols;
        double s = 0.0;
        for (int c = 0; c < a.cols; ++c) s += row[c] * row[c];
        s = std::sqrt(s);
        check(s > 1e-12, "rows_normalize: zero-norm row");
        for (int c = 0; c < a.cols; ++c) out[static_cast<size_t>(r) * a.cols + c] = row[c] / s;
      }
      break;
    }
    case Op::QuatToRotmat: {
      const double* q = in(0).data.data();
      for (int r = 0; r < n.rows; ++r) {
        const double w = q[r * 4 + 0], x = q[r * 4 + 1], y = q[r * 4 + 2], z = q[r * 4 + 3];
        double* R = out + static_cast<size_t>(r) * 9;
        R[0] = 1 - 2 * (y * y + z * z);
        R[1] = 2 * (x * y - w * z);
        R[2] = 2 * (x * z + w * y);
        R[3] = 2 * (x * y + w * z);
        R[4] = 1 - 2 * (x * x + z * z);
        R[5] = 2 * (y * z - w * x);
        R[6] = 2 * (x * z - w * y);
        R[7] = 2 * (y * z + w * x);
        R[8] = 1 - 2 * (x * x + y * y);
      }
      break;
    }
    case Op::RowsMatDiag: {
      const double* R = in(0).data.data();
      const double* s = in(1).data.data();
      for (int r = 0; r < n.rows; ++r)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            out[r * 9 + i * 3 + j] = R[r * 9 + i * 3 + j] * s[r * 3 + j];
      break;
    }
    case Op::RowsMmtSym: {
      const double* m = in(0).data.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* M = m + static_cast<size_t>(r) * 9;
        double* p = out + static_cast<size_t>(r) * 6;
        auto dot = [&](int i, int j) {
          return M[i * 3] * M[j * 3] + M[i * 3 + 1] * M[j * 3 + 1] + M[i * 3 + 2] * M[j * 3 + 2];
        };
        p[0] = dot(0, 0);
        p[1] = dot(0, 1);
        p[2] = dot(0, 2);
        p[3] = dot(1, 1);
        p[4] = dot(1, 2);
        p[5] = dot(2, 2);
      }
      break;
    }
    case Op::RowsMatmulABt3: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* A = a + static_cast<size_t>(r) * 9;
        const double* B = b + static_cast<size_t>(r) * 9;
        double* C = out + static_cast<size_t>(r) * 9;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            C[i * 3 + j] =
                A[i * 3] * B[j * 3] + A[i * 3 + 1] * B[j * 3 + 1] + A[i * 3 + 2] * B[j * 3 + 2];
      }
      break;
    }
    case Op::RowsMatvec3: {
      const double* m = in(0).data.data();
      const double* v = in(1).data.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* M = m + static_cast<size_t>(r) * 9;
        const double* x = v + static_cast<size_t>(r) * 3;
        double* y = out + static_cast<size_t>(r) * 3;
        for (int i = 0; i < 3; ++i)
          y[i] = M[i * 3] * x[0] + M[i * 3 + 1] * x[1] + M[i * 3 + 2] * x[2];
      }
      break;
    }
    case Op::ConstAffine: {
      const auto& c = const_sets_[n.const_set];
      const double* R = c.data();
      const double* t = c.data() + 9;
      const double* x = in(0).data.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* p = x + static_cast<size_t>(r) * 3;
        double* y = out + static_cast<size_t>(r) * 3;
        for (int i = 0; i < 3; ++i)
          y[i] = R[i * 3] * p[0] + R[i * 3 + 1] * p[1] + R[i * 3 + 2] * p[2] + t[i];
      }
      break;
    }
    case Op::ConstRotSym: {
      const double* R = const_sets_[n.const_set].data();
      const double* s = in(0).data.data();
      for (int r = 0; r < n.rows; ++r) {
        double W[3][3];
        unpack_sym(s + static_cast<size_t>(r) * 6, W);
        double RW[3][3];
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j)
            RW[i][j] = R[i * 3] * W[0][j] + R[i * 3 + 1] * W[1][j] + R[i * 3 + 2] * W[2][j];
        double* p = out + static_cast<size_t>(r) * 6;
        int pi = 0;
        for (int i = 0; i < 3; ++i)
          for (int j = i; j < 3; ++j)
            p[pi++] = RW[i][0] * R[j * 3] + RW[i][1] * R[j * 3 + 1] + RW[i][2] * R[j * 3 + 2];
      }
      break;
    }
    case Op::Perspective: {
      const auto& c = const_sets_[n.const_set];
      const double fx = c[0], fy = c[1], cx = c[2], cy = c[3];
      const double* x = in(0).data.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* p = x + static_cast<size_t>(r) * 3;
        out[r * 2 + 0] = fx * p[0] / p[2] + cx;
        out[r * 2 + 1] = fy * p[1] / p[2] + cy;
      }
      break;
    }
    case Op::CovProject: {
      const auto& c = const_sets_[n.const_set];
      const double fx = c[0], fy = c[1], lp = c[2];
      const double* pts = in(0).data.data();
      const double* cov = in(1).data.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* p = pts + static_cast<size_t>(r) * 3;
        const double x = p[0], y = p[1], z = p[2];
        const double j0 = fx / z, j2 = -fx * x / (z * z);
        const double k1 = fy / z, k2 = -fy * y / (z * z);
        double S[3][3];
        unpack_sym(cov + static_cast<size_t>(r) * 6, S);
        double* o = out + static_cast<size_t>(r) * 3;
        o[0] = j0 * j0 * S[0][0] + 2 * j0 * j2 * S[0][2] + j2 * j2 * S[2][2] + lp;
        o[1] = j0 * (S[0][1] * k1 + S[0][2] * k2) + j2 * (S[2][1] * k1 + S[2][2] * k2);
        o[2] = k1 * k1 * S[1][1] + 2 * k1 * k2 * S[1][2] + k2 * k2 * S[2][2] + lp;
      }
      break;
    }
    case Op::BasisCombine: {
      const int k = n.i0, w = n.i1;
      const double* cf = in(0).data.data();
      const double* bs = in(1).data.data();
      for (int r = 0; r < n.rows; ++r) {
        double* o = out + static_cast<size_t>(r) * w;
        const double* row = cf + static_cast<size_t>(r) * k * w;
        for (int c = 0; c < w; ++c) {
          double s = 0.0;
          for (int j = 0; j < k; ++j) s += row[j * w + c] * bs[j];
          o[c] = s;
        }
      }
      break;
    }
    case Op::Affine: {
      const Node& x = in(0);
      const Node& w = in(1);
      const Node& b = in(2);
      MapCM X(x.data.data(), x.rows, x.cols);
      MapCM W(w.data.data(), w.rows, w.cols);
      MapM Y(out, n.rows, n.cols);
      Y.noalias() = X * W.transpose();
      for (int r = 0; r < n.rows; ++r)
        for (int c = 0; c < n.cols; ++c) Y(r, c) += b.data[c];
      break;
    }
    case Op::Conv1D: {
      const auto& kern = const_sets_[n.const_set];
      const int radius = static_cast<int>(kern.size()) - 1;
      const int axis = n.i0, W = n.i1, H = n.i2, C = n.cols;
      const double* img = in(0).data.data();
      const int len = axis == 0 ? W : H;
      // Per-position renormalization over the truncated window.
      std::vector<double> norm(len);
      for (int p = 0; p < len; ++p) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d)
          if (p + d >= 0 && p + d < len) s += kern[std::abs(d)];
        norm[p] = s;
      }
      for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) {
          const int p = axis == 0 ? xx : yy;
          double* o = out + (static_cast<size_t>(yy) * W + xx) * C;
          for (int c = 0; c < C; ++c) o[c] = 0.0;
          for (int d = -radius; d <= radius; ++d) {
            const int q = p + d;
            if (q < 0 || q >= len) continue;
            const int sx = axis == 0 ? q : xx;
            const int sy = axis == 0 ? yy : q;
            const double wgt = kern[std::abs(d)] / norm[p];
            const double* s = img + (static_cast<size_t>(sy) * W + sx) * C;
            for (int c = 0; c < C; ++c) o[c] += wgt * s[c];
          }
        }
      break;
    }
    case Op::Rasterize: {
      std::vector<std::span<const double>> ins;
      for (int i = 0; i < n.nin; ++i) ins.emplace_back(nodes_[n.in[i]].data);
      ctxs_[n.ctx]->forward({ins.data(), ins.size()}, n.data);
      check(n.data.size() == sz, "raster output size mismatch");
      break;
    }
    case Op::Leaf:
    case Op::Constant:
      break;
  }
}

// ---------------------------------------------------------------------------
// Backward

void Tape::backward(ValueRef loss) {
  Node& ln = node(loss);
  check(ln.rows == 1 && ln.cols == 1, "loss must be scalar");
  check(std::isfinite(ln.data[0]), "loss is not finite");
  for (auto& n : nodes_) {
    n.grad.assign(n.data.size(), 0.0);
  }
  ln.grad[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) backward_node(nodes_[i]);
  grads_ready_ = true;
}

void Tape::backward_node(Node& n) {
  if (n.op == Op::Leaf || n.op == Op::Constant || n.op == Op::Detach) return;
  const auto in = [&](int i) -> Node& { return nodes_[n.in[i]]; };
  const size_t sz = n.data.size();
  const double* g = n.grad.data();

  switch (n.op) {
    case Op::Add: {
      double* ga = in(0).grad.data();
      double* gb = in(1).grad.data();
      for (size_t i = 0; i < sz; ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
      break;
    }
    case Op::Sub: {
      double* ga = in(0).grad.data();
      double* gb = in(1).grad.data();
      for (size_t i = 0; i < sz; ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
      break;
    }
    case Op::Mul: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      double* ga = in(0).grad.data();
      double* gb = in(1).grad.data();
      for (size_t i = 0; i < sz; ++i) {
        ga[i] += g[i] * b[i];
        gb[i] += g[i] * a[i];
      }
      break;
    }
    case Op::Div: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      double* ga = in(0).grad.data();
      double* gb = in(1).grad.data();
      for (size_t i = 0; i < sz; ++i) {
        ga[i] += g[i] / b[i];
        gb[i] -= g[i] * a[i] / (b[i] * b[i]);
      }
      break;
    }
    case Op::Neg: {
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] -= g[i];
      break;
    }
    case Op::Scale: {
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i] * n.d0;
      break;
    }
    case Op::AddScalar: {
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i];
      break;
    }
    case Op::Exp: {
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i] * n.data[i];
      break;
    }
    case Op::Log: {
      const double* a = in(0).data.data();
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i] / a[i];
      break;
    }
    case Op::Sqrt: {
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i] * 0.5 / n.data[i];
      break;
    }
    case Op::Abs: {
      const double* a = in(0).data.data();
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i)
        ga[i] += a[i] > 0.0 ? g[i] : (a[i] < 0.0 ? -g[i] : 0.0);
      break;
    }
    case Op::Relu: {
      const double* a = in(0).data.data();
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += a[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case Op::Sigmoid: {
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i] * n.data[i] * (1.0 - n.data[i]);
      break;
    }
    case Op::Clamp: {
      const double* a = in(0).data.data();
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i)
        if (a[i] > n.d0 && a[i] < n.d1) ga[i] += g[i];
      break;
    }
    case Op::Sum: {
      double* ga = in(0).grad.data();
      const size_t m = in(0).data.size();
      for (size_t i = 0; i < m; ++i) ga[i] += g[0];
      break;
    }
    case Op::Mean: {
      double* ga = in(0).grad.data();
      const size_t m = in(0).data.size();
      const double s = g[0] / static_cast<double>(m);
      for (size_t i = 0; i < m; ++i) ga[i] += s;
      break;
    }
    case Op::GatherRows: {
      const auto& idx = index_sets_[n.idx_set];
      double* ga = in(0).grad.data();
      for (int r = 0; r < n.rows; ++r)
        for (int c = 0; c < n.cols; ++c)
          ga[static_cast<size_t>(idx[r]) * n.cols + c] += g[static_cast<size_t>(r) * n.cols + c];
      break;
    }
    case Op::OverwriteRows: {
      const auto& idx = index_sets_[n.idx_set];
      double* gb = in(0).grad.data();
      double* gr = in(1).grad.data();
      std::vector<char> taken(n.rows, 0);
      for (int r : idx) taken[r] = 1;
      for (int r = 0; r < n.rows; ++r)
        if (!taken[r])
          for (int c = 0; c < n.cols; ++c)
            gb[static_cast<size_t>(r) * n.cols + c] += g[static_cast<size_t>(r) * n.cols + c];
      for (size_t r = 0; r < idx.size(); ++r)
        for (int c = 0; c < n.cols; ++c)
          gr[r * n.cols + c] += g[static_cast<size_t>(idx[r]) * n.cols + c];
      break;
    }
    case Op::SliceCols: {
      Node& a = in(0);
      double* ga = a.grad.data();
      for (int r = 0; r < n.rows; ++r)
        for (int c = 0; c < n.cols; ++c)
          ga[static_cast<size_t>(r) * a.cols + n.i0 + c] += g[static_cast<size_t>(r) * n.cols + c];
      break;
    }
    case Op::Reshape: {
      double* ga = in(0).grad.data();
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i];
      break;
    }
    case Op::RowsScale: {
      const double* a = in(0).data.data();
      const double* s = in(1).data.data();
      double* ga = in(0).grad.data();
      double* gs = in(1).grad.data();
      for (int r = 0; r < n.rows; ++r)
        for (int c = 0; c < n.cols; ++c) {
          const size_t i = static_cast<size_t>(r) * n.cols + c;
          ga[i] += g[i] * s[r];
          gs[r] += g[i] * a[i];
        }
      break;
    }
    case Op::RowsNorm: {
      Node& a = in(0);
      double* ga = a.grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double nv = n.data[r];
        if (nv < 1e-12) continue;  // subgradient 0 at the origin
        const double* row = a.data.data() + static_cast<size_t>(r) * a.cols;
        for (int c = 0; c < a.cols; ++c)
          ga[static_cast<size_t>(r) * a.cols + c] += g[r] * row[c] / nv;
      }
      break;
    }
    case Op::RowsNormalize: {
      Node& a = in(0);
      double* ga = a.grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* row = a.data.data() + static_cast<size_t>(r) * a.cols;
        const double* y = n.data.data() + static_cast<size_t>(r) * a.cols;
        const double* gy = g + static_cast<size_t>(r) * a.cols;
        double nrm = 0.0;
        for (int c = 0; c < a.cols; ++c) nrm += row[c] * row[c];
        nrm = std::sqrt(nrm);
        double ydotg = 0.0;
        for (int c = 0; c < a.cols; ++c) ydotg += y[c] * gy[c];
        for (int c = 0; c < a.cols; ++c)
          ga[static_cast<size_t>(r) * a.cols + c] += (gy[c] - y[c] * ydotg) / nrm;
      }
      break;
    }
    case Op::QuatToRotmat: {
      const double* q = in(0).data.data();
      double* gq = in(0).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double w = q[r * 4 + 0], x = q[r * 4 + 1], y = q[r * 4 + 2], z = q[r * 4 + 3];
        const double* G = g + static_cast<size_t>(r) * 9;
        gq[r * 4 + 0] += 2 * (-z * G[1] + y * G[2] + z * G[3] - x * G[5] - y * G[6] + x * G[7]);
        gq[r * 4 + 1] += 2 * (y * G[1] + z * G[2] + y * G[3] - 2 * x * G[4] - w * G[5] +
                              z * G[6] + w * G[7] - 2 * x * G[8]);
        gq[r * 4 + 2] += 2 * (-2 * y * G[0] + x * G[1] + w * G[2] + x * G[3] + z * G[5] -
                              w * G[6] + z * G[7] - 2 * y * G[8]);
        gq[r * 4 + 3] += 2 * (-2 * z * G[0] - w * G[1] + x * G[2] + w * G[3] - 2 * z * G[4] +
                              y * G[5] + x * G[6] + y * G[7]);
      }
      break;
    }
    case Op::RowsMatDiag: {
      const double* R = in(0).data.data();
      const double* s = in(1).data.data();
      double* gR = in(0).grad.data();
      double* gs = in(1).grad.data();
      for (int r = 0; r < n.rows; ++r)
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            const size_t e = static_cast<size_t>(r) * 9 + i * 3 + j;
            gR[e] += g[e] * s[r * 3 + j];
            gs[r * 3 + j] += g[e] * R[e];
          }
      break;
    }
    case Op::RowsMmtSym: {
      const double* m = in(0).data.data();
      double* gm = in(0).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* M = m + static_cast<size_t>(r) * 9;
        const double* gp = g + static_cast<size_t>(r) * 6;
        double* gM = gm + static_cast<size_t>(r) * 9;
        // d(row_i . row_j)/drow_i = row_j; packed entries (00,01,02,11,12,22)
        for (int c = 0; c < 3; ++c) {
          gM[0 * 3 + c] += 2 * gp[0] * M[0 * 3 + c] + gp[1] * M[1 * 3 + c] + gp[2] * M[2 * 3 + c];
          gM[1 * 3 + c] += gp[1] * M[0 * 3 + c] + 2 * gp[3] * M[1 * 3 + c] + gp[4] * M[2 * 3 + c];
          gM[2 * 3 + c] += gp[2] * M[0 * 3 + c] + gp[4] * M[1 * 3 + c] + 2 * gp[5] * M[2 * 3 + c];
        }
      }
      break;
    }
    case Op::RowsMatmulABt3: {
      const double* a = in(0).data.data();
      const double* b = in(1).data.data();
      double* ga = in(0).grad.data();
      double* gb = in(1).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* A = a + static_cast<size_t>(r) * 9;
        const double* B = b + static_cast<size_t>(r) * 9;
        const double* G = g + static_cast<size_t>(r) * 9;
        double* GA = ga + static_cast<size_t>(r) * 9;
        double* GB = gb + static_cast<size_t>(r) * 9;
        // C = A B^T: dA = G B, dB = G^T A
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            double sa = 0.0, sb = 0.0;
            for (int k = 0; k < 3; ++k) {
              sa += G[i * 3 + k] * B[k * 3 + j];
              sb += G[k * 3 + i] * A[k * 3 + j];
            }
            GA[i * 3 + j] += sa;
            GB[i * 3 + j] += sb;
          }
      }
      break;
    }
    case Op::RowsMatvec3: {
      const double* m = in(0).data.data();
      const double* v = in(1).data.data();
      double* gm = in(0).grad.data();
      double* gv = in(1).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* M = m + static_cast<size_t>(r) * 9;
        const double* x = v + static_cast<size_t>(r) * 3;
        const double* G = g + static_cast<size_t>(r) * 3;
        for (int i = 0; i < 3; ++i)
          for (int j = 0; j < 3; ++j) {
            gm[static_cast<size_t>(r) * 9 + i * 3 + j] += G[i] * x[j];
            gv[static_cast<size_t>(r) * 3 + j] += G[i] * M[i * 3 + j];
          }
      }
      break;
    }
    case Op::ConstAffine: {
      const double* R = const_sets_[n.const_set].data();
      double* gx = in(0).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* G = g + static_cast<size_t>(r) * 3;
        double* gp = gx + static_cast<size_t>(r) * 3;
        for (int j = 0; j < 3; ++j)
          gp[j] += R[0 * 3 + j] * G[0] + R[1 * 3 + j] * G[1] + R[2 * 3 + j] * G[2];
      }
      break;
    }
    case Op::ConstRotSym: {
      const double* R = const_sets_[n.const_set].data();
      double* gs = in(0).grad.data();
      static const int PI[6] = {0, 0, 0, 1, 1, 2};
      static const int PJ[6] = {0, 1, 2, 1, 2, 2};
      for (int r = 0; r < n.rows; ++r) {
        const double* G = g + static_cast<size_t>(r) * 6;
        double* gw = gs + static_cast<size_t>(r) * 6;
        for (int e = 0; e < 6; ++e) {  // packed input entry (i,j)
          const int i = PI[e], j = PJ[e];
          double acc = 0.0;
          for (int f = 0; f < 6; ++f) {  // packed output entry (a,b)
            const int a = PI[f], b = PJ[f];
            double d = R[a * 3 + i] * R[b * 3 + j];
            if (i != j) d += R[a * 3 + j] * R[b * 3 + i];
            acc += G[f] * d;
          }
          gw[e] += acc;
        }
      }
      break;
    }
    case Op::Perspective: {
      const auto& c = const_sets_[n.const_set];
      const double fx = c[0], fy = c[1];
      const double* x = in(0).data.data();
      double* gx = in(0).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* p = x + static_cast<size_t>(r) * 3;
        const double gu = g[r * 2 + 0], gv = g[r * 2 + 1];
        gx[r * 3 + 0] += gu * fx / p[2];
        gx[r * 3 + 1] += gv * fy / p[2];
        gx[r * 3 + 2] += -gu * fx * p[0] / (p[2] * p[2]) - gv * fy * p[1] / (p[2] * p[2]);
      }
      break;
    }
    case Op::CovProject: {
      const auto& c = const_sets_[n.const_set];
      const double fx = c[0], fy = c[1];
      const double* pts = in(0).data.data();
      const double* cov = in(1).data.data();
      double* gp = in(0).grad.data();
      double* gc = in(1).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* p = pts + static_cast<size_t>(r) * 3;
        const double x = p[0], y = p[1], z = p[2];
        const double j0 = fx / z, j2 = -fx * x / (z * z);
        const double k1 = fy / z, k2 = -fy * y / (z * z);
        double S[3][3];
        unpack_sym(cov + static_cast<size_t>(r) * 6, S);
        const double ga = g[r * 3 + 0], gb = g[r * 3 + 1], gcc = g[r * 3 + 2];
        // Packed symmetric input: off-diagonals appear once, symmetry folded in.
        double* gw = gc + static_cast<size_t>(r) * 6;
        gw[0] += ga * j0 * j0;
        gw[1] += gb * j0 * k1;
        gw[2] += ga * 2 * j0 * j2 + gb * j0 * k2;
        gw[3] += gcc * k1 * k1;
        gw[4] += gb * j2 * k1 + gcc * 2 * k1 * k2;
        gw[5] += ga * j2 * j2 + gb * j2 * k2 + gcc * k2 * k2;
        // Jacobian entries.
        const double da_dj0 = 2 * j0 * S[0][0] + 2 * j2 * S[0][2];
        const double da_dj2 = 2 * j0 * S[0][2] + 2 * j2 * S[2][2];
        const double db_dj0 = S[0][1] * k1 + S[0][2] * k2;
        const double db_dj2 = S[2][1] * k1 + S[2][2] * k2;
        const double db_dk1 = j0 * S[0][1] + j2 * S[2][1];
        const double db_dk2 = j0 * S[0][2] + j2 * S[2][2];
        const double dc_dk1 = 2 * k1 * S[1][1] + 2 * k2 * S[1][2];
        const double dc_dk2 = 2 * k1 * S[1][2] + 2 * k2 * S[2][2];
        const double gj0 = ga * da_dj0 + gb * db_dj0;
        const double gj2 = ga * da_dj2 + gb * db_dj2;
        const double gk1 = gcc * dc_dk1 + gb * db_dk1;
        const double gk2 = gcc * dc_dk2 + gb * db_dk2;
        // j0 = fx/z, j2 = -fx x / z^2, k1 = fy/z, k2 = -fy y / z^2
        gp[r * 3 + 0] += gj2 * (-fx / (z * z));
        gp[r * 3 + 1] += gk2 * (-fy / (z * z));
        gp[r * 3 + 2] += gj0 * (-fx / (z * z)) + gj2 * (2 * fx * x / (z * z * z)) +
                         gk1 * (-fy / (z * z)) + gk2 * (2 * fy * y / (z * z * z));
      }
      break;
    }
    case Op::BasisCombine: {
      const int k = n.i0, w = n.i1;
      const double* cf = in(0).data.data();
      const double* bs = in(1).data.data();
      double* gcf = in(0).grad.data();
      double* gbs = in(1).grad.data();
      for (int r = 0; r < n.rows; ++r) {
        const double* G = g + static_cast<size_t>(r) * w;
        const double* row = cf + static_cast<size_t>(r) * k * w;
        double* gr = gcf + static_cast<size_t>(r) * k * w;
        for (int j = 0; j < k; ++j)
          for (int c = 0; c < w; ++c) {
            gr[j * w + c] += G[c] * bs[j];
            gbs[j] += G[c] * row[j * w + c];
          }
      }
      break;
    }
    case Op::Affine: {
      Node& x = in(0);
      Node& w = in(1);
      Node& b = in(2);
      MapCM X(x.data.data(), x.rows, x.cols);
      MapCM W(w.data.data(), w.rows, w.cols);
      MapCM G(g, n.rows, n.cols);
      MapM GX(x.grad.data(), x.rows, x.cols);
      MapM GW(w.grad.data(), w.rows, w.cols);
      GX.noalias() += G * W;
      GW.noalias() += G.transpose() * X;
      for (int c = 0; c < n.cols; ++c) {
        double s = 0.0;
        for (int r = 0; r < n.rows; ++r) s += G(r, c);
        b.grad[c] += s;
      }
      break;
    }
    case Op::Conv1D: {
      const auto& kern = const_sets_[n.const_set];
      const int radius = static_cast<int>(kern.size()) - 1;
      const int axis = n.i0, W = n.i1, H = n.i2, C = n.cols;
      double* gi = in(0).grad.data();
      const int len = axis == 0 ? W : H;
      std::vector<double> norm(len);
      for (int p = 0; p < len; ++p) {
        double s = 0.0;
        for (int d = -radius; d <= radius; ++d)
          if (p + d >= 0 && p + d < len) s += kern[std::abs(d)];
        norm[p] = s;
      }
      for (int yy = 0; yy < H; ++yy)
        for (int xx = 0; xx < W; ++xx) {
          const int p = axis == 0 ? xx : yy;
          const double* go = g + (static_cast<size_t>(yy) * W + xx) * C;
          for (int d = -radius; d <= radius; ++d) {
            const int q = p + d;
            if (q < 0 || q >= len) continue;
            const int sx = axis == 0 ? q : xx;
            const int sy = axis == 0 ? yy : q;
            const double wgt = kern[std::abs(d)] / norm[p];
            double* gs = gi + (static_cast<size_t>(sy) * W + sx) * C;
            for (int c = 0; c < C; ++c) gs[c] += wgt * go[c];
          }
        }
      break;
    }
    case Op::Rasterize: {
      std::vector<std::span<const double>> ins;
      std::vector<std::span<double>> grads;
      for (int i = 0; i < n.nin; ++i) {
        ins.emplace_back(nodes_[n.in[i]].data);
        grads.emplace_back(nodes_[n.in[i]].grad);
      }
      ctxs_[n.ctx]->backward(n.grad, {ins.data(), ins.size()}, {grads.data(), grads.size()});
      break;
    }
    default:
      break;
  }
}

}  // namespace dgtraj
