#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dgtraj {

// Handle to one node output on a Tape.
struct ValueRef {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
  Leaf,
  Constant,
  Detach,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,      // x * c
  AddScalar,  // x + c
  Exp,
  Log,
  Sqrt,
  Abs,
  Relu,
  Sigmoid,
  Clamp,
  Sum,
  Mean,
  GatherRows,
  OverwriteRows,
  SliceCols,
  Reshape,
  RowsScale,      // rows of a scaled by per-row scalar
  RowsNorm,       // per-row euclidean norm -> P x 1
  RowsNormalize,  // per-row x / |x|
  QuatToRotmat,   // P x 4 (w,x,y,z) unit -> P x 9 row-major
  RowsMatDiag,    // R (P x 9), s (P x 3) -> R * diag(s)  (P x 9)
  RowsMmtSym,     // M (P x 9) -> M M^T packed sym (P x 6: xx,xy,xz,yy,yz,zz)
  RowsMatmulABt3, // A (P x 9), B (P x 9) -> A B^T (P x 9)
  RowsMatvec3,    // M (P x 9), v (P x 3) -> M v (P x 3)
  ConstAffine,    // X (P x 3) -> X R^T + t, R/t constant
  ConstRotSym,    // packed sym (P x 6) -> R S R^T packed, R constant
  Perspective,    // cam-space points (P x 3) -> pixel coords (P x 2)
  CovProject,     // cam points (P x 3), cam cov (P x 6) -> screen cov (P x 3: a,b,c) + lowpass
  BasisCombine,   // coeffs (P x k*w), basis (k) -> (P x w)
  Affine,         // X (B x in), W (out x in), b (out) -> X W^T + 1 b^T
  Conv1D,         // renormalized truncated kernel along image axis
  Rasterize,
};

// Custom op payload (used by the rasterizer). forward() fills the output
// buffer; backward() accumulates into the input gradients.
struct OpCtx {
  virtual ~OpCtx() = default;
  virtual void forward(std::span<const std::span<const double>> ins,
                       std::vector<double>& out) = 0;
  virtual void backward(std::span<const double> out_grad,
                        std::span<const std::span<const double>> ins,
                        std::span<const std::span<double>> in_grads) = 0;
};

class Tape;

namespace detail {
struct Node {
  Op op;
  int32_t in[4] = {-1, -1, -1, -1};
  int nin = 0;
  int rows = 0, cols = 0;
  double d0 = 0.0, d1 = 0.0;
  int i0 = 0, i1 = 0, i2 = 0;
  int idx_set = -1;  // index into Tape::index_sets_
  int const_set = -1;
  int ctx = -1;  // index into Tape::ctxs_
  std::vector<double> data;
  std::vector<double> grad;
  std::string name;  // leaves only
};
}  // namespace detail

// Reverse-mode tape. Nodes are appended in topological order and evaluated
// eagerly; backward() replays them in reverse. Values are flat row-major
// (rows x cols) double buffers. Gradient accumulation order is fixed by node
// order, so two backward passes over the same tape are bit-identical.
class Tape {
 public:
  ValueRef leaf(std::span<const double> v, int rows, int cols, std::string name);
  ValueRef constant(std::span<const double> v, int rows, int cols, std::string name = {});
  ValueRef constant_scalar(double v);
  ValueRef detach(ValueRef a);

  ValueRef add(ValueRef a, ValueRef b);
  ValueRef sub(ValueRef a, ValueRef b);
  ValueRef mul(ValueRef a, ValueRef b);
  ValueRef div(ValueRef a, ValueRef b);
  ValueRef neg(ValueRef a);
  ValueRef scale(ValueRef a, double c);
  ValueRef add_scalar(ValueRef a, double c);
  ValueRef exp(ValueRef a);
  ValueRef log(ValueRef a);
  ValueRef sqrt(ValueRef a);
  ValueRef abs(ValueRef a);
  ValueRef relu(ValueRef a);
  ValueRef sigmoid(ValueRef a);
  ValueRef clamp(ValueRef a, double lo, double hi);
  ValueRef sum(ValueRef a);
  ValueRef mean(ValueRef a);

  ValueRef gather_rows(ValueRef a, std::vector<int> rows);
  // Copy of `base` with rows[i] replaced by row i of `repl`.
  ValueRef overwrite_rows(ValueRef base, ValueRef repl, std::vector<int> rows);
  ValueRef slice_cols(ValueRef a, int c0, int c1);
  ValueRef reshape(ValueRef a, int rows, int cols);
  ValueRef rows_scale(ValueRef a, ValueRef s);
  ValueRef rows_norm(ValueRef a);
  ValueRef rows_normalize(ValueRef a);
  ValueRef quat_to_rotmat(ValueRef q);
  ValueRef rows_mat_diag(ValueRef rot, ValueRef s);
  ValueRef rows_mmt_sym(ValueRef m);
  ValueRef rows_matmul_abt3(ValueRef a, ValueRef b);
  ValueRef rows_matvec3(ValueRef m, ValueRef v);
  ValueRef const_affine(ValueRef x, const double* R, const double* t);
  ValueRef const_rot_sym(ValueRef s, const double* R);
  ValueRef perspective(ValueRef cam_pts, double fx, double fy, double cx, double cy);
  ValueRef cov_project(ValueRef cam_pts, ValueRef cam_cov, double fx, double fy,
                       double lowpass = 0.3);
  ValueRef basis_combine(ValueRef coeffs, ValueRef basis, int width);
  ValueRef affine(ValueRef x, ValueRef w, ValueRef b);
  ValueRef conv1d(ValueRef img, int axis, int img_w, int img_h, int channels,
                  std::span<const double> kernel_half);  // kernel_half: center..edge

  // Raw node insertion used by the rasterizer (lives in rasterizer.cpp).
  ValueRef raster_node(std::span<const ValueRef> inputs, int rows, int cols,
                       std::unique_ptr<OpCtx> ctx);

  void backward(ValueRef loss);

  int size() const { return static_cast<int>(nodes_.size()); }
  int rows(ValueRef r) const { return node(r).rows; }
  int cols(ValueRef r) const { return node(r).cols; }
  std::span<const double> val(ValueRef r) const { return node(r).data; }
  std::span<const double> grad(ValueRef r) const;
  double scalar(ValueRef r) const;
  Op op(ValueRef r) const { return node(r).op; }
  OpCtx* ctx(ValueRef r);

 private:
  friend struct RasterBackward;
  detail::Node& node(ValueRef r);
  const detail::Node& node(ValueRef r) const;
  ValueRef push(detail::Node n);
  ValueRef unary(Op op, ValueRef a);
  ValueRef binary(Op op, ValueRef a, ValueRef b);
  void forward_node(detail::Node& n);
  void backward_node(detail::Node& n);

  std::vector<detail::Node> nodes_;
  std::vector<std::vector<int>> index_sets_;
  std::vector<std::vector<double>> const_sets_;
  std::vector<std::unique_ptr<OpCtx>> ctxs_;
  bool grads_ready_ = false;
};

}  // namespace dgtraj
