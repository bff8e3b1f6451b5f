#pragma once

// Dense tensors with a reverse-mode tape. Every model equation is composed
// from the primitives below; nothing here knows about dialogs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mlmem {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

template <typename Real>
struct Tensor {
  Shape shape;
  std::vector<Real> data;
  bool requires_grad = false;
  std::vector<Real> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<Real> d, bool with_grad = false);

  static Tensor zeros(Shape s, bool with_grad = false);

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  void zero_grad();

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    out.requires_grad = requires_grad;
    if (requires_grad) out.grad.assign(out.data.size(), Other(0));
    return out;
  }
};

/// Numerically stable softmax. Throws on empty or non-finite input.
template <typename Real>
std::vector<Real> softmax(std::span<const Real> scores);

/// Handle to a tape node. Only meaningful together with the tape that issued it.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

enum class Op : std::uint8_t {
  Constant,
  Param,
  Lookup,
  Add,
  Sub,
  Mul,
  Scale,
  OneMinus,
  Tanh,
  Sigmoid,
  LogFloor,
  Softmax,
  SegmentSoftmax,
  Concat,
  StackRows,
  ConcatRows,
  Row,
  Linear,
  MatVec,
  VecMat,
  AddRow,
  ScaleBy,
  Expand,
  GatherSum,
  SegmentSum,
  Sum,
  Dot,
};

const char* op_name(Op op);

/// Append-only computation record. Nodes are created in evaluation order, so
/// inputs always precede their consumers and backward is a reverse sweep.
///
/// Parameter leaves reference caller-owned tensors; their gradients are
/// accumulated (+=) straight into Tensor::grad when requires_grad is set.
template <typename Real>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Shape shape, std::vector<Real> values);
  Var zeros(Shape shape);
  Var param(Tensor<Real>& tensor);
  /// Gathers rows of a [n x dim] table; the result is [ids.size() x dim].
  Var lookup(Tensor<Real>& table, std::span<const std::size_t> ids);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, Real factor);
  Var one_minus(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  /// log(max(x, floor)); gradient is zero where the floor is active.
  Var log_floor(Var a, Real floor);
  Var softmax(Var a);
  /// Independent softmaxes over consecutive segments of a vector.
  Var segment_softmax(Var a, std::vector<std::size_t> sizes);
  Var concat(std::span<const Var> parts);
  Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }
  Var stack_rows(std::span<const Var> rows);
  Var concat_rows(std::span<const Var> blocks);
  Var row(Var m, std::size_t index);
  /// X W[:, offset:offset+k]^T for X of shape [n x k] or [k]; W is [out x in].
  Var linear(Var x, Var w, std::size_t col_offset = 0);
  Var matvec(Var m, Var v);
  Var vecmat(Var a, Var m);
  Var add_row(Var m, Var v);
  Var scale_by(Var v, Var s);
  /// Repeats element i of v sizes[i] times.
  Var expand(Var v, std::vector<std::size_t> sizes);
  Var gather_sum(Var v, std::vector<std::size_t> indices);
  /// Sums (or averages) consecutive row blocks of a [n x d] matrix into a
  /// [sizes.size() x d] matrix. Empty blocks give zero rows.
  Var segment_sum(Var m, std::vector<std::size_t> sizes, bool mean = false);
  Var sum(Var a);
  Var dot(Var a, Var b);

  std::span<const Real> value(Var v) const;
  const Shape& shape(Var v) const { return node(v).shape; }
  std::size_t size(Var v) const { return numel(node(v).shape); }
  Real scalar(Var v) const;
  /// Gradient buffer of a non-parameter node after backward (empty if unused).
  std::span<const Real> grad(Var v) const;

  Op op(Var v) const { return node(v).op; }
  std::span<const std::uint32_t> inputs(Var v) const { return node(v).inputs; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Reverse sweep from a scalar node. Parameter gradients accumulate.
  void backward(Var loss);

 private:
  struct Node {
    Op op = Op::Constant;
    Shape shape;
    std::vector<std::uint32_t> inputs;
    std::vector<std::size_t> aux;
    Real factor = Real(0);
    Tensor<Real>* tensor = nullptr;
    std::vector<Real> value;
    std::vector<Real> grad;
    bool needs_grad = false;
  };

  const Node& node(Var v) const;
  Node& node(Var v);
  Var push(Node n);
  const Real* value_ptr(std::uint32_t id) const;
  Real* grad_ptr(std::uint32_t id);
  bool any_needs_grad(std::span<const std::uint32_t> ids) const;
  void backward_node(std::uint32_t id);

  std::vector<Node> nodes_;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
};

/// Builds the scalar to differentiate on a fresh tape.
using LossBuilder = std::function<Var(Tape<double>&)>;

/// Five-point central-difference comparison of analytic gradients for every element of
/// every listed tensor. Relative error is |a - n| / max(|a|, |n|, 1e-8).
/// `max_elements_per_tensor` bounds the work on large tensors (0 = all),
/// sampling a deterministic stride through the tensor.
GradCheckResult grad_check(const LossBuilder& build,
                           const std::vector<std::pair<std::string, Tensor<double>*>>& params,
                           double eps = 1e-4, std::size_t max_elements_per_tensor = 0);

// ---------------------------------------------------------------------------
// GRU

/// Standard two-gate GRU:
///   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br)
///   n = tanh(Wn x + Un (r * h) + bn), h' = (1 - z) * h + z * n
template <typename Real>
struct GruWeights {
  Tensor<Real> w_z, u_z, b_z;
  Tensor<Real> w_r, u_r, b_r;
  Tensor<Real> w_n, u_n, b_n;
};

/// Tape handles for one GRU's weights.
struct GruVars {
  Var w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n;
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
};

template <typename Real>
GruVars bind_gru(Tape<Real>& tape, GruWeights<Real>& weights);

template <typename Real>
Var gru_cell(Tape<Real>& tape, const GruVars& gru, Var x, Var h_prev);

/// Input projections for a whole sequence X [len x input]: (Xz, Xr, Xn), biases included.
struct GruInputProjection {
  Var z, r, n;
};

template <typename Real>
GruInputProjection gru_project_inputs(Tape<Real>& tape, const GruVars& gru, Var x_rows);

/// One GRU step given row `t` of precomputed input projections.
template <typename Real>
Var gru_step_projected(Tape<Real>& tape, const GruVars& gru, const GruInputProjection& proj,
                       std::size_t t, Var h_prev);

}  // namespace mlmem
