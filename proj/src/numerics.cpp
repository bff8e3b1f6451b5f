#include "mlmem/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numeric>
#include <sstream>

namespace mlmem {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Real>
Tensor<Real>::Tensor(Shape s, std::vector<Real> d, bool with_grad)
    : shape(std::move(s)), data(std::move(d)), requires_grad(with_grad) {
  for (auto dim : shape)
    if (dim == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(shape));
  if (numel(shape) != data.size())
    throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_string(shape));
  if (requires_grad) grad.assign(data.size(), Real(0));
}

template <typename Real>
Tensor<Real> Tensor<Real>::zeros(Shape s, bool with_grad) {
  auto n = numel(s);
  return Tensor(std::move(s), std::vector<Real>(n, Real(0)), with_grad);
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  if (requires_grad) grad.assign(data.size(), Real(0));
}

template <typename Real>
std::vector<Real> softmax(std::span<const Real> scores) {
  if (scores.empty()) throw NumericError("empty distribution");
  Real mx = -std::numeric_limits<Real>::infinity();
  for (Real s : scores) {
    if (!std::isfinite(s)) throw NumericError("non-finite score");
    mx = std::max(mx, s);
  }
  std::vector<Real> out(scores.size());
  Real total = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - mx);
    total += out[i];
  }
  for (auto& p : out) p /= total;
  return out;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::Constant: return "constant";
    case Op::Param: return "param";
    case Op::Lookup: return "lookup";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::OneMinus: return "one_minus";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::LogFloor: return "log_floor";
    case Op::Softmax: return "softmax";
    case Op::SegmentSoftmax: return "segment_softmax";
    case Op::Concat: return "concat";
    case Op::StackRows: return "stack_rows";
    case Op::ConcatRows: return "concat_rows";
    case Op::Row: return "row";
    case Op::Linear: return "linear";
    case Op::MatVec: return "matvec";
    case Op::VecMat: return "vecmat";
    case Op::AddRow: return "add_row";
    case Op::ScaleBy: return "scale_by";
    case Op::Expand: return "expand";
    case Op::GatherSum: return "gather_sum";
    case Op::SegmentSum: return "segment_sum";
    case Op::Sum: return "sum";
    case Op::Dot: return "dot";
  }
  return "?";
}

namespace {

template <typename Real>
inline Real dot_n(const Real* a, const Real* b, std::size_t n) {
  // fixed blocking keeps the summation order (and so results) reproducible
  // while letting the compiler vectorize
  Real acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[i + k] * b[i + k];
  Real s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename Real>
inline void axpy_n(Real alpha, const Real* x, Real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// rows/cols of a rank-1 or rank-2 shape, vectors being a single row
inline std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
inline std::size_t cols_of(const Shape& s) { return s.size() == 2 ? s[1] : s[0]; }

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

// message built only on failure
template <std::invocable MakeMessage>
void require(bool ok, MakeMessage&& make) {
  if (!ok) throw ShapeError(make());
}

}  // namespace

template <typename Real>
const typename Tape<Real>::Node& Tape<Real>::node(Var v) const {
  if (v.id >= nodes_.size()) throw std::out_of_range("invalid tape variable");
  return nodes_[v.id];
}

template <typename Real>
typename Tape<Real>::Node& Tape<Real>::node(Var v) {
  if (v.id >= nodes_.size()) throw std::out_of_range("invalid tape variable");
  return nodes_[v.id];
}

template <typename Real>
Var Tape<Real>::push(Node n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename Real>
const Real* Tape<Real>::value_ptr(std::uint32_t id) const {
  const Node& n = nodes_[id];
  if (n.op == Op::Param) return n.tensor->data.data();
  return n.value.data();
}

template <typename Real>
Real* Tape<Real>::grad_ptr(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.op == Op::Param) return n.tensor->grad.data();
  if (n.grad.empty()) n.grad.assign(numel(n.shape), Real(0));
  return n.grad.data();
}

template <typename Real>
bool Tape<Real>::any_needs_grad(std::span<const std::uint32_t> ids) const {
  for (auto id : ids)
    if (nodes_[id].needs_grad) return true;
  return false;
}

template <typename Real>
std::span<const Real> Tape<Real>::value(Var v) const {
  const Node& n = node(v);
  return {value_ptr(v.id), numel(n.shape)};
}

template <typename Real>
Real Tape<Real>::scalar(Var v) const {
  const Node& n = node(v);
  if (numel(n.shape) != 1) throw ShapeError("scalar() on node of shape " + shape_string(n.shape));
  return value_ptr(v.id)[0];
}

template <typename Real>
std::span<const Real> Tape<Real>::grad(Var v) const {
  const Node& n = node(v);
  if (n.op == Op::Param) return n.tensor->grad;
  return n.grad;
}

template <typename Real>
Var Tape<Real>::constant(Shape shape, std::vector<Real> values) {
  require(!shape.empty() && shape.size() <= 2, "constant: rank must be 1 or 2");
  require(numel(shape) == values.size(), [&] { return "constant: data length does not match " + shape_string(shape); });
  Node n;
  n.op = Op::Constant;
  n.shape = std::move(shape);
  n.value = std::move(values);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::zeros(Shape shape) {
  auto count = numel(shape);
  return constant(std::move(shape), std::vector<Real>(count, Real(0)));
}

template <typename Real>
Var Tape<Real>::param(Tensor<Real>& tensor) {
  require(!tensor.shape.empty() && tensor.shape.size() <= 2, "param: rank must be 1 or 2");
  require(numel(tensor.shape) == tensor.data.size(), "param: inconsistent tensor");
  if (tensor.requires_grad && tensor.grad.size() != tensor.data.size())
    tensor.grad.assign(tensor.data.size(), Real(0));
  Node n;
  n.op = Op::Param;
  n.shape = tensor.shape;
  n.tensor = &tensor;
  n.needs_grad = tensor.requires_grad;
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::lookup(Tensor<Real>& table, std::span<const std::size_t> ids) {
  require(table.shape.size() == 2, "lookup: table must be a matrix");
  require(!ids.empty(), "lookup: no ids");
  if (table.requires_grad && table.grad.size() != table.data.size())
    table.grad.assign(table.data.size(), Real(0));
  const std::size_t dim = table.shape[1];
  Node n;
  n.op = Op::Lookup;
  n.shape = {ids.size(), dim};
  n.tensor = &table;
  n.aux.assign(ids.begin(), ids.end());
  n.value.resize(ids.size() * dim);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= table.shape[0]) throw std::out_of_range("lookup: id out of range");
    std::copy_n(table.data.begin() + ids[r] * dim, dim, n.value.begin() + r * dim);
  }
  n.needs_grad = table.requires_grad;
  return push(std::move(n));
}

#define MLMEM_UNARY_PREAMBLE(NAME)            \
  const Node& in = node(a);                   \
  Node n;                                     \
  n.op = NAME;                                \
  n.shape = in.shape;                         \
  n.inputs = {a.id};                          \
  n.needs_grad = in.needs_grad;               \
  const std::size_t count = numel(in.shape);  \
  const Real* x = value_ptr(a.id);            \
  n.value.resize(count);

template <typename Real>
Var Tape<Real>::add(Var a, Var b) {
  require(node(a).shape == node(b).shape,
          [&] { return "add: shape mismatch " + shape_string(node(a).shape) + " vs " + shape_string(node(b).shape); });
  MLMEM_UNARY_PREAMBLE(Op::Add)
  n.inputs = {a.id, b.id};
  n.needs_grad = in.needs_grad || node(b).needs_grad;
  const Real* y = value_ptr(b.id);
  for (std::size_t i = 0; i < count; ++i) n.value[i] = x[i] + y[i];
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::sub(Var a, Var b) {
  require(node(a).shape == node(b).shape,
          [&] { return "sub: shape mismatch " + shape_string(node(a).shape) + " vs " + shape_string(node(b).shape); });
  MLMEM_UNARY_PREAMBLE(Op::Sub)
  n.inputs = {a.id, b.id};
  n.needs_grad = in.needs_grad || node(b).needs_grad;
  const Real* y = value_ptr(b.id);
  for (std::size_t i = 0; i < count; ++i) n.value[i] = x[i] - y[i];
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::mul(Var a, Var b) {
  require(node(a).shape == node(b).shape,
          [&] { return "mul: shape mismatch " + shape_string(node(a).shape) + " vs " + shape_string(node(b).shape); });
  MLMEM_UNARY_PREAMBLE(Op::Mul)
  n.inputs = {a.id, b.id};
  n.needs_grad = in.needs_grad || node(b).needs_grad;
  const Real* y = value_ptr(b.id);
  for (std::size_t i = 0; i < count; ++i) n.value[i] = x[i] * y[i];
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::scale(Var a, Real factor) {
  MLMEM_UNARY_PREAMBLE(Op::Scale)
  n.factor = factor;
  for (std::size_t i = 0; i < count; ++i) n.value[i] = factor * x[i];
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::one_minus(Var a) {
  MLMEM_UNARY_PREAMBLE(Op::OneMinus)
  for (std::size_t i = 0; i < count; ++i) n.value[i] = Real(1) - x[i];
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::tanh(Var a) {
  MLMEM_UNARY_PREAMBLE(Op::Tanh)
  for (std::size_t i = 0; i < count; ++i) n.value[i] = std::tanh(x[i]);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::sigmoid(Var a) {
  MLMEM_UNARY_PREAMBLE(Op::Sigmoid)
  for (std::size_t i = 0; i < count; ++i) {
    // split by sign so exp never overflows
    if (x[i] >= 0) {
      n.value[i] = Real(1) / (Real(1) + std::exp(-x[i]));
    } else {
      Real e = std::exp(x[i]);
      n.value[i] = e / (Real(1) + e);
    }
  }
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::log_floor(Var a, Real floor) {
  MLMEM_UNARY_PREAMBLE(Op::LogFloor)
  n.factor = floor;
  for (std::size_t i = 0; i < count; ++i) n.value[i] = std::log(std::max(x[i], floor));
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::softmax(Var a) {
  require(node(a).shape.size() == 1, "softmax: expects a vector");
  MLMEM_UNARY_PREAMBLE(Op::Softmax)
  n.value = mlmem::softmax<Real>(std::span<const Real>(x, count));
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::segment_softmax(Var a, std::vector<std::size_t> sizes) {
  require(node(a).shape.size() == 1, "segment_softmax: expects a vector");
  MLMEM_UNARY_PREAMBLE(Op::SegmentSoftmax)
  require(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == count,
          "segment_softmax: segment sizes do not cover input");
  std::size_t off = 0;
  for (auto len : sizes) {
    if (len == 0) throw NumericError("empty distribution");
    auto seg = mlmem::softmax<Real>(std::span<const Real>(x + off, len));
    std::copy(seg.begin(), seg.end(), n.value.begin() + off);
    off += len;
  }
  n.aux = std::move(sizes);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::concat(std::span<const Var> parts) {
  require(!parts.empty(), "concat: no inputs");
  Node n;
  n.op = Op::Concat;
  std::size_t total = 0;
  for (auto p : parts) {
    require(node(p).shape.size() == 1, [&] { return "concat: expects vectors, got " + shape_string(node(p).shape); });
    total += node(p).shape[0];
    n.inputs.push_back(p.id);
  }
  n.shape = {total};
  n.value.reserve(total);
  for (auto p : parts) {
    const Real* x = value_ptr(p.id);
    n.value.insert(n.value.end(), x, x + node(p).shape[0]);
  }
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::stack_rows(std::span<const Var> rows) {
  require(!rows.empty(), "stack_rows: no inputs");
  const Shape& first = node(rows[0]).shape;
  require(first.size() == 1, "stack_rows: expects vectors");
  Node n;
  n.op = Op::StackRows;
  n.shape = {rows.size(), first[0]};
  n.value.reserve(rows.size() * first[0]);
  for (auto r : rows) {
    require(node(r).shape == first, "stack_rows: row shape mismatch");
    n.inputs.push_back(r.id);
    const Real* x = value_ptr(r.id);
    n.value.insert(n.value.end(), x, x + first[0]);
  }
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::concat_rows(std::span<const Var> blocks) {
  require(!blocks.empty(), "concat_rows: no inputs");
  const std::size_t width = cols_of(node(blocks[0]).shape);
  Node n;
  n.op = Op::ConcatRows;
  std::size_t total_rows = 0;
  for (auto b : blocks) {
    const Shape& s = node(b).shape;
    require(s.size() == 2 && s[1] == width, "concat_rows: width mismatch");
    total_rows += s[0];
    n.inputs.push_back(b.id);
  }
  n.shape = {total_rows, width};
  n.value.reserve(total_rows * width);
  for (auto b : blocks) {
    const Real* x = value_ptr(b.id);
    n.value.insert(n.value.end(), x, x + numel(node(b).shape));
  }
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::row(Var m, std::size_t index) {
  const Shape& s = node(m).shape;
  require(s.size() == 2, "row: expects a matrix");
  if (index >= s[0]) throw std::out_of_range("row: index out of range");
  Node n;
  n.op = Op::Row;
  n.shape = {s[1]};
  n.inputs = {m.id};
  n.aux = {index};
  const Real* x = value_ptr(m.id) + index * s[1];
  n.value.assign(x, x + s[1]);
  n.needs_grad = node(m).needs_grad;
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::linear(Var x, Var w, std::size_t col_offset) {
  const Shape& xs = node(x).shape;
  const Shape& ws = node(w).shape;
  require(ws.size() == 2, "linear: weight must be a matrix");
  const std::size_t k = cols_of(xs);
  const std::size_t rows = rows_of(xs);
  const std::size_t out = ws[0];
  const std::size_t in = ws[1];
  require(col_offset + k <= in, [&] { return "linear: input width " + std::to_string(k) + " at offset " +
                                    std::to_string(col_offset) + " exceeds weight " + shape_string(ws); });
  Node n;
  n.op = Op::Linear;
  n.shape = xs.size() == 2 ? Shape{rows, out} : Shape{out};
  n.inputs = {x.id, w.id};
  n.aux = {col_offset};
  n.value.resize(rows * out);
  const Real* xv = value_ptr(x.id);
  const Real* wv = value_ptr(w.id);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < out; ++o)
      n.value[r * out + o] = dot_n(xv + r * k, wv + o * in + col_offset, k);
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::matvec(Var m, Var v) {
  const Shape& ms = node(m).shape;
  const Shape& vs = node(v).shape;
  require(ms.size() == 2 && vs.size() == 1 && ms[1] == vs[0],
          [&] { return "matvec: shape mismatch " + shape_string(ms) + " * " + shape_string(vs); });
  Node n;
  n.op = Op::MatVec;
  n.shape = {ms[0]};
  n.inputs = {m.id, v.id};
  n.value.resize(ms[0]);
  const Real* mv = value_ptr(m.id);
  const Real* vv = value_ptr(v.id);
  for (std::size_t r = 0; r < ms[0]; ++r) n.value[r] = dot_n(mv + r * ms[1], vv, ms[1]);
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::vecmat(Var a, Var m) {
  const Shape& as = node(a).shape;
  const Shape& ms = node(m).shape;
  require(ms.size() == 2 && as.size() == 1 && ms[0] == as[0],
          [&] { return "vecmat: shape mismatch " + shape_string(as) + " * " + shape_string(ms); });
  Node n;
  n.op = Op::VecMat;
  n.shape = {ms[1]};
  n.inputs = {a.id, m.id};
  n.value.assign(ms[1], Real(0));
  const Real* av = value_ptr(a.id);
  const Real* mv = value_ptr(m.id);
  for (std::size_t r = 0; r < ms[0]; ++r) axpy_n(av[r], mv + r * ms[1], n.value.data(), ms[1]);
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::add_row(Var m, Var v) {
  const Shape& ms = node(m).shape;
  const Shape& vs = node(v).shape;
  require(ms.size() == 2 && vs.size() == 1 && ms[1] == vs[0],
          [&] { return "add_row: shape mismatch " + shape_string(ms) + " + " + shape_string(vs); });
  Node n;
  n.op = Op::AddRow;
  n.shape = ms;
  n.inputs = {m.id, v.id};
  n.value.resize(numel(ms));
  const Real* mv = value_ptr(m.id);
  const Real* vv = value_ptr(v.id);
  for (std::size_t r = 0; r < ms[0]; ++r)
    for (std::size_t c = 0; c < ms[1]; ++c) n.value[r * ms[1] + c] = mv[r * ms[1] + c] + vv[c];
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::scale_by(Var v, Var s) {
  require(numel(node(s).shape) == 1, "scale_by: factor must be a scalar");
  Node n;
  n.op = Op::ScaleBy;
  n.shape = node(v).shape;
  n.inputs = {v.id, s.id};
  const std::size_t count = numel(n.shape);
  const Real* x = value_ptr(v.id);
  const Real f = value_ptr(s.id)[0];
  n.value.resize(count);
  for (std::size_t i = 0; i < count; ++i) n.value[i] = f * x[i];
  n.needs_grad = any_needs_grad(n.inputs);
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::expand(Var v, std::vector<std::size_t> sizes) {
  const Shape& vs = node(v).shape;
  require(vs.size() == 1 && vs[0] == sizes.size(), "expand: one size per element required");
  const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  require(total > 0, "expand: empty result");
  Node n;
  n.op = Op::Expand;
  n.shape = {total};
  n.inputs = {v.id};
  n.value.reserve(total);
  const Real* x = value_ptr(v.id);
  for (std::size_t i = 0; i < sizes.size(); ++i) n.value.insert(n.value.end(), sizes[i], x[i]);
  n.aux = std::move(sizes);
  n.needs_grad = node(v).needs_grad;
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::gather_sum(Var v, std::vector<std::size_t> indices) {
  const std::size_t count = numel(node(v).shape);
  Node n;
  n.op = Op::GatherSum;
  n.shape = {1};
  n.inputs = {v.id};
  const Real* x = value_ptr(v.id);
  Real s = 0;
  for (auto i : indices) {
    if (i >= count) throw std::out_of_range("gather_sum: index out of range");
    s += x[i];
  }
  n.value = {s};
  n.aux = std::move(indices);
  n.needs_grad = node(v).needs_grad;
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::segment_sum(Var m, std::vector<std::size_t> sizes, bool mean) {
  const Shape& ms = node(m).shape;
  require(ms.size() == 2, "segment_sum: expects a matrix");
  require(!sizes.empty(), "segment_sum: no segments");
  require(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) == ms[0],
          "segment_sum: segment sizes do not cover input rows");
  const std::size_t width = ms[1];
  Node n;
  n.op = Op::SegmentSum;
  n.shape = {sizes.size(), width};
  n.inputs = {m.id};
  n.factor = mean ? Real(1) : Real(0);
  n.value.assign(sizes.size() * width, Real(0));
  const Real* x = value_ptr(m.id);
  std::size_t r = 0;
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    Real* out = n.value.data() + s * width;
    for (std::size_t k = 0; k < sizes[s]; ++k, ++r) axpy_n(Real(1), x + r * width, out, width);
    if (mean && sizes[s] > 0)
      for (std::size_t c = 0; c < width; ++c) out[c] /= static_cast<Real>(sizes[s]);
  }
  n.aux = std::move(sizes);
  n.needs_grad = node(m).needs_grad;
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::sum(Var a) {
  MLMEM_UNARY_PREAMBLE(Op::Sum)
  n.shape = {1};
  Real s = 0;
  for (std::size_t i = 0; i < count; ++i) s += x[i];
  n.value = {s};
  return push(std::move(n));
}

template <typename Real>
Var Tape<Real>::dot(Var a, Var b) {
  require(node(a).shape == node(b).shape, "dot: shape mismatch");
  MLMEM_UNARY_PREAMBLE(Op::Dot)
  n.shape = {1};
  n.inputs = {a.id, b.id};
  n.needs_grad = in.needs_grad || node(b).needs_grad;
  n.value = {dot_n(x, value_ptr(b.id), count)};
  return push(std::move(n));
}

#undef MLMEM_UNARY_PREAMBLE

template <typename Real>
void Tape<Real>::backward(Var loss) {
  Node& root = node(loss);
  if (numel(root.shape) != 1) throw ShapeError("backward: loss must be a scalar, got " + shape_string(root.shape));
  for (auto& n : nodes_)
    if (n.op != Op::Param) n.grad.clear();
  if (!root.needs_grad) return;
  grad_ptr(loss.id)[0] += Real(1);
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.op == Op::Param || n.grad.empty()) continue;
    backward_node(id);
  }
}

template <typename Real>
void Tape<Real>::backward_node(std::uint32_t id) {
  // References into nodes_ stay valid: backward never appends nodes.
  Node& n = nodes_[id];
  const Real* g = n.grad.data();
  const std::size_t count = numel(n.shape);
  auto wants = [&](std::size_t k) { return nodes_[n.inputs[k]].needs_grad; };

  switch (n.op) {
    case Op::Constant:
    case Op::Param:
      break;
    case Op::Lookup: {
      Tensor<Real>& table = *n.tensor;
      if (!table.requires_grad) break;
      const std::size_t dim = table.shape[1];
      for (std::size_t r = 0; r < n.aux.size(); ++r) axpy_n(Real(1), g + r * dim, table.grad.data() + n.aux[r] * dim, dim);
      break;
    }
    case Op::Add:
    case Op::Sub: {
      if (wants(0)) axpy_n(Real(1), g, grad_ptr(n.inputs[0]), count);
      if (wants(1)) axpy_n(n.op == Op::Add ? Real(1) : Real(-1), g, grad_ptr(n.inputs[1]), count);
      break;
    }
    case Op::Mul: {
      const Real* a = value_ptr(n.inputs[0]);
      const Real* b = value_ptr(n.inputs[1]);
      if (wants(0)) {
        Real* ga = grad_ptr(n.inputs[0]);
        for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * b[i];
      }
      if (wants(1)) {
        Real* gb = grad_ptr(n.inputs[1]);
        for (std::size_t i = 0; i < count; ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case Op::Scale:
      axpy_n(n.factor, g, grad_ptr(n.inputs[0]), count);
      break;
    case Op::OneMinus:
      axpy_n(Real(-1), g, grad_ptr(n.inputs[0]), count);
      break;
    case Op::Tanh: {
      Real* ga = grad_ptr(n.inputs[0]);
      for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * (Real(1) - n.value[i] * n.value[i]);
      break;
    }
    case Op::Sigmoid: {
      Real* ga = grad_ptr(n.inputs[0]);
      for (std::size_t i = 0; i < count; ++i) ga[i] += g[i] * n.value[i] * (Real(1) - n.value[i]);
      break;
    }
    case Op::LogFloor: {
      const Real* x = value_ptr(n.inputs[0]);
      Real* ga = grad_ptr(n.inputs[0]);
      for (std::size_t i = 0; i < count; ++i)
        if (x[i] > n.factor) ga[i] += g[i] / x[i];
      break;
    }
    case Op::Softmax: {
      Real inner = dot_n(g, n.value.data(), count);
      Real* ga = grad_ptr(n.inputs[0]);
      for (std::size_t i = 0; i < count; ++i) ga[i] += n.value[i] * (g[i] - inner);
      break;
    }
    case Op::SegmentSoftmax: {
      Real* ga = grad_ptr(n.inputs[0]);
      std::size_t off = 0;
      for (auto len : n.aux) {
        Real inner = dot_n(g + off, n.value.data() + off, len);
        for (std::size_t i = off; i < off + len; ++i) ga[i] += n.value[i] * (g[i] - inner);
        off += len;
      }
      break;
    }
    case Op::Concat:
    case Op::StackRows:
    case Op::ConcatRows: {
      std::size_t off = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const std::size_t len = numel(nodes_[n.inputs[k]].shape);
        if (wants(k)) axpy_n(Real(1), g + off, grad_ptr(n.inputs[k]), len);
        off += len;
      }
      break;
    }
    case Op::Row: {
      const std::size_t width = n.shape[0];
      axpy_n(Real(1), g, grad_ptr(n.inputs[0]) + n.aux[0] * width, width);
      break;
    }
    case Op::Linear: {
      const Shape& xs = nodes_[n.inputs[0]].shape;
      const Shape& ws = nodes_[n.inputs[1]].shape;
      const std::size_t k = cols_of(xs);
      const std::size_t rows = rows_of(xs);
      const std::size_t out = ws[0];
      const std::size_t in = ws[1];
      const std::size_t off = n.aux[0];
      const Real* xv = value_ptr(n.inputs[0]);
      const Real* wv = value_ptr(n.inputs[1]);
      if (wants(0)) {
        Real* gx = grad_ptr(n.inputs[0]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < out; ++o) axpy_n(g[r * out + o], wv + o * in + off, gx + r * k, k);
      }
      if (wants(1)) {
        Real* gw = grad_ptr(n.inputs[1]);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t o = 0; o < out; ++o) axpy_n(g[r * out + o], xv + r * k, gw + o * in + off, k);
      }
      break;
    }
    case Op::MatVec: {
      const Shape& ms = nodes_[n.inputs[0]].shape;
      const Real* mv = value_ptr(n.inputs[0]);
      const Real* vv = value_ptr(n.inputs[1]);
      if (wants(0)) {
        Real* gm = grad_ptr(n.inputs[0]);
        for (std::size_t r = 0; r < ms[0]; ++r) axpy_n(g[r], vv, gm + r * ms[1], ms[1]);
      }
      if (wants(1)) {
        Real* gv = grad_ptr(n.inputs[1]);
        for (std::size_t r = 0; r < ms[0]; ++r) axpy_n(g[r], mv + r * ms[1], gv, ms[1]);
      }
      break;
    }
    case Op::VecMat: {
      const Shape& ms = nodes_[n.inputs[1]].shape;
      const Real* av = value_ptr(n.inputs[0]);
      const Real* mv = value_ptr(n.inputs[1]);
      if (wants(0)) {
        Real* ga = grad_ptr(n.inputs[0]);
        for (std::size_t r = 0; r < ms[0]; ++r) ga[r] += dot_n(g, mv + r * ms[1], ms[1]);
      }
      if (wants(1)) {
        Real* gm = grad_ptr(n.inputs[1]);
        for (std::size_t r = 0; r < ms[0]; ++r) axpy_n(av[r], g, gm + r * ms[1], ms[1]);
      }
      break;
    }
    case Op::AddRow: {
      const std::size_t rows = n.shape[0], cols = n.shape[1];
      if (wants(0)) axpy_n(Real(1), g, grad_ptr(n.inputs[0]), count);
      if (wants(1)) {
        Real* gv = grad_ptr(n.inputs[1]);
        for (std::size_t r = 0; r < rows; ++r) axpy_n(Real(1), g + r * cols, gv, cols);
      }
      break;
    }
    case Op::ScaleBy: {
      const Real* x = value_ptr(n.inputs[0]);
      const Real f = value_ptr(n.inputs[1])[0];
      if (wants(0)) axpy_n(f, g, grad_ptr(n.inputs[0]), count);
      if (wants(1)) grad_ptr(n.inputs[1])[0] += dot_n(g, x, count);
      break;
    }
    case Op::Expand: {
      Real* ga = grad_ptr(n.inputs[0]);
      std::size_t off = 0;
      for (std::size_t i = 0; i < n.aux.size(); ++i) {
        for (std::size_t j = 0; j < n.aux[i]; ++j) ga[i] += g[off + j];
        off += n.aux[i];
      }
      break;
    }
    case Op::GatherSum: {
      Real* ga = grad_ptr(n.inputs[0]);
      for (auto i : n.aux) ga[i] += g[0];
      break;
    }
    case Op::SegmentSum: {
      const std::size_t width = n.shape[1];
      Real* ga = grad_ptr(n.inputs[0]);
      std::size_t r = 0;
      for (std::size_t s = 0; s < n.aux.size(); ++s) {
        const Real w = n.factor != Real(0) && n.aux[s] > 0 ? Real(1) / static_cast<Real>(n.aux[s]) : Real(1);
        for (std::size_t k = 0; k < n.aux[s]; ++k, ++r) axpy_n(w, g + s * width, ga + r * width, width);
      }
      break;
    }
    case Op::Sum: {
      Real* ga = grad_ptr(n.inputs[0]);
      const std::size_t len = numel(nodes_[n.inputs[0]].shape);
      for (std::size_t i = 0; i < len; ++i) ga[i] += g[0];
      break;
    }
    case Op::Dot: {
      const std::size_t len = numel(nodes_[n.inputs[0]].shape);
      const Real* a = value_ptr(n.inputs[0]);
      const Real* b = value_ptr(n.inputs[1]);
      if (wants(0)) axpy_n(g[0], b, grad_ptr(n.inputs[0]), len);
      if (wants(1)) axpy_n(g[0], a, grad_ptr(n.inputs[1]), len);
      break;
    }
  }
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const LossBuilder& build,
                           const std::vector<std::pair<std::string, Tensor<double>*>>& params,
                           double eps, std::size_t max_elements_per_tensor) {
  auto evaluate = [&]() {
    Tape<double> tape;
    Var loss = build(tape);
    return tape.scalar(loss);
  };

  for (auto& [name, t] : params) {
    t->requires_grad = true;
    t->grad.assign(t->data.size(), 0.0);
  }
  double base = 0.0;
  {
    Tape<double> tape;
    Var loss = build(tape);
    base = tape.scalar(loss);
    tape.backward(loss);
  }
  if (evaluate() != base) throw NumericError("grad_check: loss function is not deterministic");

  GradCheckResult result;
  for (auto& [name, t] : params) {
    const std::size_t n = t->data.size();
    std::size_t stride = 1;
    if (max_elements_per_tensor > 0 && n > max_elements_per_tensor)
      stride = (n + max_elements_per_tensor - 1) / max_elements_per_tensor;
    for (std::size_t i = 0; i < n; i += stride) {
      // five-point central stencil: truncation error O(eps^4), so eps can be
      // large enough that cancellation in the loss stays negligible
      const double saved = t->data[i];
      auto at = [&](double offset) {
        t->data[i] = saved + offset;
        return evaluate();
      };
      const double p2 = at(2.0 * eps), p1 = at(eps), m1 = at(-eps), m2 = at(-2.0 * eps);
      t->data[i] = saved;
      const double numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
      const double analytic = t->grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double diff = std::abs(analytic - numeric);
      // both sides below the guard: treat as agreement (dead parameter)
      const double err = (std::abs(analytic) < 1e-8 && std::abs(numeric) < 1e-8) ? 0.0 : diff / denom;
      ++result.checked;
      if (err > result.max_relative_error || result.worst_parameter.empty()) {
        result.max_relative_error = err;
        result.worst_parameter = name;
        result.worst_index = i;
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// GRU

template <typename Real>
GruVars bind_gru(Tape<Real>& tape, GruWeights<Real>& w) {
  GruVars v;
  v.w_z = tape.param(w.w_z);
  v.u_z = tape.param(w.u_z);
  v.b_z = tape.param(w.b_z);
  v.w_r = tape.param(w.w_r);
  v.u_r = tape.param(w.u_r);
  v.b_r = tape.param(w.b_r);
  v.w_n = tape.param(w.w_n);
  v.u_n = tape.param(w.u_n);
  v.b_n = tape.param(w.b_n);
  v.hidden_size = w.u_z.shape.at(0);
  v.input_size = w.w_z.shape.at(1);
  if (w.u_z.shape != Shape{v.hidden_size, v.hidden_size} || w.b_z.shape != Shape{v.hidden_size})
    throw ShapeError("bind_gru: inconsistent GRU weight shapes");
  return v;
}

template <typename Real>
Var gru_cell(Tape<Real>& tape, const GruVars& gru, Var x, Var h_prev) {
  if (tape.shape(x) != Shape{gru.input_size})
    throw ShapeError("gru_cell: input " + shape_string(tape.shape(x)) + " expected [" +
                     std::to_string(gru.input_size) + "]");
  if (tape.shape(h_prev) != Shape{gru.hidden_size})
    throw ShapeError("gru_cell: state " + shape_string(tape.shape(h_prev)) + " expected [" +
                     std::to_string(gru.hidden_size) + "]");
  Var z = tape.sigmoid(tape.add(tape.add(tape.linear(x, gru.w_z), tape.linear(h_prev, gru.u_z)), gru.b_z));
  Var r = tape.sigmoid(tape.add(tape.add(tape.linear(x, gru.w_r), tape.linear(h_prev, gru.u_r)), gru.b_r));
  Var cand = tape.tanh(
      tape.add(tape.add(tape.linear(x, gru.w_n), tape.linear(tape.mul(r, h_prev), gru.u_n)), gru.b_n));
  return tape.add(tape.mul(tape.one_minus(z), h_prev), tape.mul(z, cand));
}

template <typename Real>
GruInputProjection gru_project_inputs(Tape<Real>& tape, const GruVars& gru, Var x_rows) {
  const Shape& s = tape.shape(x_rows);
  if (s.size() != 2 || s[1] != gru.input_size)
    throw ShapeError("gru_project_inputs: inputs " + shape_string(s) + " expected [n x " +
                     std::to_string(gru.input_size) + "]");
  return {tape.add_row(tape.linear(x_rows, gru.w_z), gru.b_z), tape.add_row(tape.linear(x_rows, gru.w_r), gru.b_r),
          tape.add_row(tape.linear(x_rows, gru.w_n), gru.b_n)};
}

template <typename Real>
Var gru_step_projected(Tape<Real>& tape, const GruVars& gru, const GruInputProjection& proj, std::size_t t,
                       Var h_prev) {
  Var z = tape.sigmoid(tape.add(tape.row(proj.z, t), tape.linear(h_prev, gru.u_z)));
  Var r = tape.sigmoid(tape.add(tape.row(proj.r, t), tape.linear(h_prev, gru.u_r)));
  Var cand = tape.tanh(tape.add(tape.row(proj.n, t), tape.linear(tape.mul(r, h_prev), gru.u_n)));
  return tape.add(tape.mul(tape.one_minus(z), h_prev), tape.mul(z, cand));
}

#define MLMEM_INSTANTIATE(Real)                                                                        \
  template struct Tensor<Real>;                                                                        \
  template class Tape<Real>;                                                                           \
  template std::vector<Real> softmax<Real>(std::span<const Real>);                                     \
  template GruVars bind_gru<Real>(Tape<Real>&, GruWeights<Real>&);                                     \
  template Var gru_cell<Real>(Tape<Real>&, const GruVars&, Var, Var);                                  \
  template GruInputProjection gru_project_inputs<Real>(Tape<Real>&, const GruVars&, Var);              \
  template Var gru_step_projected<Real>(Tape<Real>&, const GruVars&, const GruInputProjection&, std::size_t, Var);

MLMEM_INSTANTIATE(float)
MLMEM_INSTANTIATE(double)

#undef MLMEM_INSTANTIATE

}  // namespace mlmem
