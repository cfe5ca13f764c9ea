#include "sepvqa/num/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sepvqa::num {

std::string_view op_name(OpKind op) {
  switch (op) {
    case OpKind::Parameter: return "parameter";
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::AddRow: return "add_row";
    case OpKind::MulRow: return "mul_row";
    case OpKind::Scale: return "scale";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Transpose: return "transpose";
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Softmax: return "softmax";
    case OpKind::MaskedSoftmax: return "masked_softmax";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::LayerNorm: return "layernorm";
    case OpKind::L2Normalize: return "l2_normalize";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::MeanRows: return "mean_rows";
    case OpKind::SumAll: return "sum_all";
    case OpKind::Pick: return "pick";
    case OpKind::Custom: return "custom";
  }
  return "unknown";
}

GraphError::GraphError(const std::string& message, NodeId node, std::string node_label)
    : std::runtime_error("node " + std::to_string(node) + " (" + node_label + "): " + message),
      node_(node),
      node_label_(std::move(node_label)) {}

const Shape& Var::shape() const { return graph_->node(id_).shape; }
std::size_t Var::rows() const { return shape().size() >= 2 ? shape()[0] : 1; }
std::size_t Var::cols() const { return shape().back(); }

// ---------------------------------------------------------------------------
// Graph construction

std::string Graph::describe(NodeId id) const {
  const Node& n = nodes_.at(id);
  std::string text(op_name(n.op));
  if (n.op == OpKind::Custom && n.custom) text += ":" + n.custom->name;
  if (!n.label.empty()) text += " '" + n.label + "'";
  return text;
}

Var Graph::leaf(OpKind op, const std::string& name, Shape shape) {
  if (auto it = leaves_.find(name); it != leaves_.end()) {
    const Node& existing = nodes_[it->second];
    if (existing.op != op || existing.shape != shape) {
      throw GraphError("leaf '" + name + "' redeclared with a different kind or shape " + shape_string(shape),
                       it->second, describe(it->second));
    }
    return Var(this, it->second);
  }
  Node node;
  node.op = op;
  node.label = name;
  if (shape.empty() || std::find(shape.begin(), shape.end(), 0) != shape.end()) {
    throw GraphError("invalid leaf shape " + shape_string(shape), static_cast<NodeId>(nodes_.size()), name);
  }
  node.shape = std::move(shape);
  Var v = add(std::move(node));
  leaves_.emplace(name, v.id());
  if (op == OpKind::Parameter) parameters_.push_back(v.id());
  return v;
}

Var Graph::parameter(const std::string& name, Shape shape) { return leaf(OpKind::Parameter, name, std::move(shape)); }

Var Graph::input(const std::string& name, Shape shape) { return leaf(OpKind::Input, name, std::move(shape)); }

Var Graph::constant(Tensor value, std::string label) {
  Node node;
  node.op = OpKind::Constant;
  node.shape = value.shape();
  node.label = std::move(label);
  node.constant = std::move(value);
  return add(std::move(node));
}

Var Graph::custom(std::shared_ptr<const CustomOp> op, const std::vector<Var>& inputs, Shape shape) {
  Node node;
  node.op = OpKind::Custom;
  for (const Var& v : inputs) node.inputs.push_back(v.id());
  node.shape = std::move(shape);
  node.label = op ? op->name : std::string{};
  node.custom = std::move(op);
  if (!node.custom || !node.custom->forward) {
    throw GraphError("custom op without a forward rule", static_cast<NodeId>(nodes_.size()), "custom");
  }
  return add(std::move(node));
}

Var Graph::add(Node node) {
  const auto id = static_cast<NodeId>(nodes_.size());
  for (NodeId in : node.inputs) {
    if (in >= id) throw GraphError("input node " + std::to_string(in) + " does not precede it", id, std::string(op_name(node.op)));
  }
  nodes_.push_back(std::move(node));
  return Var(this, id);
}

void Graph::set_label(Var v, std::string label) { nodes_.at(v.id()).label = std::move(label); }

void Graph::mark_output(const std::string& name, Var v) { outputs_.emplace_back(name, v.id()); }

// ---------------------------------------------------------------------------
// Op builders

namespace {

bool is_matrix(const Shape& s) { return s.size() == 2; }

[[noreturn]] void shape_fail(Graph& g, OpKind op, const std::string& detail) {
  throw GraphError("shape mismatch: " + detail, static_cast<NodeId>(g.size()), std::string(op_name(op)));
}

Node node_of(OpKind op, std::vector<NodeId> inputs, Shape shape) {
  Node node;
  node.op = op;
  node.inputs = std::move(inputs);
  node.shape = std::move(shape);
  return node;
}

Var make(Graph& g, OpKind op, std::vector<NodeId> inputs, Shape shape) {
  return g.add(node_of(op, std::move(inputs), std::move(shape)));
}

Graph& same_graph(Var a, Var b) {
  if (&a.graph() != &b.graph()) throw GraphError("operands belong to different graphs", 0, "graph");
  return a.graph();
}

Var elementwise(OpKind op, Var a, Var b) {
  Graph& g = same_graph(a, b);
  if (a.shape() != b.shape()) shape_fail(g, op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  return make(g, op, {a.id(), b.id()}, a.shape());
}

Var unary(OpKind op, Var x) { return make(x.graph(), op, {x.id()}, x.shape()); }

Var unary_matrix(OpKind op, Var x) {
  if (!is_matrix(x.shape())) shape_fail(x.graph(), op, "expected a matrix, got " + shape_string(x.shape()));
  return unary(op, x);
}

Var row_broadcast(OpKind op, Var x, Var row) {
  Graph& g = same_graph(x, row);
  if (!is_matrix(x.shape()) || row.shape() != Shape{1, x.cols()}) {
    shape_fail(g, op, shape_string(x.shape()) + " with row " + shape_string(row.shape()));
  }
  return make(g, op, {x.id(), row.id()}, x.shape());
}

}  // namespace

Var operator+(Var a, Var b) { return elementwise(OpKind::Add, a, b); }
Var operator-(Var a, Var b) { return elementwise(OpKind::Sub, a, b); }
Var operator*(Var a, Var b) { return elementwise(OpKind::Mul, a, b); }

Var scale(Var x, double factor) {
  Node n = node_of(OpKind::Scale, {x.id()}, x.shape());
  n.scalar = factor;
  return x.graph().add(std::move(n));
}

Var add_row(Var x, Var row) { return row_broadcast(OpKind::AddRow, x, row); }
Var mul_row(Var x, Var row) { return row_broadcast(OpKind::MulRow, x, row); }

Var matmul(Var a, Var b) {
  Graph& g = same_graph(a, b);
  if (!is_matrix(a.shape()) || !is_matrix(b.shape()) || a.cols() != b.rows()) {
    shape_fail(g, OpKind::MatMul, shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  return make(g, OpKind::MatMul, {a.id(), b.id()}, {a.rows(), b.cols()});
}

Var matmul_nt(Var a, Var b) {
  Graph& g = same_graph(a, b);
  if (!is_matrix(a.shape()) || !is_matrix(b.shape()) || a.cols() != b.cols()) {
    shape_fail(g, OpKind::MatMulNT, shape_string(a.shape()) + " x " + shape_string(b.shape()) + "^T");
  }
  return make(g, OpKind::MatMulNT, {a.id(), b.id()}, {a.rows(), b.rows()});
}

Var transpose(Var x) {
  if (!is_matrix(x.shape())) shape_fail(x.graph(), OpKind::Transpose, shape_string(x.shape()));
  return make(x.graph(), OpKind::Transpose, {x.id()}, {x.cols(), x.rows()});
}

Var relu(Var x) { return unary(OpKind::Relu, x); }
Var tanh(Var x) { return unary(OpKind::Tanh, x); }
Var sigmoid(Var x) { return unary(OpKind::Sigmoid, x); }
Var softmax_rows(Var x) { return unary_matrix(OpKind::Softmax, x); }
Var log_softmax_rows(Var x) { return unary_matrix(OpKind::LogSoftmax, x); }

Var masked_softmax_rows(Var x, std::vector<std::uint8_t> mask) {
  Graph& g = x.graph();
  if (!is_matrix(x.shape()) || mask.size() != x.rows() * x.cols()) {
    shape_fail(g, OpKind::MaskedSoftmax, "mask of " + std::to_string(mask.size()) + " entries for " + shape_string(x.shape()));
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto* row = mask.data() + r * x.cols();
    if (std::none_of(row, row + x.cols(), [](std::uint8_t m) { return m != 0; })) {
      shape_fail(g, OpKind::MaskedSoftmax, "row " + std::to_string(r) + " of the mask allows nothing");
    }
  }
  Node n = node_of(OpKind::MaskedSoftmax, {x.id()}, x.shape());
  n.mask = std::move(mask);
  return g.add(std::move(n));
}

Var layernorm_rows(Var x, double eps) {
  if (!is_matrix(x.shape())) shape_fail(x.graph(), OpKind::LayerNorm, "expected a matrix, got " + shape_string(x.shape()));
  Node n = node_of(OpKind::LayerNorm, {x.id()}, x.shape());
  n.scalar = eps;
  return x.graph().add(std::move(n));
}

Var l2_normalize_rows(Var x) { return unary_matrix(OpKind::L2Normalize, x); }

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  Graph& g = x.graph();
  if (!is_matrix(x.shape()) || count == 0 || begin + count > x.rows()) {
    shape_fail(g, OpKind::SliceRows, "rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + shape_string(x.shape()));
  }
  Node n = node_of(OpKind::SliceRows, {x.id()}, {count, x.cols()});
  n.offset = begin;
  n.extent = count;
  return g.add(std::move(n));
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Graph& g = x.graph();
  if (!is_matrix(x.shape()) || count == 0 || begin + count > x.cols()) {
    shape_fail(g, OpKind::SliceCols, "cols [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " + shape_string(x.shape()));
  }
  Node n = node_of(OpKind::SliceCols, {x.id()}, {x.rows(), count});
  n.offset = begin;
  n.extent = count;
  return g.add(std::move(n));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw GraphError("concat of nothing", 0, "concat_rows");
  Graph& g = parts.front().graph();
  std::size_t rows = 0;
  std::vector<NodeId> ids;
  for (const Var& p : parts) {
    if (!is_matrix(p.shape()) || p.cols() != parts.front().cols()) {
      shape_fail(g, OpKind::ConcatRows, shape_string(p.shape()) + " vs " + shape_string(parts.front().shape()));
    }
    rows += p.rows();
    ids.push_back(p.id());
  }
  return make(g, OpKind::ConcatRows, std::move(ids), {rows, parts.front().cols()});
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw GraphError("concat of nothing", 0, "concat_cols");
  Graph& g = parts.front().graph();
  std::size_t cols = 0;
  std::vector<NodeId> ids;
  for (const Var& p : parts) {
    if (!is_matrix(p.shape()) || p.rows() != parts.front().rows()) {
      shape_fail(g, OpKind::ConcatCols, shape_string(p.shape()) + " vs " + shape_string(parts.front().shape()));
    }
    cols += p.cols();
    ids.push_back(p.id());
  }
  return make(g, OpKind::ConcatCols, std::move(ids), {parts.front().rows(), cols});
}

Var gather_rows(Var table, std::vector<std::size_t> indices) {
  Graph& g = table.graph();
  if (!is_matrix(table.shape()) || indices.empty()) shape_fail(g, OpKind::GatherRows, shape_string(table.shape()));
  for (auto i : indices) {
    if (i >= table.rows()) {
      shape_fail(g, OpKind::GatherRows, "row index " + std::to_string(i) + " out of range for " + shape_string(table.shape()));
    }
  }
  Node n = node_of(OpKind::GatherRows, {table.id()}, {indices.size(), table.cols()});
  n.indices = std::move(indices);
  return g.add(std::move(n));
}

Var mean_rows(Var x) {
  if (!is_matrix(x.shape())) shape_fail(x.graph(), OpKind::MeanRows, shape_string(x.shape()));
  return make(x.graph(), OpKind::MeanRows, {x.id()}, {1, x.cols()});
}

Var sum_all(Var x) { return make(x.graph(), OpKind::SumAll, {x.id()}, {1}); }

Var pick(Var x, std::size_t r, std::size_t c) {
  Graph& g = x.graph();
  const std::size_t rows = x.rows();
  const std::size_t cols = x.cols();
  if (r >= rows || c >= cols) {
    shape_fail(g, OpKind::Pick, "(" + std::to_string(r) + ", " + std::to_string(c) + ") of " + shape_string(x.shape()));
  }
  Node n = node_of(OpKind::Pick, {x.id()}, {1});
  n.offset = r;
  n.extent = c;
  return g.add(std::move(n));
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

std::size_t rows_of(const Tensor& t) { return t.rank() >= 2 ? t.shape()[0] : 1; }

// c += a · b, a: m×k, b: k×n
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c += aᵀ · b, a: m×k, b: m×n, c: k×n
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

double dot(const double* x, const double* y, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += x[i] * y[i];
    s1 += x[i + 1] * y[i + 1];
    s2 += x[i + 2] * y[i + 2];
    s3 += x[i + 3] * y[i + 3];
  }
  for (; i < n; ++i) s0 += x[i] * y[i];
  return (s0 + s1) + (s2 + s3);
}

Tensor transposed(const Tensor& x) {
  const std::size_t r = rows_of(x), c = x.cols();
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return out;
}

void softmax_row(const double* x, const std::uint8_t* mask, double* y, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (!mask || mask[j]) mx = std::max(mx, x[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    y[j] = (!mask || mask[j]) ? std::exp(x[j] - mx) : 0.0;
    total += y[j];
  }
  const double inv = 1.0 / total;
  for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
}

Tensor forward(const Graph& graph, NodeId id, const Node& n, const std::vector<const Tensor*>& v) {
  auto in = [&](std::size_t k) -> const Tensor& { return *v[n.inputs[k]]; };
  Tensor out(n.shape);
  double* o = out.data().data();
  const std::size_t size = out.size();
  switch (n.op) {
    case OpKind::Add: {
      const double *a = in(0).data().data(), *b = in(1).data().data();
      for (std::size_t i = 0; i < size; ++i) o[i] = a[i] + b[i];
      break;
    }
    case OpKind::Sub: {
      const double *a = in(0).data().data(), *b = in(1).data().data();
      for (std::size_t i = 0; i < size; ++i) o[i] = a[i] - b[i];
      break;
    }
    case OpKind::Mul: {
      const double *a = in(0).data().data(), *b = in(1).data().data();
      for (std::size_t i = 0; i < size; ++i) o[i] = a[i] * b[i];
      break;
    }
    case OpKind::AddRow:
    case OpKind::MulRow: {
      const double *x = in(0).data().data(), *r = in(1).data().data();
      const std::size_t cols = n.shape[1];
      for (std::size_t i = 0; i < size; i += cols)
        for (std::size_t j = 0; j < cols; ++j) o[i + j] = n.op == OpKind::AddRow ? x[i + j] + r[j] : x[i + j] * r[j];
      break;
    }
    case OpKind::Scale: {
      const double* x = in(0).data().data();
      for (std::size_t i = 0; i < size; ++i) o[i] = n.scalar * x[i];
      break;
    }
    case OpKind::MatMul: {
      const Tensor &a = in(0), &b = in(1);
      gemm_acc(a.data().data(), b.data().data(), o, rows_of(a), a.cols(), b.cols());
      break;
    }
    case OpKind::MatMulNT: {
      const Tensor &a = in(0), &b = in(1);
      const std::size_t m = rows_of(a), k = a.cols(), nn = rows_of(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < nn; ++j) o[i * nn + j] = dot(a.data().data() + i * k, b.data().data() + j * k, k);
      break;
    }
    case OpKind::Transpose: out = transposed(in(0)); break;
    case OpKind::Relu: {
      const double* x = in(0).data().data();
      for (std::size_t i = 0; i < size; ++i) o[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    }
    case OpKind::Tanh: {
      const double* x = in(0).data().data();
      for (std::size_t i = 0; i < size; ++i) o[i] = std::tanh(x[i]);
      break;
    }
    case OpKind::Sigmoid: {
      const double* x = in(0).data().data();
      for (std::size_t i = 0; i < size; ++i) o[i] = x[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-x[i])) : std::exp(x[i]) / (1.0 + std::exp(x[i]));
      break;
    }
    case OpKind::Softmax:
    case OpKind::MaskedSoftmax: {
      const double* x = in(0).data().data();
      const std::size_t cols = n.shape[1];
      for (std::size_t r = 0; r < n.shape[0]; ++r) {
        const std::uint8_t* mask = n.op == OpKind::MaskedSoftmax ? n.mask.data() + r * cols : nullptr;
        softmax_row(x + r * cols, mask, o + r * cols, cols);
      }
      break;
    }
    case OpKind::LogSoftmax: {
      const double* x = in(0).data().data();
      const std::size_t cols = n.shape[1];
      for (std::size_t r = 0; r < n.shape[0]; ++r) {
        const double* xr = x + r * cols;
        const double mx = *std::max_element(xr, xr + cols);
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) total += std::exp(xr[j] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t j = 0; j < cols; ++j) o[r * cols + j] = xr[j] - lse;
      }
      break;
    }
    case OpKind::LayerNorm: {
      const double* x = in(0).data().data();
      const std::size_t cols = n.shape[1];
      for (std::size_t r = 0; r < n.shape[0]; ++r) {
        const double* xr = x + r * cols;
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + n.scalar);
        for (std::size_t j = 0; j < cols; ++j) o[r * cols + j] = (xr[j] - mean) * inv;
      }
      break;
    }
    case OpKind::L2Normalize: {
      const double* x = in(0).data().data();
      const std::size_t cols = n.shape[1];
      for (std::size_t r = 0; r < n.shape[0]; ++r) {
        const double norm = std::sqrt(dot(x + r * cols, x + r * cols, cols));
        if (!(norm > 0.0)) throw GraphError("zero-norm row " + std::to_string(r) + " cannot be normalized", id, graph.describe(id));
        for (std::size_t j = 0; j < cols; ++j) o[r * cols + j] = x[r * cols + j] / norm;
      }
      break;
    }
    case OpKind::SliceRows: {
      const Tensor& x = in(0);
      std::copy_n(x.data().data() + n.offset * x.cols(), size, o);
      break;
    }
    case OpKind::SliceCols: {
      const Tensor& x = in(0);
      const std::size_t cols = x.cols();
      for (std::size_t r = 0; r < n.shape[0]; ++r) std::copy_n(x.data().data() + r * cols + n.offset, n.extent, o + r * n.extent);
      break;
    }
    case OpKind::ConcatRows: {
      std::size_t at = 0;
      for (NodeId p : n.inputs) {
        std::copy(v[p]->data().begin(), v[p]->data().end(), o + at);
        at += v[p]->size();
      }
      break;
    }
    case OpKind::ConcatCols: {
      const std::size_t cols = n.shape[1];
      std::size_t at = 0;
      for (NodeId p : n.inputs) {
        const Tensor& part = *v[p];
        const std::size_t pc = part.cols();
        for (std::size_t r = 0; r < n.shape[0]; ++r) std::copy_n(part.data().data() + r * pc, pc, o + r * cols + at);
        at += pc;
      }
      break;
    }
    case OpKind::GatherRows: {
      const Tensor& table = in(0);
      const std::size_t cols = table.cols();
      for (std::size_t r = 0; r < n.indices.size(); ++r) std::copy_n(table.data().data() + n.indices[r] * cols, cols, o + r * cols);
      break;
    }
    case OpKind::MeanRows: {
      const Tensor& x = in(0);
      const std::size_t rows = rows_of(x), cols = x.cols();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) o[j] += x[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) o[j] /= static_cast<double>(rows);
      break;
    }
    case OpKind::SumAll: {
      double total = 0.0;
      for (double x : in(0).data()) total += x;
      o[0] = total;
      break;
    }
    case OpKind::Pick: o[0] = in(0).at(n.offset, n.extent); break;
    case OpKind::Custom: {
      std::vector<const Tensor*> args;
      for (NodeId p : n.inputs) args.push_back(v[p]);
      out = n.custom->forward(args);
      if (out.shape() != n.shape) throw GraphError("custom forward produced shape " + shape_string(out.shape()) + ", declared " + shape_string(n.shape), id, graph.describe(id));
      break;
    }
    case OpKind::Parameter:
    case OpKind::Input:
    case OpKind::Constant:
      break;
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation

TensorMap Evaluation::named_outputs(const Graph& graph) const {
  TensorMap out;
  for (const auto& [name, id] : graph.outputs()) out.insert_or_assign(name, value(id));
  return out;
}

Evaluation evaluate(const Graph& graph, const TensorMap& bindings) {
  Evaluation ev;
  const std::size_t count = graph.size();
  ev.owned_.resize(count);
  ev.values_.assign(count, nullptr);
  for (NodeId id = 0; id < count; ++id) {
    const Node& n = graph.node(id);
    switch (n.op) {
      case OpKind::Parameter:
      case OpKind::Input: {
        auto it = bindings.find(n.label);
        if (it == bindings.end()) throw GraphError("leaf '" + n.label + "' is not bound", id, graph.describe(id));
        if (it->second.shape() != n.shape) {
          throw GraphError("shape mismatch: bound " + shape_string(it->second.shape()) + ", declared " + shape_string(n.shape), id, graph.describe(id));
        }
        ev.values_[id] = &it->second;
        break;
      }
      case OpKind::Constant: ev.values_[id] = &n.constant; break;
      default: {
        ev.owned_[id] = forward(graph, id, n, ev.values_);
        if (!ev.owned_[id].all_finite()) throw GraphError("non-finite intermediate value", id, graph.describe(id));
        ev.values_[id] = &ev.owned_[id];
      }
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace {

void accumulate(std::vector<Tensor>& grads, const Graph& graph, NodeId id, auto&& fill) {
  Tensor& g = grads[id];
  if (g.empty()) g = Tensor(graph.node(id).shape);
  fill(g.data().data());
}

}  // namespace

TensorMap gradients(const Graph& graph, const Evaluation& values, Var output) {
  const NodeId out_id = output.id();
  if (graph.node(out_id).shape != Shape{1}) {
    throw GraphError("gradients need a shape-[1] output, got " + shape_string(graph.node(out_id).shape), out_id, graph.describe(out_id));
  }
  const std::size_t count = out_id + 1;
  std::vector<std::uint8_t> needs(count, 0);
  for (NodeId id = 0; id < count; ++id) {
    const Node& n = graph.node(id);
    if (n.op == OpKind::Parameter) needs[id] = 1;
    for (NodeId p : n.inputs) needs[id] |= needs[p];
  }

  std::vector<Tensor> grads(count);
  grads[out_id] = Tensor::scalar(1.0);

  for (NodeId id = out_id + 1; id-- > 0;) {
    if (grads[id].empty() || !needs[id]) continue;
    const Node& n = graph.node(id);
    const Tensor& dy = grads[id];
    const double* g = dy.data().data();
    const Tensor& y = values.value(id);
    const std::size_t size = y.size();
    auto in = [&](std::size_t k) -> const Tensor& { return values.value(n.inputs[k]); };
    auto want = [&](std::size_t k) { return needs[n.inputs[k]] != 0; };
    auto acc = [&](std::size_t k, auto&& fill) {
      if (want(k)) accumulate(grads, graph, n.inputs[k], fill);
    };

    switch (n.op) {
      case OpKind::Parameter:
      case OpKind::Input:
      case OpKind::Constant:
        break;
      case OpKind::Add:
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i]; });
        acc(1, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i]; });
        break;
      case OpKind::Sub:
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i]; });
        acc(1, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] -= g[i]; });
        break;
      case OpKind::Mul: {
        const double *a = in(0).data().data(), *b = in(1).data().data();
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i] * b[i]; });
        acc(1, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i] * a[i]; });
        break;
      }
      case OpKind::AddRow: {
        const std::size_t cols = n.shape[1];
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i]; });
        acc(1, [&](double* d) {
          for (std::size_t i = 0; i < size; i += cols)
            for (std::size_t j = 0; j < cols; ++j) d[j] += g[i + j];
        });
        break;
      }
      case OpKind::MulRow: {
        const std::size_t cols = n.shape[1];
        const double *x = in(0).data().data(), *r = in(1).data().data();
        acc(0, [&](double* d) {
          for (std::size_t i = 0; i < size; i += cols)
            for (std::size_t j = 0; j < cols; ++j) d[i + j] += g[i + j] * r[j];
        });
        acc(1, [&](double* d) {
          for (std::size_t i = 0; i < size; i += cols)
            for (std::size_t j = 0; j < cols; ++j) d[j] += g[i + j] * x[i + j];
        });
        break;
      }
      case OpKind::Scale:
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += n.scalar * g[i]; });
        break;
      case OpKind::MatMul: {
        const Tensor &a = in(0), &b = in(1);
        const std::size_t m = rows_of(a), k = a.cols(), nn = b.cols();
        acc(0, [&](double* d) {
          const Tensor bt = transposed(b);
          gemm_acc(g, bt.data().data(), d, m, nn, k);
        });
        acc(1, [&](double* d) { gemm_tn_acc(a.data().data(), g, d, m, k, nn); });
        break;
      }
      case OpKind::MatMulNT: {
        const Tensor &a = in(0), &b = in(1);
        const std::size_t m = rows_of(a), k = a.cols(), nn = rows_of(b);
        acc(0, [&](double* d) { gemm_acc(g, b.data().data(), d, m, nn, k); });
        acc(1, [&](double* d) { gemm_tn_acc(g, a.data().data(), d, m, nn, k); });
        break;
      }
      case OpKind::Transpose:
        acc(0, [&](double* d) {
          const Tensor t = transposed(dy);
          for (std::size_t i = 0; i < size; ++i) d[i] += t[i];
        });
        break;
      case OpKind::Relu: {
        const double* x = in(0).data().data();
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) if (x[i] > 0.0) d[i] += g[i]; });
        break;
      }
      case OpKind::Tanh: {
        const double* o = y.data().data();
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i] * (1.0 - o[i] * o[i]); });
        break;
      }
      case OpKind::Sigmoid: {
        const double* o = y.data().data();
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[i] += g[i] * o[i] * (1.0 - o[i]); });
        break;
      }
      case OpKind::Softmax:
      case OpKind::MaskedSoftmax: {
        const double* o = y.data().data();
        const std::size_t cols = n.shape[1];
        acc(0, [&](double* d) {
          for (std::size_t r = 0; r < n.shape[0]; ++r) {
            const double s = dot(g + r * cols, o + r * cols, cols);
            for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += o[r * cols + j] * (g[r * cols + j] - s);
          }
        });
        break;
      }
      case OpKind::LogSoftmax: {
        const double* o = y.data().data();
        const std::size_t cols = n.shape[1];
        acc(0, [&](double* d) {
          for (std::size_t r = 0; r < n.shape[0]; ++r) {
            double s = 0.0;
            for (std::size_t j = 0; j < cols; ++j) s += g[r * cols + j];
            for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += g[r * cols + j] - std::exp(o[r * cols + j]) * s;
          }
        });
        break;
      }
      case OpKind::LayerNorm: {
        const double* o = y.data().data();
        const double* x = in(0).data().data();
        const std::size_t cols = n.shape[1];
        const double inv_n = 1.0 / static_cast<double>(cols);
        acc(0, [&](double* d) {
          for (std::size_t r = 0; r < n.shape[0]; ++r) {
            const double* xr = x + r * cols;
            double mean = 0.0;
            for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
            mean *= inv_n;
            double var = 0.0;
            for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
            var *= inv_n;
            const double inv = 1.0 / std::sqrt(var + n.scalar);
            double gm = 0.0, gy = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
              gm += g[r * cols + j];
              gy += g[r * cols + j] * o[r * cols + j];
            }
            gm *= inv_n;
            gy *= inv_n;
            for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += inv * (g[r * cols + j] - gm - o[r * cols + j] * gy);
          }
        });
        break;
      }
      case OpKind::L2Normalize: {
        const double* o = y.data().data();
        const double* x = in(0).data().data();
        const std::size_t cols = n.shape[1];
        acc(0, [&](double* d) {
          for (std::size_t r = 0; r < n.shape[0]; ++r) {
            const double norm = std::sqrt(dot(x + r * cols, x + r * cols, cols));
            const double s = dot(g + r * cols, o + r * cols, cols);
            for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += (g[r * cols + j] - o[r * cols + j] * s) / norm;
          }
        });
        break;
      }
      case OpKind::SliceRows: {
        const std::size_t cols = n.shape[1];
        acc(0, [&](double* d) { for (std::size_t i = 0; i < size; ++i) d[n.offset * cols + i] += g[i]; });
        break;
      }
      case OpKind::SliceCols: {
        const std::size_t cols = in(0).cols();
        acc(0, [&](double* d) {
          for (std::size_t r = 0; r < n.shape[0]; ++r)
            for (std::size_t j = 0; j < n.extent; ++j) d[r * cols + n.offset + j] += g[r * n.extent + j];
        });
        break;
      }
      case OpKind::ConcatRows: {
        std::size_t at = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t part = in(k).size();
          acc(k, [&](double* d) { for (std::size_t i = 0; i < part; ++i) d[i] += g[at + i]; });
          at += part;
        }
        break;
      }
      case OpKind::ConcatCols: {
        const std::size_t cols = n.shape[1];
        std::size_t at = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t pc = in(k).cols();
          acc(k, [&](double* d) {
            for (std::size_t r = 0; r < n.shape[0]; ++r)
              for (std::size_t j = 0; j < pc; ++j) d[r * pc + j] += g[r * cols + at + j];
          });
          at += pc;
        }
        break;
      }
      case OpKind::GatherRows: {
        const std::size_t cols = n.shape[1];
        acc(0, [&](double* d) {
          for (std::size_t r = 0; r < n.indices.size(); ++r)
            for (std::size_t j = 0; j < cols; ++j) d[n.indices[r] * cols + j] += g[r * cols + j];
        });
        break;
      }
      case OpKind::MeanRows: {
        const Tensor& x = in(0);
        const std::size_t rows = rows_of(x), cols = x.cols();
        const double inv = 1.0 / static_cast<double>(rows);
        acc(0, [&](double* d) {
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j) d[r * cols + j] += g[j] * inv;
        });
        break;
      }
      case OpKind::SumAll: {
        const std::size_t in_size = in(0).size();
        acc(0, [&](double* d) { for (std::size_t i = 0; i < in_size; ++i) d[i] += g[0]; });
        break;
      }
      case OpKind::Pick: {
        const std::size_t cols = in(0).cols();
        acc(0, [&](double* d) { d[n.offset * cols + n.extent] += g[0]; });
        break;
      }
      case OpKind::Custom: {
        if (!n.custom->backward) throw GraphError("no backward rule for custom op '" + n.custom->name + "'", id, graph.describe(id));
        std::vector<const Tensor*> args;
        for (NodeId p : n.inputs) args.push_back(&values.value(p));
        const std::vector<Tensor> parts = n.custom->backward(args, y, dy);
        if (parts.size() != n.inputs.size()) throw GraphError("custom backward returned the wrong number of gradients", id, graph.describe(id));
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (parts[k].shape() != in(k).shape()) throw GraphError("custom backward gradient shape mismatch", id, graph.describe(id));
          acc(k, [&](double* d) { for (std::size_t i = 0; i < parts[k].size(); ++i) d[i] += parts[k][i]; });
        }
        break;
      }
    }
  }

  TensorMap out;
  for (NodeId pid : graph.parameters()) {
    const Node& n = graph.node(pid);
    if (pid < count && !grads[pid].empty()) {
      out.insert_or_assign(n.label, std::move(grads[pid]));
    } else {
      out.insert_or_assign(n.label, Tensor(n.shape));
    }
  }
  return out;
}

}  // namespace sepvqa::num
