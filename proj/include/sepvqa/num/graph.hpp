#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sepvqa/num/tensor.hpp"

namespace sepvqa::num {

using NodeId = std::uint32_t;
using TensorMap = std::map<std::string, Tensor, std::less<>>;

enum class OpKind : std::uint8_t {
  Parameter,
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  AddRow,
  MulRow,
  Scale,
  MatMul,
  MatMulNT,
  Transpose,
  Relu,
  Tanh,
  Sigmoid,
  Softmax,
  MaskedSoftmax,
  LogSoftmax,
  LayerNorm,
  L2Normalize,
  SliceRows,
  SliceCols,
  ConcatRows,
  ConcatCols,
  GatherRows,
  MeanRows,
  SumAll,
  Pick,
  Custom,
};

std::string_view op_name(OpKind op);

/// Error raised while building, evaluating or differentiating a graph. Carries the offending node.
class GraphError : public std::runtime_error {
 public:
  GraphError(const std::string& message, NodeId node, std::string node_label);
  NodeId node() const { return node_; }
  const std::string& node_label() const { return node_label_; }

 private:
  NodeId node_;
  std::string node_label_;
};

class Graph;

/// Lightweight handle to a node of a Graph. The graph must outlive the handle.
class Var {
 public:
  Var() = default;
  Var(Graph* graph, NodeId id) : graph_(graph), id_(id) {}

  Graph& graph() const { return *graph_; }
  NodeId id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  const Shape& shape() const;
  std::size_t rows() const;
  std::size_t cols() const;

 private:
  Graph* graph_ = nullptr;
  NodeId id_ = 0;
};

/// User-defined operation. `backward` may be left empty, in which case differentiating
/// through the node is an error.
struct CustomOp {
  using Forward = std::function<Tensor(std::span<const Tensor* const> inputs)>;
  using Backward = std::function<std::vector<Tensor>(std::span<const Tensor* const> inputs, const Tensor& output,
                                                     const Tensor& grad_output)>;
  std::string name;
  Forward forward;
  Backward backward;
};

struct Node {
  OpKind op = OpKind::Constant;
  std::vector<NodeId> inputs;
  Shape shape;
  std::string label;
  double scalar = 0.0;
  std::size_t offset = 0;
  std::size_t extent = 0;
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> mask;
  Tensor constant;
  std::shared_ptr<const CustomOp> custom;
};

/// A differentiable program: nodes are appended in topological order, leaves are bound by
/// name at evaluation time. Shapes are checked when nodes are added.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  /// Trainable leaf. Requesting an existing name returns the same node.
  Var parameter(const std::string& name, Shape shape);
  /// Non-trainable leaf bound by name.
  Var input(const std::string& name, Shape shape);
  Var constant(Tensor value, std::string label = {});
  Var custom(std::shared_ptr<const CustomOp> op, const std::vector<Var>& inputs, Shape shape);

  Var add(Node node);

  const Node& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }
  const std::vector<NodeId>& parameters() const { return parameters_; }

  void set_label(Var v, std::string label);
  void mark_output(const std::string& name, Var v);
  const std::vector<std::pair<std::string, NodeId>>& outputs() const { return outputs_; }

  /// Human-readable node description used in error messages.
  std::string describe(NodeId id) const;

 private:
  Var leaf(OpKind op, const std::string& name, Shape shape);

  std::vector<Node> nodes_;
  std::vector<NodeId> parameters_;
  std::map<std::string, NodeId, std::less<>> leaves_;
  std::vector<std::pair<std::string, NodeId>> outputs_;
};

// Elementwise arithmetic on equal shapes.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var scale(Var x, double factor);

/// x + b with b a 1×n row broadcast over the rows of x.
Var add_row(Var x, Var row);
/// x ⊙ g with g a 1×n row broadcast over the rows of x.
Var mul_row(Var x, Var row);

Var matmul(Var a, Var b);
/// a · bᵀ
Var matmul_nt(Var a, Var b);
Var transpose(Var x);

Var relu(Var x);
Var tanh(Var x);
Var sigmoid(Var x);

Var softmax_rows(Var x);
/// Row softmax restricted to entries whose mask byte is nonzero; masked entries get probability 0.
/// Every row must allow at least one entry.
Var masked_softmax_rows(Var x, std::vector<std::uint8_t> mask);
Var log_softmax_rows(Var x);
/// Per-row standardization (x - mean) / sqrt(var + eps), no affine part.
Var layernorm_rows(Var x, double eps = 1e-5);
/// Per-row division by the Euclidean norm; a zero row is an evaluation error.
Var l2_normalize_rows(Var x);

Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var gather_rows(Var table, std::vector<std::size_t> indices);

/// Column-wise mean over rows, giving a 1×n row.
Var mean_rows(Var x);
/// Sum of all entries, shape [1].
Var sum_all(Var x);
/// Single entry (r, c), shape [1].
Var pick(Var x, std::size_t r, std::size_t c);

/// Forward values of every node of a graph. Leaf values may alias the bindings they were
/// evaluated with, so the bindings must outlive the evaluation.
class Evaluation {
 public:
  const Tensor& value(NodeId id) const { return *values_.at(id); }
  const Tensor& operator[](Var v) const { return value(v.id()); }
  /// Values of every node registered with Graph::mark_output.
  TensorMap named_outputs(const Graph& graph) const;

 private:
  friend Evaluation evaluate(const Graph& graph, const TensorMap& bindings);
  std::vector<Tensor> owned_;
  std::vector<const Tensor*> values_;
};

/// Forward pass. Throws GraphError for unbound leaves, binding shape mismatches and
/// non-finite intermediates.
Evaluation evaluate(const Graph& graph, const TensorMap& bindings);

/// Reverse pass from a shape-[1] output. Returns one gradient per parameter of the graph,
/// zero-filled for parameters the output does not depend on.
TensorMap gradients(const Graph& graph, const Evaluation& values, Var output);

}  // namespace sepvqa::num
