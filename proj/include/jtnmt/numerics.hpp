#pragma once

// Dense 2-D tensors with a tape-based reverse-mode differentiation engine.
//
// A Graph is built fresh for every mini-batch (sequence lengths vary, so
// there is no static graph). Every primitive appends one node to the tape;
// node ids are therefore already in topological order and backward() is a
// single reverse sweep.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace jtnmt::numerics {

/// Row-major double matrix; the value type of every tensor in the project.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
/// Column vector used for per-row scalars (weights, masks, picked log-probs).
using Column = Eigen::VectorXd;

struct Shape {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  bool operator==(const Shape&) const = default;
};

inline Shape shape_of(const Tensor& t) { return {t.rows(), t.cols()}; }
std::string to_string(Shape s);

/// A trainable tensor living outside any graph. `grad` accumulates across
/// backward passes until zero_grad().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

bool all_finite(const Tensor& t);

/// Vectorized elementwise tanh, computed as 1 - 2 / (exp(2x) + 1).
Tensor tanh(const Tensor& x);
/// Vectorized elementwise logistic function 1 / (1 + exp(-x)).
Tensor sigmoid(const Tensor& x);

/// Numerically stable softmax along `axis` (0 = down columns, 1 = along rows).
Tensor softmax(const Tensor& logits, int axis);
Tensor log_softmax(const Tensor& logits, int axis);

enum class Op : std::uint8_t {
  kLeaf,
  kParameter,
  kMatmul,
  kAdd,
  kSub,
  kMul,
  kConcat,
  kSlice,
  kTanh,
  kSigmoid,
  kEmbeddingLookup,
  kSum,
  kSoftmax,
  kLogSoftmax,
  kPick,
  kReshape,
  kTranspose,
};

const char* op_name(Op op);

/// Handle to a node of one Graph. Only meaningful together with that graph.
struct Var {
  std::int32_t id = -1;
};

/// Extra arguments for primitives that need them (axis, slice window, ids,
/// reshape target as start x length).
struct OpArgs {
  int axis = 1;
  Eigen::Index start = 0;
  Eigen::Index length = 0;
  std::vector<int> ids;
};

/// Stop the allocator from handing large blocks back to the kernel after every
/// batch. Safe to call repeatedly; a no-op outside glibc.
void keep_heap_resident();

class Graph {
 public:
  Graph() { keep_heap_resident(); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf holding a copy of `value`; gradient is tracked when requires_grad.
  Var input(Tensor value, bool requires_grad = false);
  /// Leaf aliasing an external parameter; backward accumulates into p.grad.
  Var parameter(Parameter& p);

  /// Generic entry point used by the named helpers below.
  Var apply(Op kind, std::span<const Var> inputs, const OpArgs& args = {});

  Var matmul(Var a, Var b) { return apply2(Op::kMatmul, a, b); }
  /// Same shapes, or `b` is a 1 x cols row (broadcast down rows) or 1 x 1.
  Var add(Var a, Var b) { return apply2(Op::kAdd, a, b); }
  Var sub(Var a, Var b) { return apply2(Op::kSub, a, b); }
  /// Elementwise; `b` may also be a rows x 1 column (scales each row) or 1 x 1.
  Var mul(Var a, Var b) { return apply2(Op::kMul, a, b); }
  Var concat(std::span<const Var> parts, int axis = 1);
  Var slice(Var a, int axis, Eigen::Index start, Eigen::Index length);
  Var tanh(Var a) { return apply1(Op::kTanh, a); }
  Var sigmoid(Var a) { return apply1(Op::kSigmoid, a); }
  /// Rows of `table` selected by ids -> ids.size() x table.cols().
  Var embedding_lookup(Var table, std::vector<int> ids);
  Var sum(Var a) { return apply1(Op::kSum, a); }
  Var softmax(Var a, int axis = 1);
  Var log_softmax(Var a, int axis = 1);
  /// out(r, 0) = a(r, ids[r]).
  Var pick(Var a, std::vector<int> ids);
  /// Row-major reinterpretation with the same number of elements.
  Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
  Var transpose(Var a) { return apply1(Op::kTranspose, a); }

  const Tensor& value(Var v) const;
  /// Gradient of the last backward() target wrt v (zeros when untouched). For
  /// parameter leaves this is the accumulated Parameter::grad.
  Tensor grad(Var v) const;
  Op kind(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).kind; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a 1 x 1 loss. Parameter leaves accumulate into their
  /// Parameter::grad; other nodes expose their gradient through grad().
  void backward(Var loss);

 private:
  struct Node {
    Op kind = Op::kLeaf;
    std::vector<std::int32_t> inputs;
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    Parameter* param = nullptr;
    OpArgs args;
  };

  Var apply1(Op kind, Var a) {
    const Var in[] = {a};
    return apply(kind, in);
  }
  Var apply2(Op kind, Var a, Var b) {
    const Var in[] = {a, b};
    return apply(kind, in);
  }
  Var push(Node node);
  const Node& node(Var v) const;
  const Tensor& node_value(const Node& n) const { return n.param ? n.param->value : n.value; }
  Tensor& grad_slot(std::int32_t id);
  void propagate(std::int32_t id);

  std::vector<Node> nodes_;
};

}  // namespace jtnmt::numerics
