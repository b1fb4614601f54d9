#include "jtnmt/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace jtnmt::numerics {

void keep_heap_resident() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
    mallopt(M_TOP_PAD, 64 * 1024 * 1024);
  });
#endif
}

std::string to_string(Shape s) {
  std::ostringstream os;
  os << "[" << s.rows << "x" << s.cols << "]";
  return os.str();
}

Parameter::Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
  grad = Tensor::Zero(value.rows(), value.cols());
}

bool all_finite(const Tensor& t) { return t.allFinite(); }

Tensor tanh(const Tensor& x) {
  return (1.0 - 2.0 / ((2.0 * x.array()).exp() + 1.0)).matrix();
}

Tensor sigmoid(const Tensor& x) { return (1.0 + (-x.array()).exp()).inverse().matrix(); }

namespace {

// exp() that returns exact zeros far below the normal range. The vectorized
// exp clamps its argument, which would otherwise leave subnormal residue in
// masked positions (and subnormals make every later product very slow).
template <typename Derived>
auto exp_flushed(const Eigen::ArrayBase<Derived>& x) {
  return (x < -700.0).select(0.0, x.exp());
}

}  // namespace

Tensor softmax(const Tensor& logits, int axis) {
  if (axis == 0) return softmax(logits.transpose(), 1).transpose();
  Tensor out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = exp_flushed(logits.row(r).array() - m);
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Tensor log_softmax(const Tensor& logits, int axis) {
  if (axis == 0) return log_softmax(logits.transpose(), 1).transpose();
  Tensor out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log(exp_flushed(logits.row(r).array() - m).sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kParameter: return "parameter";
    case Op::kMatmul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kTanh: return "tanh";
    case Op::kSigmoid: return "sigmoid";
    case Op::kEmbeddingLookup: return "embedding_lookup";
    case Op::kSum: return "sum";
    case Op::kSoftmax: return "softmax";
    case Op::kLogSoftmax: return "log_softmax";
    case Op::kPick: return "pick";
    case Op::kReshape: return "reshape";
    case Op::kTranspose: return "transpose";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(Op op, Shape a, Shape b) {
  throw std::invalid_argument(std::string(op_name(op)) + ": incompatible shapes " + to_string(a) +
                              " and " + to_string(b));
}

void check_axis(Op op, int axis) {
  if (axis != 0 && axis != 1) {
    throw std::invalid_argument(std::string(op_name(op)) + ": axis must be 0 or 1");
  }
}

enum class Broadcast { kNone, kRow, kColumn, kScalar };

Broadcast broadcast_kind(Op op, Shape a, Shape b) {
  if (a == b) return Broadcast::kNone;
  if (b.rows == 1 && b.cols == 1) return Broadcast::kScalar;
  if (op != Op::kMul && b.rows == 1 && b.cols == a.cols) return Broadcast::kRow;
  if (op == Op::kMul && b.cols == 1 && b.rows == a.rows) return Broadcast::kColumn;
  shape_error(op, a, b);
}

}  // namespace

Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::out_of_range("Var does not belong to this graph");
  }
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Tensor& Graph::value(Var v) const { return node_value(node(v)); }

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.param) return n.param->grad;
  if (n.has_grad) return n.grad;
  const Tensor& val = node_value(n);
  return Tensor::Zero(val.rows(), val.cols());
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.kind = Op::kLeaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Graph::parameter(Parameter& p) {
  Node n;
  n.kind = Op::kParameter;
  n.param = &p;
  n.requires_grad = true;
  if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
  return push(std::move(n));
}

Var Graph::concat(std::span<const Var> parts, int axis) {
  OpArgs args;
  args.axis = axis;
  return apply(Op::kConcat, parts, args);
}

Var Graph::slice(Var a, int axis, Eigen::Index start, Eigen::Index length) {
  OpArgs args;
  args.axis = axis;
  args.start = start;
  args.length = length;
  const Var in[] = {a};
  return apply(Op::kSlice, in, args);
}

Var Graph::embedding_lookup(Var table, std::vector<int> ids) {
  OpArgs args;
  args.ids = std::move(ids);
  const Var in[] = {table};
  return apply(Op::kEmbeddingLookup, in, args);
}

Var Graph::softmax(Var a, int axis) {
  OpArgs args;
  args.axis = axis;
  const Var in[] = {a};
  return apply(Op::kSoftmax, in, args);
}

Var Graph::log_softmax(Var a, int axis) {
  OpArgs args;
  args.axis = axis;
  const Var in[] = {a};
  return apply(Op::kLogSoftmax, in, args);
}

Var Graph::pick(Var a, std::vector<int> ids) {
  OpArgs args;
  args.ids = std::move(ids);
  const Var in[] = {a};
  return apply(Op::kPick, in, args);
}

Var Graph::reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  OpArgs args;
  args.start = rows;
  args.length = cols;
  const Var in[] = {a};
  return apply(Op::kReshape, in, args);
}

Var Graph::apply(Op kind, std::span<const Var> inputs, const OpArgs& args) {
  auto arity = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
  };
  Node out;
  out.kind = kind;
  out.args = args;
  for (Var v : inputs) {
    const Node& in = node(v);
    out.inputs.push_back(v.id);
    out.requires_grad = out.requires_grad || in.requires_grad;
  }

  switch (kind) {
    case Op::kLeaf:
    case Op::kParameter:
      throw std::invalid_argument("leaves are created with input() or parameter()");
    case Op::kMatmul: {
      arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      if (a.cols() != b.rows()) shape_error(kind, shape_of(a), shape_of(b));
      out.value.noalias() = a * b;
      break;
    }
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul: {
      arity(2);
      const Tensor& a = value(inputs[0]);
      const Tensor& b = value(inputs[1]);
      const Broadcast bc = broadcast_kind(kind, shape_of(a), shape_of(b));
      out.value.resize(a.rows(), a.cols());
      auto dst = out.value.array();
      switch (bc) {
        case Broadcast::kNone:
          if (kind == Op::kAdd) dst = a.array() + b.array();
          else if (kind == Op::kSub) dst = a.array() - b.array();
          else dst = a.array() * b.array();
          break;
        case Broadcast::kRow:
          if (kind == Op::kAdd) dst = a.array().rowwise() + b.row(0).array();
          else dst = a.array().rowwise() - b.row(0).array();
          break;
        case Broadcast::kColumn:
          dst = a.array().colwise() * b.col(0).array();
          break;
        case Broadcast::kScalar:
          if (kind == Op::kAdd) dst = a.array() + b(0, 0);
          else if (kind == Op::kSub) dst = a.array() - b(0, 0);
          else dst = a.array() * b(0, 0);
          break;
      }
      break;
    }
    case Op::kConcat: {
      if (inputs.empty()) throw std::invalid_argument("concat: no inputs");
      check_axis(kind, args.axis);
      const Tensor& first = value(inputs[0]);
      Eigen::Index total = 0;
      for (Var v : inputs) {
        const Tensor& t = value(v);
        const bool ok = args.axis == 1 ? t.rows() == first.rows() : t.cols() == first.cols();
        if (!ok) shape_error(kind, shape_of(first), shape_of(t));
        total += args.axis == 1 ? t.cols() : t.rows();
      }
      if (args.axis == 1) {
        out.value.resize(first.rows(), total);
        Eigen::Index at = 0;
        for (Var v : inputs) {
          const Tensor& t = value(v);
          out.value.middleCols(at, t.cols()) = t;
          at += t.cols();
        }
      } else {
        out.value.resize(total, first.cols());
        Eigen::Index at = 0;
        for (Var v : inputs) {
          const Tensor& t = value(v);
          out.value.middleRows(at, t.rows()) = t;
          at += t.rows();
        }
      }
      break;
    }
    case Op::kSlice: {
      arity(1);
      check_axis(kind, args.axis);
      const Tensor& a = value(inputs[0]);
      const Eigen::Index extent = args.axis == 1 ? a.cols() : a.rows();
      if (args.start < 0 || args.length <= 0 || args.start + args.length > extent) {
        throw std::invalid_argument("slice: window [" + std::to_string(args.start) + ", +" +
                                    std::to_string(args.length) + ") outside " +
                                    to_string(shape_of(a)));
      }
      out.value = args.axis == 1 ? Tensor(a.middleCols(args.start, args.length))
                                 : Tensor(a.middleRows(args.start, args.length));
      break;
    }
    case Op::kTanh:
      arity(1);
      out.value = numerics::tanh(value(inputs[0]));
      break;
    case Op::kSigmoid:
      arity(1);
      out.value = numerics::sigmoid(value(inputs[0]));
      break;
    case Op::kEmbeddingLookup: {
      arity(1);
      const Tensor& table = value(inputs[0]);
      out.value.resize(static_cast<Eigen::Index>(args.ids.size()), table.cols());
      for (std::size_t i = 0; i < args.ids.size(); ++i) {
        const int id = args.ids[i];
        if (id < 0 || id >= table.rows()) {
          throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                                  " outside table of " + std::to_string(table.rows()) + " rows");
        }
        out.value.row(static_cast<Eigen::Index>(i)) = table.row(id);
      }
      break;
    }
    case Op::kSum:
      arity(1);
      out.value = Tensor::Constant(1, 1, value(inputs[0]).sum());
      break;
    case Op::kSoftmax:
      arity(1);
      check_axis(kind, args.axis);
      out.value = numerics::softmax(value(inputs[0]), args.axis);
      break;
    case Op::kLogSoftmax:
      arity(1);
      check_axis(kind, args.axis);
      out.value = numerics::log_softmax(value(inputs[0]), args.axis);
      break;
    case Op::kPick: {
      arity(1);
      const Tensor& a = value(inputs[0]);
      if (static_cast<Eigen::Index>(args.ids.size()) != a.rows()) {
        throw std::invalid_argument("pick: " + std::to_string(args.ids.size()) + " ids for " +
                                    to_string(shape_of(a)));
      }
      out.value.resize(a.rows(), 1);
      for (Eigen::Index r = 0; r < a.rows(); ++r) {
        const int id = args.ids[static_cast<std::size_t>(r)];
        if (id < 0 || id >= a.cols()) throw std::out_of_range("pick: id outside row");
        out.value(r, 0) = a(r, id);
      }
      break;
    }
    case Op::kReshape: {
      arity(1);
      const Tensor& a = value(inputs[0]);
      if (args.start <= 0 || args.length <= 0 || args.start * args.length != a.size()) {
        throw std::invalid_argument("reshape: cannot view " + to_string(shape_of(a)) + " as " +
                                    to_string({args.start, args.length}));
      }
      out.value = Eigen::Map<const Tensor>(a.data(), args.start, args.length);
      break;
    }
    case Op::kTranspose:
      arity(1);
      out.value = value(inputs[0]).transpose();
      break;
  }
  return push(std::move(out));
}

Tensor& Graph::grad_slot(std::int32_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.param) return n.param->grad;
  if (!n.has_grad) {
    const Tensor& v = node_value(n);
    n.grad.setZero(v.rows(), v.cols());
    n.has_grad = true;
  }
  return n.grad;
}

void Graph::backward(Var loss) {
  const Tensor& lv = value(loss);
  if (lv.rows() != 1 || lv.cols() != 1) {
    throw std::invalid_argument("backward: loss must be 1x1, got " + to_string(shape_of(lv)));
  }
  if (!std::isfinite(lv(0, 0))) throw std::domain_error("backward: loss is not finite");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  grad_slot(loss.id).setOnes();
  for (std::int32_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.kind != Op::kLeaf && n.kind != Op::kParameter) propagate(id);
  }
}

void Graph::propagate(std::int32_t id) {
  // Inputs always have smaller ids than `n`, and nodes_ is never resized
  // during backward, so these references stay valid.
  Node& n = nodes_[static_cast<std::size_t>(id)];
  const Tensor& g = n.grad;
  auto wants = [&](std::size_t k) {
    return nodes_[static_cast<std::size_t>(n.inputs[k])].requires_grad;
  };
  auto in_value = [&](std::size_t k) -> const Tensor& {
    return node_value(nodes_[static_cast<std::size_t>(n.inputs[k])]);
  };
  // grad(input k) += expr, assigning on first touch; parameters accumulate
  // straight into Parameter::grad.
  auto accumulate = [&](std::size_t k, const auto& expr) {
    Node& in = nodes_[static_cast<std::size_t>(n.inputs[k])];
    if (in.param) {
      in.param->grad.noalias() += expr;
    } else if (in.has_grad) {
      in.grad.noalias() += expr;
    } else {
      in.grad.noalias() = expr;
      in.has_grad = true;
    }
  };

  switch (n.kind) {
    case Op::kLeaf:
    case Op::kParameter:
      break;
    case Op::kMatmul:
      if (wants(0)) accumulate(0, g * in_value(1).transpose());
      if (wants(1)) accumulate(1, in_value(0).transpose() * g);
      break;
    case Op::kAdd:
    case Op::kSub: {
      const Broadcast bc = broadcast_kind(n.kind, shape_of(in_value(0)), shape_of(in_value(1)));
      if (wants(0)) accumulate(0, g);
      if (wants(1)) {
        const double sign = n.kind == Op::kAdd ? 1.0 : -1.0;
        switch (bc) {
          case Broadcast::kNone: accumulate(1, sign * g); break;
          case Broadcast::kRow: accumulate(1, sign * g.colwise().sum()); break;
          case Broadcast::kScalar: accumulate(1, Tensor::Constant(1, 1, sign * g.sum())); break;
          case Broadcast::kColumn: break;
        }
      }
      break;
    }
    case Op::kMul: {
      const Tensor& a = in_value(0);
      const Tensor& b = in_value(1);
      const Broadcast bc = broadcast_kind(n.kind, shape_of(a), shape_of(b));
      if (wants(0)) {
        switch (bc) {
          case Broadcast::kNone: accumulate(0, g.cwiseProduct(b)); break;
          case Broadcast::kColumn:
            accumulate(0, (g.array().colwise() * b.col(0).array()).matrix());
            break;
          case Broadcast::kScalar: accumulate(0, g * b(0, 0)); break;
          case Broadcast::kRow: break;
        }
      }
      if (wants(1)) {
        switch (bc) {
          case Broadcast::kNone: accumulate(1, g.cwiseProduct(a)); break;
          case Broadcast::kColumn: accumulate(1, g.cwiseProduct(a).rowwise().sum()); break;
          case Broadcast::kScalar:
            accumulate(1, Tensor::Constant(1, 1, g.cwiseProduct(a).sum()));
            break;
          case Broadcast::kRow: break;
        }
      }
      break;
    }
    case Op::kConcat: {
      Eigen::Index at = 0;
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const Tensor& t = in_value(k);
        if (n.args.axis == 1) {
          if (wants(k)) accumulate(k, g.middleCols(at, t.cols()));
          at += t.cols();
        } else {
          if (wants(k)) accumulate(k, g.middleRows(at, t.rows()));
          at += t.rows();
        }
      }
      break;
    }
    case Op::kSlice:
      if (wants(0)) {
        Tensor& ga = grad_slot(n.inputs[0]);
        if (n.args.axis == 1) ga.middleCols(n.args.start, n.args.length) += g;
        else ga.middleRows(n.args.start, n.args.length) += g;
      }
      break;
    case Op::kTanh:
      if (wants(0)) {
        accumulate(0, (g.array() * (1.0 - n.value.array().square())).matrix());
      }
      break;
    case Op::kSigmoid:
      if (wants(0)) {
        accumulate(0, (g.array() * n.value.array() * (1.0 - n.value.array())).matrix());
      }
      break;
    case Op::kEmbeddingLookup:
      if (wants(0)) {
        Tensor& gt = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < n.args.ids.size(); ++i) {
          gt.row(n.args.ids[i]) += g.row(static_cast<Eigen::Index>(i));
        }
      }
      break;
    case Op::kSum:
      if (wants(0)) grad_slot(n.inputs[0]).array() += g(0, 0);
      break;
    case Op::kSoftmax:
      if (wants(0)) {
        const Tensor& y = n.value;
        if (n.args.axis == 1) {
          const Column dots = (g.cwiseProduct(y)).rowwise().sum();
          accumulate(0, (y.array() * (g.array().colwise() - dots.array())).matrix());
        } else {
          const Eigen::RowVectorXd dots = (g.cwiseProduct(y)).colwise().sum();
          accumulate(0, (y.array() * (g.array().rowwise() - dots.array())).matrix());
        }
      }
      break;
    case Op::kLogSoftmax:
      if (wants(0)) {
        const Tensor p = exp_flushed(n.value.array()).matrix();
        if (n.args.axis == 1) {
          const Column gs = g.rowwise().sum();
          accumulate(0, (g.array() - p.array().colwise() * gs.array()).matrix());
        } else {
          const Eigen::RowVectorXd gs = g.colwise().sum();
          accumulate(0, (g.array() - p.array().rowwise() * gs.array()).matrix());
        }
      }
      break;
    case Op::kPick:
      if (wants(0)) {
        Tensor& ga = grad_slot(n.inputs[0]);
        for (std::size_t r = 0; r < n.args.ids.size(); ++r) {
          ga(static_cast<Eigen::Index>(r), n.args.ids[r]) += g(static_cast<Eigen::Index>(r), 0);
        }
      }
      break;
    case Op::kReshape:
      if (wants(0)) {
        const Tensor& a = in_value(0);
        accumulate(0, Eigen::Map<const Tensor>(g.data(), a.rows(), a.cols()));
      }
      break;
    case Op::kTranspose:
      if (wants(0)) accumulate(0, g.transpose());
      break;
  }
}

}  // namespace jtnmt::numerics
