#pragma once

// Reverse-mode differentiation over dense arrays.
//
// A Tape records every operation in append order, which is also a valid
// topological order. Parameter leaves point back into a ParamStore, and
// backward() accumulates into the store's gradient buffers.
//
// Subgradient conventions: relu'(0) = 0, abs'(0) = 0, sqrt'(0) = 0, clamp
// passes gradient only strictly inside its bounds, and ties in max-reduce or
// elementwise max route the full gradient to the lowest index.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qmet/array.hpp"

namespace qmet::diff {

struct ParamId {
  std::size_t index = 0;
  friend bool operator==(ParamId, ParamId) = default;
};

/// Named trainable arrays plus their gradient accumulators.
class ParamStore {
 public:
  ParamId add(std::string name, Array init);

  std::size_t tensor_count() const { return entries_.size(); }
  /// Total number of scalar parameters.
  std::size_t scalar_count() const;

  const std::string& name(ParamId id) const { return entries_.at(id.index).name; }
  const Array& value(ParamId id) const { return entries_.at(id.index).value; }
  Array& value(ParamId id) { return entries_.at(id.index).value; }
  const Array& grad(ParamId id) const { return entries_.at(id.index).grad; }
  Array& grad(ParamId id) { return entries_.at(id.index).grad; }

  void zero_grad();
  bool grads_finite() const;

  std::vector<ParamId> ids() const;

 private:
  struct Entry {
    std::string name;
    Array value;
    Array grad;
  };
  std::vector<Entry> entries_;
};

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = 0;
};

enum class Op : std::uint8_t {
  kConstant,
  kParam,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kMatMul,
  kRelu,
  kExp,
  kLog,
  kSqrt,
  kSquare,
  kLogistic,
  kSoftplus,
  kAbs,
  kAcos,
  kAffine,
  kClamp,
  kMaxReduce,
  kMeanReduce,
  kSumReduce,
  kSort,
  kElemMax,
  kConcat,
  kSlice,
  kBroadcast,
  kReshape,
  kGatherRows,
};

const char* op_name(Op op);

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Array value);
  Var scalar(double value) { return constant(Array::scalar(value)); }
  /// Leaf bound to a parameter; backward() accumulates into store.grad(id).
  Var param(ParamStore& store, ParamId id);

  const Array& value(Var v) const { return nodes_.at(v.id).value; }
  const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape(); }
  std::size_t size() const { return nodes_.size(); }
  Op op(Var v) const { return nodes_.at(v.id).op; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Binary elementwise ops broadcast numpy-style (explicit broadcast nodes
  // are inserted when shapes differ).
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var elem_max(Var a, Var b);

  /// [m,k] x [k,n] -> [m,n].
  Var matmul(Var a, Var b);

  Var relu(Var x);
  Var exp(Var x);
  Var log(Var x);
  Var sqrt(Var x);
  Var square(Var x);
  Var logistic(Var x);
  Var softplus(Var x);
  Var abs(Var x);
  Var acos(Var x);
  /// scale * x + shift.
  Var affine(Var x, double scale, double shift = 0.0);
  Var neg(Var x) { return affine(x, -1.0, 0.0); }
  Var clamp(Var x, double lo, double hi);
  Var clamp_min(Var x, double lo);

  // Reductions drop the reduced axis; with no axis they reduce to a scalar.
  Var max_reduce(Var x, std::optional<std::size_t> axis = std::nullopt);
  Var mean_reduce(Var x, std::optional<std::size_t> axis = std::nullopt);
  Var sum_reduce(Var x, std::optional<std::size_t> axis = std::nullopt);

  /// Ascending stable sort along an axis. The permutation is kept on the node.
  Var sort(Var x, std::size_t axis);
  /// perm[lane * len + p] is the source position of sorted position p.
  const std::vector<std::size_t>& sort_permutation(Var sorted) const;

  Var concat(const std::vector<Var>& parts, std::size_t axis);
  Var slice(Var x, std::size_t axis, std::size_t begin, std::size_t end);
  Var broadcast(Var x, const Shape& shape);
  Var reshape(Var x, const Shape& shape);
  /// Rows of a rank-2 array; rows may repeat.
  Var gather_rows(Var x, const std::vector<std::size_t>& rows);

  /// Accumulate d(root)/d(param) into every bound ParamStore. Root must hold
  /// exactly one value. Calling twice without zero_grad() accumulates.
  void backward(Var root);
  /// Gradient of the last backward() root w.r.t. any node (zeros if unreached).
  Array gradient(Var v) const;

  /// Hash of every branch decision taken by kinked ops on the gradient path
  /// (relu/abs/clamp sides, argmax, sort permutations).
  std::uint64_t branch_signature() const;
  /// True if a kinked op on the gradient path sits exactly on its kink.
  bool at_kink() const;

 private:
  struct Node {
    Op op = Op::kConstant;
    std::vector<std::size_t> inputs;
    Array value;
    std::vector<std::size_t> index;  // argmax, permutation, gathered rows
    double a = 0.0;
    double b = 0.0;
    std::size_t axis = 0;
    bool all_axes = false;
    ParamStore* store = nullptr;
    ParamId param;
    bool requires_grad = false;
  };

  Var push(Node node);
  Var unary(Op op, Var x, Array value);
  std::pair<Var, Var> broadcast_pair(Var a, Var b, const char* what);
  const Node& node(Var v) const { return nodes_.at(v.id); }

  std::vector<Node> nodes_;
  std::vector<Array> grads_;
};

/// Plain-array matmul kernels, shared with non-taped evaluation.
Array matmul(const Array& a, const Array& b);

}  // namespace qmet::diff
