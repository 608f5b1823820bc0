#include "qmet/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <tuple>

namespace qmet::diff {

namespace {

struct AxisView {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for " +
                                shape_string(shape));
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  return out;
}

double logistic_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_value(double x) {
  // log(1 + e^x) without overflow.
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

// Maps every element of `target` to its source offset under right-aligned
// broadcasting from `source`.
std::vector<std::size_t> broadcast_offsets(const Shape& source, const Shape& target) {
  const std::size_t r = target.size();
  const std::size_t s = source.size();
  std::vector<std::size_t> src_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < s; ++k) {
    const std::size_t j = s - 1 - k;
    const std::size_t i = r - 1 - k;
    src_stride[i] = source[j] == 1 ? 0 : stride;
    stride *= source[j];
  }
  const std::size_t total = shape_size(target);
  std::vector<std::size_t> offsets(total);
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t t = 0; t < total; ++t) {
    offsets[t] = offset;
    for (std::size_t i = r; i-- > 0;) {
      ++counter[i];
      offset += src_stride[i];
      if (counter[i] < target[i]) break;
      offset -= src_stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return offsets;
}

bool can_broadcast(const Shape& source, const Shape& target) {
  if (source.size() > target.size()) return false;
  for (std::size_t k = 0; k < source.size(); ++k) {
    const std::size_t sj = source[source.size() - 1 - k];
    const std::size_t ti = target[target.size() - 1 - k];
    if (sj != 1 && sj != ti) return false;
  }
  return true;
}

std::optional<Shape> broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) return std::nullopt;
    out[r - 1 - k] = da == 1 ? db : da;
  }
  return out;
}

void require_finite(const Array& x, const char* op) {
  if (!x.all_finite()) {
    throw std::domain_error(std::string(op) + ": non-finite input");
  }
}

void add_into(Array& dst, const Array& src) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// c += a * b for [m,k] x [k,n].
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c += a^T * b for a:[m,k], b:[m,n] -> c:[k,n].
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

Array transpose(const Array& x) {
  const std::size_t r = x.dim(0), c = x.dim(1);
  Array out(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
  return out;
}

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void mix(std::uint64_t& h, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) {
    h ^= (v >> (8 * i)) & 0xffU;
    h *= kFnvPrime;
  }
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kConstant: return "constant";
    case Op::kParam: return "param";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kMatMul: return "matmul";
    case Op::kRelu: return "relu";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kSquare: return "square";
    case Op::kLogistic: return "logistic";
    case Op::kSoftplus: return "softplus";
    case Op::kAbs: return "abs";
    case Op::kAcos: return "acos";
    case Op::kAffine: return "affine";
    case Op::kClamp: return "clamp";
    case Op::kMaxReduce: return "max-reduce";
    case Op::kMeanReduce: return "mean-reduce";
    case Op::kSumReduce: return "sum-reduce";
    case Op::kSort: return "sort";
    case Op::kElemMax: return "elementwise-max";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kBroadcast: return "broadcast";
    case Op::kReshape: return "reshape";
    case Op::kGatherRows: return "gather-rows";
  }
  return "unknown";
}

// ---------------------------------------------------------------- ParamStore

ParamId ParamStore::add(std::string name, Array init) {
  Entry e{std::move(name), init, Array(init.shape(), 0.0)};
  entries_.push_back(std::move(e));
  return ParamId{entries_.size() - 1};
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

bool ParamStore::grads_finite() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const Entry& e) { return e.grad.all_finite(); });
}

std::vector<ParamId> ParamStore::ids() const {
  std::vector<ParamId> out(entries_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ParamId{i};
  return out;
}

// ---------------------------------------------------------------- Tape: leaves

Var Tape::push(Node node) {
  if (!node.requires_grad) {
    for (std::size_t in : node.inputs) {
      if (nodes_[in].requires_grad) {
        node.requires_grad = true;
        break;
      }
    }
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Var Tape::constant(Array value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(ParamStore& store, ParamId id) {
  Node n;
  n.op = Op::kParam;
  n.value = store.value(id);
  n.store = &store;
  n.param = id;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::unary(Op op, Var x, Array value) {
  Node n;
  n.op = op;
  n.inputs = {x.id};
  n.value = std::move(value);
  return push(std::move(n));
}

// ---------------------------------------------------------------- elementwise

std::pair<Var, Var> Tape::broadcast_pair(Var a, Var b, const char* what) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa == sb) return {a, b};
  auto target = broadcast_shape(sa, sb);
  if (!target) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_string(sa) +
                                " vs " + shape_string(sb));
  }
  if (sa != *target) a = broadcast(a, *target);
  if (shape(b) != *target) b = broadcast(b, *target);
  return {a, b};
}

namespace {

template <typename F>
Array zip(const Array& a, const Array& b, F f) {
  Array out(a.shape());
  auto o = out.values();
  auto x = a.values();
  auto y = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i], y[i]);
  return out;
}

template <typename F>
Array map(const Array& a, F f) {
  Array out(a.shape());
  auto o = out.values();
  auto x = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(x[i]);
  return out;
}

}  // namespace

Var Tape::add(Var a, Var b) {
  std::tie(a, b) = broadcast_pair(a, b, "add");
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id, b.id};
  n.value = zip(value(a), value(b), [](double x, double y) { return x + y; });
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  std::tie(a, b) = broadcast_pair(a, b, "sub");
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.id, b.id};
  n.value = zip(value(a), value(b), [](double x, double y) { return x - y; });
  return push(std::move(n));
}

Var Tape::mul(Var a, Var b) {
  std::tie(a, b) = broadcast_pair(a, b, "mul");
  Node n;
  n.op = Op::kMul;
  n.inputs = {a.id, b.id};
  n.value = zip(value(a), value(b), [](double x, double y) { return x * y; });
  return push(std::move(n));
}

Var Tape::div(Var a, Var b) {
  std::tie(a, b) = broadcast_pair(a, b, "div");
  Node n;
  n.op = Op::kDiv;
  n.inputs = {a.id, b.id};
  n.value = zip(value(a), value(b), [](double x, double y) { return x / y; });
  return push(std::move(n));
}

Var Tape::elem_max(Var a, Var b) {
  std::tie(a, b) = broadcast_pair(a, b, "elementwise-max");
  Node n;
  n.op = Op::kElemMax;
  n.inputs = {a.id, b.id};
  n.value = zip(value(a), value(b), [](double x, double y) { return x >= y ? x : y; });
  return push(std::move(n));
}

Var Tape::matmul(Var a, Var b) {
  const Shape& sa = shape(a);
  const Shape& sb = shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_string(sa) + " vs " +
                                shape_string(sb));
  }
  Node n;
  n.op = Op::kMatMul;
  n.inputs = {a.id, b.id};
  n.value = diff::matmul(value(a), value(b));
  return push(std::move(n));
}

Var Tape::relu(Var x) {
  return unary(Op::kRelu, x, map(value(x), [](double v) { return v > 0 ? v : 0.0; }));
}

Var Tape::exp(Var x) {
  require_finite(value(x), "exp");
  return unary(Op::kExp, x, map(value(x), [](double v) { return std::exp(v); }));
}

Var Tape::log(Var x) {
  require_finite(value(x), "log");
  for (double v : value(x).values()) {
    if (v < 0) throw std::domain_error("log: negative input");
  }
  return unary(Op::kLog, x, map(value(x), [](double v) { return std::log(v); }));
}

Var Tape::sqrt(Var x) {
  for (double v : value(x).values()) {
    if (v < 0) throw std::domain_error("sqrt: negative input");
  }
  return unary(Op::kSqrt, x, map(value(x), [](double v) { return std::sqrt(v); }));
}

Var Tape::square(Var x) {
  return unary(Op::kSquare, x, map(value(x), [](double v) { return v * v; }));
}

Var Tape::logistic(Var x) { return unary(Op::kLogistic, x, map(value(x), logistic_value)); }

Var Tape::softplus(Var x) { return unary(Op::kSoftplus, x, map(value(x), softplus_value)); }

Var Tape::abs(Var x) {
  return unary(Op::kAbs, x, map(value(x), [](double v) { return std::abs(v); }));
}

Var Tape::acos(Var x) {
  for (double v : value(x).values()) {
    if (!(v >= -1.0 && v <= 1.0)) throw std::domain_error("acos: input outside [-1, 1]");
  }
  return unary(Op::kAcos, x, map(value(x), [](double v) { return std::acos(v); }));
}

Var Tape::affine(Var x, double scale, double shift) {
  Node n;
  n.op = Op::kAffine;
  n.inputs = {x.id};
  n.a = scale;
  n.b = shift;
  n.value = map(value(x), [scale, shift](double v) { return scale * v + shift; });
  return push(std::move(n));
}

Var Tape::clamp(Var x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo > hi");
  Node n;
  n.op = Op::kClamp;
  n.inputs = {x.id};
  n.a = lo;
  n.b = hi;
  n.value = map(value(x), [lo, hi](double v) { return std::clamp(v, lo, hi); });
  return push(std::move(n));
}

Var Tape::clamp_min(Var x, double lo) {
  return clamp(x, lo, std::numeric_limits<double>::infinity());
}

// ---------------------------------------------------------------- reductions

namespace {

struct ReduceGeom {
  AxisView view;
  Shape out_shape;
};

ReduceGeom reduce_geom(const Shape& shape, std::optional<std::size_t> axis) {
  ReduceGeom g;
  if (!axis) {
    g.view = AxisView{1, shape_size(shape), 1};
    g.out_shape = Shape{};
  } else {
    g.view = axis_view(shape, *axis);
    g.out_shape = drop_axis(shape, *axis);
  }
  return g;
}

}  // namespace

Var Tape::max_reduce(Var x, std::optional<std::size_t> axis) {
  const ReduceGeom g = reduce_geom(shape(x), axis);
  if (g.view.len == 0) throw std::invalid_argument("max-reduce: empty axis");
  const auto in = value(x).values();
  Node n;
  n.op = Op::kMaxReduce;
  n.inputs = {x.id};
  n.axis = axis.value_or(0);
  n.all_axes = !axis;
  n.value = Array(g.out_shape);
  n.index.resize(g.view.outer * g.view.inner);
  auto out = n.value.values();
  for (std::size_t o = 0; o < g.view.outer; ++o) {
    for (std::size_t k = 0; k < g.view.inner; ++k) {
      std::size_t best = 0;
      double best_v = in[o * g.view.len * g.view.inner + k];
      for (std::size_t i = 1; i < g.view.len; ++i) {
        const double v = in[(o * g.view.len + i) * g.view.inner + k];
        if (v > best_v) {
          best_v = v;
          best = i;
        }
      }
      out[o * g.view.inner + k] = best_v;
      n.index[o * g.view.inner + k] = best;
    }
  }
  return push(std::move(n));
}

Var Tape::sum_reduce(Var x, std::optional<std::size_t> axis) {
  const ReduceGeom g = reduce_geom(shape(x), axis);
  const auto in = value(x).values();
  Node n;
  n.op = Op::kSumReduce;
  n.inputs = {x.id};
  n.axis = axis.value_or(0);
  n.all_axes = !axis;
  n.value = Array(g.out_shape, 0.0);
  auto out = n.value.values();
  for (std::size_t o = 0; o < g.view.outer; ++o)
    for (std::size_t i = 0; i < g.view.len; ++i)
      for (std::size_t k = 0; k < g.view.inner; ++k)
        out[o * g.view.inner + k] += in[(o * g.view.len + i) * g.view.inner + k];
  return push(std::move(n));
}

Var Tape::mean_reduce(Var x, std::optional<std::size_t> axis) {
  const ReduceGeom g = reduce_geom(shape(x), axis);
  if (g.view.len == 0) throw std::invalid_argument("mean-reduce: empty axis");
  const auto in = value(x).values();
  Node n;
  n.op = Op::kMeanReduce;
  n.inputs = {x.id};
  n.axis = axis.value_or(0);
  n.all_axes = !axis;
  n.value = Array(g.out_shape, 0.0);
  auto out = n.value.values();
  for (std::size_t o = 0; o < g.view.outer; ++o)
    for (std::size_t i = 0; i < g.view.len; ++i)
      for (std::size_t k = 0; k < g.view.inner; ++k)
        out[o * g.view.inner + k] += in[(o * g.view.len + i) * g.view.inner + k];
  const double inv = 1.0 / static_cast<double>(g.view.len);
  for (double& v : out) v *= inv;
  return push(std::move(n));
}

// ---------------------------------------------------------------- structural

Var Tape::sort(Var x, std::size_t axis) {
  const AxisView v = axis_view(shape(x), axis);
  const auto in = value(x).values();
  Node n;
  n.op = Op::kSort;
  n.inputs = {x.id};
  n.axis = axis;
  n.value = Array(shape(x));
  n.index.resize(in.size());
  auto out = n.value.values();
  std::vector<std::size_t> perm(v.len);
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t k = 0; k < v.inner; ++k) {
      auto at = [&](std::size_t i) { return in[(o * v.len + i) * v.inner + k]; };
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      std::stable_sort(perm.begin(), perm.end(),
                       [&](std::size_t p, std::size_t q) { return at(p) < at(q); });
      const std::size_t lane = o * v.inner + k;
      for (std::size_t p = 0; p < v.len; ++p) {
        out[(o * v.len + p) * v.inner + k] = at(perm[p]);
        n.index[lane * v.len + p] = perm[p];
      }
    }
  }
  return push(std::move(n));
}

const std::vector<std::size_t>& Tape::sort_permutation(Var sorted) const {
  const Node& n = node(sorted);
  if (n.op != Op::kSort) throw std::invalid_argument("sort_permutation: not a sort node");
  return n.index;
}

Var Tape::concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  Shape out_shape = shape(parts[0]);
  if (axis >= out_shape.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t total = 0;
  for (Var p : parts) {
    const Shape& s = shape(p);
    bool ok = s.size() == out_shape.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) ok = false;
    }
    if (!ok) {
      throw std::invalid_argument("concat: shape mismatch " + shape_string(out_shape) +
                                  " vs " + shape_string(s));
    }
    total += s[axis];
  }
  out_shape[axis] = total;
  const AxisView ov = axis_view(out_shape, axis);
  Node n;
  n.op = Op::kConcat;
  n.axis = axis;
  n.value = Array(out_shape);
  auto out = n.value.values();
  std::size_t offset = 0;
  for (Var p : parts) {
    n.inputs.push_back(p.id);
    const auto in = value(p).values();
    const std::size_t len = shape(p)[axis];
    for (std::size_t o = 0; o < ov.outer; ++o) {
      std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(o * len * ov.inner), len * ov.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * ov.len + offset) * ov.inner));
    }
    offset += len;
  }
  return push(std::move(n));
}

Var Tape::slice(Var x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = shape(x);
  const AxisView v = axis_view(s, axis);
  if (begin > end || end > v.len) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " +
                                std::to_string(end) + ") invalid for " + shape_string(s));
  }
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t len = end - begin;
  const auto in = value(x).values();
  Node n;
  n.op = Op::kSlice;
  n.inputs = {x.id};
  n.axis = axis;
  n.a = static_cast<double>(begin);
  n.value = Array(out_shape);
  auto out = n.value.values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>((o * v.len + begin) * v.inner),
                len * v.inner, out.begin() + static_cast<std::ptrdiff_t>(o * len * v.inner));
  }
  return push(std::move(n));
}

Var Tape::broadcast(Var x, const Shape& target) {
  const Shape& s = shape(x);
  if (!can_broadcast(s, target)) {
    throw std::invalid_argument("broadcast: shape mismatch " + shape_string(s) + " vs " +
                                shape_string(target));
  }
  const auto offsets = broadcast_offsets(s, target);
  const auto in = value(x).values();
  Node n;
  n.op = Op::kBroadcast;
  n.inputs = {x.id};
  n.value = Array(target);
  auto out = n.value.values();
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = in[offsets[t]];
  return push(std::move(n));
}

Var Tape::reshape(Var x, const Shape& target) {
  Node n;
  n.op = Op::kReshape;
  n.inputs = {x.id};
  n.value = value(x).reshaped(target);
  return push(std::move(n));
}

Var Tape::gather_rows(Var x, const std::vector<std::size_t>& rows) {
  const Shape& s = shape(x);
  if (s.size() != 2) throw std::invalid_argument("gather-rows: need rank 2, got " + shape_string(s));
  const std::size_t cols = s[1];
  const auto in = value(x).values();
  Node n;
  n.op = Op::kGatherRows;
  n.inputs = {x.id};
  n.index = rows;
  n.value = Array(Shape{rows.size(), cols});
  auto out = n.value.values();
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= s[0]) throw std::out_of_range("gather-rows: row index out of range");
    std::copy_n(in.begin() + static_cast<std::ptrdiff_t>(rows[r] * cols), cols,
                out.begin() + static_cast<std::ptrdiff_t>(r * cols));
  }
  return push(std::move(n));
}

// ---------------------------------------------------------------- backward

void Tape::backward(Var root) {
  if (root.id >= nodes_.size()) throw std::out_of_range("backward: unknown root");
  if (nodes_[root.id].value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_string(nodes_[root.id].value.shape()));
  }
  grads_.assign(nodes_.size(), Array());
  std::vector<bool> has(nodes_.size(), false);
  grads_[root.id] = Array(nodes_[root.id].value.shape(), 1.0);
  has[root.id] = true;

  auto buf = [&](std::size_t id) -> Array* {
    if (!nodes_[id].requires_grad) return nullptr;
    if (!has[id]) {
      grads_[id] = Array(nodes_[id].value.shape(), 0.0);
      has[id] = true;
    }
    return &grads_[id];
  };

  for (std::size_t id = root.id + 1; id-- > 0;) {
    if (!has[id] || !nodes_[id].requires_grad) continue;
    const Node& n = nodes_[id];
    const Array& g = grads_[id];
    const auto gv = g.values();
    switch (n.op) {
      case Op::kConstant:
        break;
      case Op::kParam:
        add_into(n.store->grad(n.param), g);
        break;
      case Op::kAdd:
        for (std::size_t in : n.inputs)
          if (Array* d = buf(in)) add_into(*d, g);
        break;
      case Op::kSub:
        if (Array* d = buf(n.inputs[0])) add_into(*d, g);
        if (Array* d = buf(n.inputs[1])) {
          auto dv = d->values();
          for (std::size_t i = 0; i < dv.size(); ++i) dv[i] -= gv[i];
        }
        break;
      case Op::kMul: {
        const auto a = nodes_[n.inputs[0]].value.values();
        const auto b = nodes_[n.inputs[1]].value.values();
        if (Array* d = buf(n.inputs[0])) {
          auto dv = d->values();
          for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += gv[i] * b[i];
        }
        if (Array* d = buf(n.inputs[1])) {
          auto dv = d->values();
          for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += gv[i] * a[i];
        }
        break;
      }
      case Op::kDiv: {
        const auto a = nodes_[n.inputs[0]].value.values();
        const auto b = nodes_[n.inputs[1]].value.values();
        if (Array* d = buf(n.inputs[0])) {
          auto dv = d->values();
          for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += gv[i] / b[i];
        }
        if (Array* d = buf(n.inputs[1])) {
          auto dv = d->values();
          for (std::size_t i = 0; i < dv.size(); ++i) dv[i] -= gv[i] * a[i] / (b[i] * b[i]);
        }
        break;
      }
      case Op::kElemMax: {
        const auto a = nodes_[n.inputs[0]].value.values();
        const auto b = nodes_[n.inputs[1]].value.values();
        Array* da = buf(n.inputs[0]);
        Array* db = buf(n.inputs[1]);
        for (std::size_t i = 0; i < gv.size(); ++i) {
          if (a[i] >= b[i]) {
            if (da) da->values()[i] += gv[i];
          } else if (db) {
            db->values()[i] += gv[i];
          }
        }
        break;
      }
      case Op::kMatMul: {
        const Array& a = nodes_[n.inputs[0]].value;
        const Array& b = nodes_[n.inputs[1]].value;
        const std::size_t m = a.dim(0), k = a.dim(1), cols = b.dim(1);
        if (Array* d = buf(n.inputs[0])) {
          const Array bt = transpose(b);
          gemm_nn(g.values().data(), bt.values().data(), d->values().data(), m, cols, k);
        }
        if (Array* d = buf(n.inputs[1])) {
          gemm_tn(a.values().data(), g.values().data(), d->values().data(), m, k, cols);
        }
        break;
      }
      case Op::kRelu:
      case Op::kAbs:
      case Op::kExp:
      case Op::kLog:
      case Op::kSqrt:
      case Op::kSquare:
      case Op::kLogistic:
      case Op::kSoftplus:
      case Op::kAcos:
      case Op::kAffine:
      case Op::kClamp: {
        Array* d = buf(n.inputs[0]);
        if (!d) break;
        const auto x = nodes_[n.inputs[0]].value.values();
        const auto y = n.value.values();
        auto dv = d->values();
        for (std::size_t i = 0; i < dv.size(); ++i) {
          double local = 0.0;
          switch (n.op) {
            case Op::kRelu: local = x[i] > 0 ? 1.0 : 0.0; break;
            case Op::kAbs: local = x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0); break;
            case Op::kExp: local = y[i]; break;
            case Op::kLog: local = 1.0 / x[i]; break;
            case Op::kSqrt: local = x[i] > 0 ? 0.5 / y[i] : 0.0; break;
            case Op::kSquare: local = 2.0 * x[i]; break;
            case Op::kLogistic: local = y[i] * (1.0 - y[i]); break;
            case Op::kSoftplus: local = logistic_value(x[i]); break;
            case Op::kAcos:
              local = std::abs(x[i]) < 1.0 ? -1.0 / std::sqrt(1.0 - x[i] * x[i]) : 0.0;
              break;
            case Op::kAffine: local = n.a; break;
            case Op::kClamp: local = (x[i] > n.a && x[i] < n.b) ? 1.0 : 0.0; break;
            default: break;
          }
          dv[i] += gv[i] * local;
        }
        break;
      }
      case Op::kMaxReduce:
      case Op::kSumReduce:
      case Op::kMeanReduce: {
        Array* d = buf(n.inputs[0]);
        if (!d) break;
        const ReduceGeom geom = reduce_geom(nodes_[n.inputs[0]].value.shape(),
                                            n.all_axes ? std::nullopt
                                                       : std::optional<std::size_t>(n.axis));
        const AxisView& v = geom.view;
        auto dv = d->values();
        if (n.op == Op::kMaxReduce) {
          for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t k = 0; k < v.inner; ++k) {
              const std::size_t lane = o * v.inner + k;
              dv[(o * v.len + n.index[lane]) * v.inner + k] += gv[lane];
            }
        } else {
          const double scale =
              n.op == Op::kMeanReduce ? 1.0 / static_cast<double>(v.len) : 1.0;
          for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t i = 0; i < v.len; ++i)
              for (std::size_t k = 0; k < v.inner; ++k)
                dv[(o * v.len + i) * v.inner + k] += scale * gv[o * v.inner + k];
        }
        break;
      }
      case Op::kSort: {
        Array* d = buf(n.inputs[0]);
        if (!d) break;
        const AxisView v = axis_view(n.value.shape(), n.axis);
        auto dv = d->values();
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t k = 0; k < v.inner; ++k) {
            const std::size_t lane = o * v.inner + k;
            for (std::size_t p = 0; p < v.len; ++p) {
              const std::size_t src = n.index[lane * v.len + p];
              dv[(o * v.len + src) * v.inner + k] += gv[(o * v.len + p) * v.inner + k];
            }
          }
        break;
      }
      case Op::kConcat: {
        const AxisView ov = axis_view(n.value.shape(), n.axis);
        std::size_t offset = 0;
        for (std::size_t in : n.inputs) {
          const std::size_t len = nodes_[in].value.dim(n.axis);
          if (Array* d = buf(in)) {
            auto dv = d->values();
            for (std::size_t o = 0; o < ov.outer; ++o)
              for (std::size_t t = 0; t < len * ov.inner; ++t)
                dv[o * len * ov.inner + t] += gv[(o * ov.len + offset) * ov.inner + t];
          }
          offset += len;
        }
        break;
      }
      case Op::kSlice: {
        Array* d = buf(n.inputs[0]);
        if (!d) break;
        const AxisView v = axis_view(nodes_[n.inputs[0]].value.shape(), n.axis);
        const std::size_t begin = static_cast<std::size_t>(n.a);
        const std::size_t len = n.value.dim(n.axis);
        auto dv = d->values();
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t t = 0; t < len * v.inner; ++t)
            dv[(o * v.len + begin) * v.inner + t] += gv[o * len * v.inner + t];
        break;
      }
      case Op::kBroadcast: {
        Array* d = buf(n.inputs[0]);
        if (!d) break;
        const auto offsets =
            broadcast_offsets(nodes_[n.inputs[0]].value.shape(), n.value.shape());
        auto dv = d->values();
        for (std::size_t t = 0; t < gv.size(); ++t) dv[offsets[t]] += gv[t];
        break;
      }
      case Op::kReshape: {
        if (Array* d = buf(n.inputs[0])) {
          auto dv = d->values();
          for (std::size_t i = 0; i < dv.size(); ++i) dv[i] += gv[i];
        }
        break;
      }
      case Op::kGatherRows: {
        Array* d = buf(n.inputs[0]);
        if (!d) break;
        const std::size_t cols = n.value.dim(1);
        auto dv = d->values();
        for (std::size_t r = 0; r < n.index.size(); ++r)
          for (std::size_t c = 0; c < cols; ++c) dv[n.index[r] * cols + c] += gv[r * cols + c];
        break;
      }
    }
  }
}

Array Tape::gradient(Var v) const {
  if (v.id < grads_.size() && grads_[v.id].size() == nodes_[v.id].value.size() &&
      grads_[v.id].shape() == nodes_[v.id].value.shape()) {
    return grads_[v.id];
  }
  return Array(nodes_.at(v.id).value.shape(), 0.0);
}

// ---------------------------------------------------------------- kinks

std::uint64_t Tape::branch_signature() const {
  std::uint64_t h = kFnvOffset;
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (!n.requires_grad) continue;
    switch (n.op) {
      case Op::kRelu:
      case Op::kAbs:
      case Op::kSqrt:
      case Op::kClamp: {
        mix(h, id);
        const auto x = nodes_[n.inputs[0]].value.values();
        for (double v : x) {
          std::uint64_t side = 0;
          if (n.op == Op::kClamp) {
            side = v <= n.a ? 0 : (v >= n.b ? 2 : 1);
          } else {
            side = v > 0 ? 2 : (v < 0 ? 0 : 1);
          }
          mix(h, side);
        }
        break;
      }
      case Op::kElemMax: {
        mix(h, id);
        const auto a = nodes_[n.inputs[0]].value.values();
        const auto b = nodes_[n.inputs[1]].value.values();
        for (std::size_t i = 0; i < a.size(); ++i) mix(h, a[i] >= b[i] ? 1 : 0);
        break;
      }
      case Op::kMaxReduce:
      case Op::kSort:
        mix(h, id);
        for (std::size_t i : n.index) mix(h, i);
        break;
      default:
        break;
    }
  }
  return h;
}

bool Tape::at_kink() const {
  for (const Node& n : nodes_) {
    if (!n.requires_grad) continue;
    switch (n.op) {
      case Op::kRelu:
      case Op::kAbs:
      case Op::kSqrt:
        for (double v : nodes_[n.inputs[0]].value.values())
          if (v == 0.0) return true;
        break;
      case Op::kClamp:
        for (double v : nodes_[n.inputs[0]].value.values())
          if (v == n.a || v == n.b) return true;
        break;
      case Op::kElemMax: {
        const auto a = nodes_[n.inputs[0]].value.values();
        const auto b = nodes_[n.inputs[1]].value.values();
        for (std::size_t i = 0; i < a.size(); ++i)
          if (a[i] == b[i]) return true;
        break;
      }
      case Op::kMaxReduce: {
        const Node& in = nodes_[n.inputs[0]];
        const ReduceGeom geom = reduce_geom(
            in.value.shape(), n.all_axes ? std::nullopt : std::optional<std::size_t>(n.axis));
        const AxisView& v = geom.view;
        const auto x = in.value.values();
        for (std::size_t o = 0; o < v.outer; ++o)
          for (std::size_t k = 0; k < v.inner; ++k) {
            const std::size_t lane = o * v.inner + k;
            const double best = n.value.values()[lane];
            for (std::size_t i = 0; i < v.len; ++i)
              if (i != n.index[lane] && x[(o * v.len + i) * v.inner + k] == best) return true;
          }
        break;
      }
      default:
        // Sort ties are not reported: equal endpoints often carry zero weight
        // downstream. Crossing is caught through branch_signature().
        break;
    }
  }
  return false;
}

// ---------------------------------------------------------------- kernels

Array matmul(const Array& a, const Array& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  }
  Array c(Shape{a.dim(0), b.dim(1)}, 0.0);
  gemm_nn(a.values().data(), b.values().data(), c.values().data(), a.dim(0), a.dim(1),
          b.dim(1));
  return c;
}

}  // namespace qmet::diff
