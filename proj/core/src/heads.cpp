#include "qmet/heads.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "qmet/random.hpp"

namespace qmet::heads {

using diff::Array;
using diff::Shape;

namespace {

double inverse_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }

Array uniform_array(Shape shape, double lo, double hi, Rng& rng) {
  Array a(std::move(shape));
  for (double& x : a.values()) x = rng.uniform(lo, hi);
  return a;
}

// Raw values whose softplus is uniform in (lo, hi).
Array softplus_uniform(Shape shape, double lo, double hi, Rng& rng) {
  Array a(std::move(shape));
  for (double& x : a.values()) x = inverse_softplus(rng.uniform(lo, hi));
  return a;
}

void require_same(const Tape& tape, Var u, Var v, std::size_t dim, const char* what) {
  const Shape& su = tape.shape(u);
  const Shape& sv = tape.shape(v);
  if (su != sv || su.size() != 2 || su[1] != dim) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                diff::shape_string(su) + " vs " + diff::shape_string(sv) +
                                " (latent dim " + std::to_string(dim) + ")");
  }
}

// [max(x, y), a * relu(x) + b * relu(y)] over the two halves of the channels.
Var maxrelu(Tape& tape, Var pre, Var a, Var b) {
  const std::size_t h = tape.shape(pre)[1];
  const Var x = tape.slice(pre, 1, 0, h / 2);
  const Var y = tape.slice(pre, 1, h / 2, h);
  const Var mx = tape.elem_max(x, y);
  const Var mix = tape.add(tape.mul(tape.relu(x), a), tape.mul(tape.relu(y), b));
  return tape.concat({mx, mix}, 1);
}

}  // namespace

// ---------------------------------------------------------------- IQE / PQE

double interval_union_length(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw std::invalid_argument("interval_union_length: size mismatch");
  std::vector<std::pair<double, double>> iv;
  iv.reserve(u.size());
  for (std::size_t j = 0; j < u.size(); ++j) iv.emplace_back(u[j], std::max(u[j], v[j]));
  std::sort(iv.begin(), iv.end());
  double total = 0.0;
  double lo = 0.0, hi = 0.0;
  bool open = false;
  for (const auto& [a, b] : iv) {
    if (!open) {
      lo = a;
      hi = b;
      open = true;
    } else if (a <= hi) {
      hi = std::max(hi, b);
    } else {
      total += hi - lo;
      lo = a;
      hi = b;
    }
  }
  if (open) total += hi - lo;
  return total;
}

Var iqe_components(Tape& tape, Var u, Var v, std::size_t k, std::size_t l) {
  require_same(tape, u, v, k * l, "iqe_components");
  const std::size_t batch = tape.shape(u)[0];
  const std::size_t rows = batch * k;
  const Var ur = tape.reshape(u, Shape{rows, l});
  const Var vr = tape.reshape(v, Shape{rows, l});
  const Var ends = tape.elem_max(ur, vr);
  const Var sorted = tape.sort(tape.concat({ur, ends}, 1), 1);

  // Sweep the sorted endpoints. Starts of nondegenerate intervals raise the
  // coverage count, their ends lower it. With f_p = [coverage after p > 0],
  // the measure is sum_p x_p (f_{p-1} - f_p).
  const auto& perm = tape.sort_permutation(sorted);
  const auto uv = tape.value(ur).values();
  const auto vv = tape.value(vr).values();
  Array coef(Shape{rows, 2 * l}, 0.0);
  auto cv = coef.values();
  for (std::size_t r = 0; r < rows; ++r) {
    long coverage = 0;
    double prev = 0.0;
    for (std::size_t p = 0; p < 2 * l; ++p) {
      const std::size_t src = perm[r * 2 * l + p];
      const std::size_t j = src < l ? src : src - l;
      if (uv[r * l + j] < vv[r * l + j]) coverage += src < l ? 1 : -1;
      const double f = coverage > 0 ? 1.0 : 0.0;
      cv[r * 2 * l + p] = prev - f;
      prev = f;
    }
  }
  const Var measure = tape.sum_reduce(tape.mul(sorted, tape.constant(std::move(coef))), 1);
  return tape.reshape(measure, Shape{batch, k});
}

Var maxmean_reduce(Tape& tape, Var components, Var alpha) {
  const Shape& s = tape.shape(components);
  if (s.size() != 2 || s[1] == 0) {
    throw std::invalid_argument("maxmean_reduce: need nonempty [B, k], got " +
                                diff::shape_string(s));
  }
  const Var mx = tape.max_reduce(components, 1);
  const Var mean = tape.mean_reduce(components, 1);
  return tape.add(tape.mul(alpha, mx), tape.mul(tape.affine(alpha, -1.0, 1.0), mean));
}

Var iqe_sum(Tape& tape, Var u, Var v, std::size_t k, std::size_t l) {
  return tape.sum_reduce(iqe_components(tape, u, v, k, l), 1);
}

Var iqe_maxmean(Tape& tape, Var u, Var v, std::size_t k, std::size_t l, Var alpha) {
  return maxmean_reduce(tape, iqe_components(tape, u, v, k, l), alpha);
}

Var pqe_lh_components(Tape& tape, Var u, Var v, std::size_t k, std::size_t l, Var alpha) {
  require_same(tape, u, v, k * l, "pqe_lh");
  const std::size_t batch = tape.shape(u)[0];
  const Var diff = tape.reshape(tape.relu(tape.sub(u, v)), Shape{batch * k, l});
  const Var rate = tape.reshape(tape.sum_reduce(diff, 1), Shape{batch, k});
  const Var mass = tape.affine(tape.exp(tape.neg(rate)), -1.0, 1.0);
  return tape.mul(mass, alpha);
}

Var pqe_lh(Tape& tape, Var u, Var v, std::size_t k, std::size_t l, Var alpha) {
  return tape.sum_reduce(pqe_lh_components(tape, u, v, k, l, alpha), 1);
}

// ---------------------------------------------------------------- MRN, metrics

Var mrn_combine(Tape& tape, Var sym_u, Var sym_v, Var asym_u, Var asym_v, Variant variant) {
  const Var sq = tape.sum_reduce(tape.square(tape.sub(sym_u, sym_v)), 1);
  const Var sym = variant == Variant::kOrig ? sq : tape.sqrt(sq);
  const Var asym = tape.max_reduce(tape.relu(tape.sub(asym_u, asym_v)), 1);
  return tape.add(sym, asym);
}

Var euclid_distance(Tape& tape, Var u, Var v) {
  return tape.sqrt(tape.sum_reduce(tape.square(tape.sub(u, v)), 1));
}

Var l1_distance(Tape& tape, Var u, Var v) {
  return tape.sum_reduce(tape.abs(tape.sub(u, v)), 1);
}

Var sphere_angle(Tape& tape, Var u, Var v) {
  auto unit = [&](Var x) {
    const Var norm = tape.sqrt(tape.sum_reduce(tape.square(x), 1));
    for (double n : tape.value(norm).values()) {
      if (n == 0.0) throw std::invalid_argument("sphere: zero latent vector");
    }
    const std::size_t b = tape.shape(x)[0];
    return tape.div(x, tape.reshape(norm, Shape{b, 1}));
  };
  const Var cosine = tape.sum_reduce(tape.mul(unit(u), unit(v)), 1);
  return tape.acos(tape.clamp(cosine, -1.0, 1.0));
}

Var apply_output_transform(Tape& tape, Var raw, OutputTransform transform, double gamma,
                           std::size_t* clamped) {
  constexpr double kFloor = 1e-12;
  auto discounted_to_distance = [&](Var o) {
    if (clamped) {
      for (double x : tape.value(o).values())
        if (!(x >= kFloor && x <= 1.0)) ++*clamped;
    }
    const Var safe = tape.clamp(o, kFloor, 1.0);
    return tape.affine(tape.log(safe), 1.0 / std::log(gamma));
  };
  switch (transform) {
    case OutputTransform::kDirect: return raw;
    case OutputTransform::kExp: return tape.exp(raw);
    case OutputTransform::kSquare: return tape.square(raw);
    case OutputTransform::kDiscounted: return discounted_to_distance(raw);
    case OutputTransform::kSigmoidDiscounted: return discounted_to_distance(tape.logistic(raw));
  }
  return raw;
}

// ---------------------------------------------------------------- parameter counts

std::size_t head_param_count(const HeadSpec& spec) {
  const std::size_t d = spec.latent_dim();
  const std::size_t h = spec.hidden;
  switch (spec.family) {
    case HeadFamily::kIqeSum: return 0;
    case HeadFamily::kIqeMaxMean: return 1;
    case HeadFamily::kPqeLh: return spec.k;
    case HeadFamily::kDeepNormOrig:
    case HeadFamily::kDeepNormFixed: {
      const std::size_t maxrelu_layers =
          spec.family == HeadFamily::kDeepNormOrig ? spec.layers : spec.layers - 1;
      return spec.layers * d * h + (spec.layers - 1) * h * h + maxrelu_layers * h + 1;
    }
    case HeadFamily::kWideNorm: return 2 * d * spec.components * spec.component_size + 1;
    case HeadFamily::kMrnOrig:
    case HeadFamily::kMrnFixed: return 2 * (d * h + h * h);
    case HeadFamily::kMetricEuclid:
    case HeadFamily::kMetricL1: return 0;
    case HeadFamily::kMetricSphere: return 1;
    case HeadFamily::kMetricMix: return 3;
    case HeadFamily::kAsymDot:
    case HeadFamily::kUnconstrained: return 0;
  }
  return 0;
}

// ---------------------------------------------------------------- LatentHead

LatentHead::LatentHead(const HeadSpec& spec, ParamStore& store, std::uint64_t seed)
    : spec_(spec), store_(&store) {
  spec_.validate();
  if (is_pair_baseline(spec_.family)) {
    throw std::invalid_argument("LatentHead: " + std::string(to_string(spec_.family)) +
                                " is a pair baseline, not a latent head");
  }
  Rng rng(seed);
  const std::size_t d = spec_.latent_dim();
  const std::size_t h = spec_.hidden;
  const std::string tag(to_string(spec_.family));
  auto maxmean_alpha = [&] {
    alpha_raw_ = store.add(tag + ".alpha", Array::scalar(0.0));
  };

  switch (spec_.family) {
    case HeadFamily::kIqeSum:
      break;
    case HeadFamily::kIqeMaxMean:
      maxmean_alpha();
      break;
    case HeadFamily::kPqeLh:
      weights_ = store.add(tag + ".scale",
                           Array(Shape{spec_.k},
                                 inverse_softplus(1.0 / static_cast<double>(spec_.k))));
      break;
    case HeadFamily::kDeepNormOrig:
    case HeadFamily::kDeepNormFixed: {
      const bool fixed = spec_.family == HeadFamily::kDeepNormFixed;
      for (std::size_t t = 0; t < spec_.layers; ++t) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d));
        inject_.push_back(store.add(tag + ".U" + std::to_string(t),
                                    uniform_array(Shape{d, h}, -bound, bound, rng)));
      }
      for (std::size_t t = 1; t < spec_.layers; ++t) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(h));
        inner_.push_back(store.add(tag + ".W" + std::to_string(t),
                                   softplus_uniform(Shape{h, h}, 1e-3, bound, rng)));
      }
      const std::size_t maxrelu_layers = fixed ? spec_.layers - 1 : spec_.layers;
      for (std::size_t t = 0; t < maxrelu_layers; ++t) {
        relu_a_.push_back(store.add(tag + ".a" + std::to_string(t),
                                    Array(Shape{h / 2}, inverse_softplus(0.5))));
        relu_b_.push_back(store.add(tag + ".b" + std::to_string(t),
                                    Array(Shape{h / 2}, inverse_softplus(0.5))));
      }
      maxmean_alpha();
      break;
    }
    case HeadFamily::kWideNorm: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(2 * d));
      weights_ = store.add(
          tag + ".W",
          softplus_uniform(Shape{2 * d, spec_.components * spec_.component_size}, 1e-3, bound,
                           rng));
      maxmean_alpha();
      break;
    }
    case HeadFamily::kMrnOrig:
    case HeadFamily::kMrnFixed: {
      const double b1 = 1.0 / std::sqrt(static_cast<double>(d));
      const double b2 = 1.0 / std::sqrt(static_cast<double>(h));
      for (const char* part : {"sym", "asym"}) {
        mrn_.push_back(store.add(tag + "." + part + "1", uniform_array(Shape{d, h}, -b1, b1, rng)));
        mrn_.push_back(store.add(tag + "." + part + "2", uniform_array(Shape{h, h}, -b2, b2, rng)));
      }
      break;
    }
    case HeadFamily::kMetricEuclid:
    case HeadFamily::kMetricL1:
      break;
    case HeadFamily::kMetricSphere:
      weights_ = store.add(tag + ".scale", Array::scalar(inverse_softplus(1.0)));
      break;
    case HeadFamily::kMetricMix:
      weights_ = store.add(tag + ".weights", Array(Shape{3}, inverse_softplus(1.0 / 3.0)));
      break;
    case HeadFamily::kAsymDot:
    case HeadFamily::kUnconstrained:
      break;
  }
}

std::size_t LatentHead::param_count() const {
  std::size_t n = 0;
  auto count = [&](ParamId id) { n += store_->value(id).size(); };
  for (auto* group : {&inject_, &inner_, &relu_a_, &relu_b_, &mrn_})
    for (ParamId id : *group) count(id);
  if (weights_) count(*weights_);
  if (alpha_raw_) count(*alpha_raw_);
  return n;
}

std::optional<double> LatentHead::maxmean_alpha() const {
  if (!alpha_raw_) return std::nullopt;
  const double raw = store_->value(*alpha_raw_).item();
  return 1.0 / (1.0 + std::exp(-raw));
}

Var LatentHead::alpha(Tape& tape) const { return tape.logistic(p(tape, *alpha_raw_)); }

Var LatentHead::deep_norm_components(Tape& tape, Var u, Var v) const {
  const bool fixed = spec_.family == HeadFamily::kDeepNormFixed;
  const Var z = tape.sub(u, v);
  Var h{};
  for (std::size_t t = 0; t < spec_.layers; ++t) {
    Var pre = tape.matmul(z, p(tape, inject_[t]));
    if (t > 0) pre = tape.add(tape.matmul(h, tape.softplus(p(tape, inner_[t - 1]))), pre);
    const bool last = t + 1 == spec_.layers;
    if (last && fixed) {
      h = tape.relu(pre);
    } else {
      h = maxrelu(tape, pre, tape.softplus(p(tape, relu_a_[t])),
                  tape.softplus(p(tape, relu_b_[t])));
    }
  }
  return h;
}

Var LatentHead::wide_norm_components(Tape& tape, Var u, Var v) const {
  const std::size_t batch = tape.shape(u)[0];
  const Var feat = tape.concat({tape.relu(tape.sub(u, v)), tape.relu(tape.sub(v, u))}, 1);
  const Var proj = tape.matmul(feat, tape.softplus(p(tape, *weights_)));
  const Var per = tape.reshape(proj, Shape{batch * spec_.components, spec_.component_size});
  const Var norms = tape.sqrt(tape.sum_reduce(tape.square(per), 1));
  return tape.reshape(norms, Shape{batch, spec_.components});
}

Var LatentHead::mrn_projection(Tape& tape, Var x, ParamId first, ParamId second) const {
  return tape.matmul(tape.relu(tape.matmul(x, p(tape, first))), p(tape, second));
}

std::optional<Var> LatentHead::components(Tape& tape, Var u, Var v) const {
  const std::size_t d = spec_.latent_dim();
  require_same(tape, u, v, d, "latent head");
  switch (spec_.family) {
    case HeadFamily::kIqeSum:
    case HeadFamily::kIqeMaxMean:
      return iqe_components(tape, u, v, spec_.k, spec_.l);
    case HeadFamily::kPqeLh:
      return pqe_lh_components(tape, u, v, spec_.k, spec_.l,
                               tape.softplus(p(tape, *weights_)));
    case HeadFamily::kDeepNormOrig:
    case HeadFamily::kDeepNormFixed:
      return deep_norm_components(tape, u, v);
    case HeadFamily::kWideNorm:
      return wide_norm_components(tape, u, v);
    case HeadFamily::kMrnOrig:
    case HeadFamily::kMrnFixed: {
      const std::size_t batch = tape.shape(u)[0];
      const Var su = mrn_projection(tape, u, mrn_[0], mrn_[1]);
      const Var sv = mrn_projection(tape, v, mrn_[0], mrn_[1]);
      const Var au = mrn_projection(tape, u, mrn_[2], mrn_[3]);
      const Var av = mrn_projection(tape, v, mrn_[2], mrn_[3]);
      const Var sq = tape.sum_reduce(tape.square(tape.sub(su, sv)), 1);
      const Var sym = spec_.family == HeadFamily::kMrnOrig ? sq : tape.sqrt(sq);
      const Var asym = tape.max_reduce(tape.relu(tape.sub(au, av)), 1);
      return tape.concat({tape.reshape(sym, Shape{batch, 1}), tape.reshape(asym, Shape{batch, 1})},
                         1);
    }
    default:
      return std::nullopt;
  }
}

Var LatentHead::distance(Tape& tape, Var u, Var v) const {
  const std::size_t d = spec_.latent_dim();
  require_same(tape, u, v, d, "latent head");
  switch (spec_.family) {
    case HeadFamily::kIqeSum:
      return iqe_sum(tape, u, v, spec_.k, spec_.l);
    case HeadFamily::kIqeMaxMean:
      return iqe_maxmean(tape, u, v, spec_.k, spec_.l, alpha(tape));
    case HeadFamily::kPqeLh:
      return pqe_lh(tape, u, v, spec_.k, spec_.l, tape.softplus(p(tape, *weights_)));
    case HeadFamily::kDeepNormOrig:
    case HeadFamily::kDeepNormFixed:
      return maxmean_reduce(tape, deep_norm_components(tape, u, v), alpha(tape));
    case HeadFamily::kWideNorm:
      return maxmean_reduce(tape, wide_norm_components(tape, u, v), alpha(tape));
    case HeadFamily::kMrnOrig:
    case HeadFamily::kMrnFixed: {
      const Variant variant =
          spec_.family == HeadFamily::kMrnOrig ? Variant::kOrig : Variant::kFixed;
      return mrn_combine(tape, mrn_projection(tape, u, mrn_[0], mrn_[1]),
                         mrn_projection(tape, v, mrn_[0], mrn_[1]),
                         mrn_projection(tape, u, mrn_[2], mrn_[3]),
                         mrn_projection(tape, v, mrn_[2], mrn_[3]), variant);
    }
    case HeadFamily::kMetricEuclid:
      return euclid_distance(tape, u, v);
    case HeadFamily::kMetricL1:
      return l1_distance(tape, u, v);
    case HeadFamily::kMetricSphere:
      return tape.mul(tape.softplus(p(tape, *weights_)), sphere_angle(tape, u, v));
    case HeadFamily::kMetricMix: {
      const Var w = tape.softplus(p(tape, *weights_));
      const Var e = tape.mul(tape.slice(w, 0, 0, 1), euclid_distance(tape, u, v));
      const Var m = tape.mul(tape.slice(w, 0, 1, 2), l1_distance(tape, u, v));
      const Var s = tape.mul(tape.slice(w, 0, 2, 3), sphere_angle(tape, u, v));
      return tape.add(tape.add(e, m), s);
    }
    case HeadFamily::kAsymDot:
    case HeadFamily::kUnconstrained:
      break;
  }
  throw std::logic_error("LatentHead: unsupported family");
}

std::vector<ProfileRow> profile_head(const LatentHead& head, std::span<const double> u0,
                                     std::span<const double> v0, std::span<const double> scales) {
  const std::size_t d = head.spec().latent_dim();
  if (u0.size() != d || v0.size() != d)
    throw std::invalid_argument("profile_head: latents must have length " + std::to_string(d));
  const std::size_t n = scales.size();
  Array u(Shape{n, d}), v(Shape{n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      u.at(i, j) = scales[i] * u0[j];
      v.at(i, j) = scales[i] * v0[j];
    }
  }
  Tape tape;
  const Var cu = tape.constant(std::move(u));
  const Var cv = tape.constant(std::move(v));
  const auto dist = tape.value(head.distance(tape, cu, cv)).values();
  const auto comps = head.components(tape, cu, cv);
  std::vector<ProfileRow> rows(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i].scale = scales[i];
    rows[i].distance = dist[i];
    if (comps) {
      const Array& c = tape.value(*comps);
      const std::size_t k = c.dim(1);
      rows[i].components.assign(c.values().begin() + static_cast<std::ptrdiff_t>(i * k),
                                c.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    }
  }
  return rows;
}

}  // namespace qmet::heads
