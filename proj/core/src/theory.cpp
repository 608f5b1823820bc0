#include "qmet/theory.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <utility>

#include "qmet/heads.hpp"
#include "qmet/model.hpp"
#include "qmet/random.hpp"
#include "qmet/tape.hpp"

namespace qmet::theory {

using diff::ParamStore;
using diff::Shape;
using diff::Tape;
using diff::Var;

namespace {

Array rows_of(const Array& table, const std::vector<std::size_t>& rows) {
  const std::size_t w = table.dim(1);
  Array out(Shape{rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(table.values().data() + rows[i] * w, w, out.values().data() + i * w);
  return out;
}

// Worst |head(f(x), f(y)) - target(x, y)| over all ordered pairs, batched.
template <typename Head, typename Target>
double max_pair_error(const Array& latents, Head head, Target target) {
  const std::size_t n = latents.dim(0);
  constexpr std::size_t kChunk = 2048;
  double worst = 0.0;
  std::vector<std::size_t> xs, ys;
  auto flush = [&] {
    if (xs.empty()) return;
    Tape tape;
    const Var d = head(tape, tape.constant(rows_of(latents, xs)), tape.constant(rows_of(latents, ys)));
    const auto vals = tape.value(d).values();
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double err = std::abs(vals[i] - target(xs[i], ys[i]));
      worst = std::max(worst, std::isnan(err) ? std::numeric_limits<double>::infinity() : err);
    }
    xs.clear();
    ys.clear();
  };
  for (std::size_t x = 0; x < n; ++x) {
    for (std::size_t y = 0; y < n; ++y) {
      xs.push_back(x);
      ys.push_back(y);
      if (xs.size() == kChunk) flush();
    }
  }
  flush();
  return worst;
}

}  // namespace

EmbeddingCertificate exact_embed_maxmean(const graphs::DistanceOracle& oracle) {
  const std::size_t n = oracle.n;
  if (n == 0) throw std::invalid_argument("exact_embed_maxmean: empty oracle");
  if (n > 512) throw std::invalid_argument("exact_embed_maxmean: n > 512 not supported");
  if (!oracle.all_finite())
    throw std::invalid_argument("exact_embed_maxmean: the construction needs finite distances");

  EmbeddingCertificate cert;
  cert.head.family = HeadFamily::kIqeMaxMean;
  cert.head.k = n;
  cert.head.l = 1;
  cert.latents = Array(Shape{n, n});
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t z = 0; z < n; ++z) cert.latents.at(x, z) = -oracle(x, z);
  cert.max_error = max_pair_error(
      cert.latents,
      [n](Tape& t, Var u, Var v) { return heads::iqe_maxmean(t, u, v, n, 1, t.scalar(1.0)); },
      [&](std::size_t x, std::size_t y) { return oracle(x, y); });
  cert.note =
      "f(x)_z = -d(x,z); component z = (f(y)_z - f(x)_z)^+ = (d(x,z) - d(y,z))^+; alpha pinned to 1";
  return cert;
}

Quasipartition quasipartition_from_order(std::vector<std::vector<std::size_t>> g) {
  Quasipartition q;
  q.n = g.size();
  q.g = std::move(g);
  q.pi.assign(q.n * q.n, 0);
  for (std::size_t u = 0; u < q.n; ++u) {
    for (std::size_t v = 0; v < q.n; ++v) {
      bool below = true;
      for (std::size_t c = 0; c < q.g[u].size(); ++c) below = below && q.g[u][c] <= q.g[v][c];
      q.pi[u * q.n + v] = below ? 0 : 1;
    }
  }
  return q;
}

void validate_quasipartition(const Quasipartition& q) {
  if (q.g.size() != q.n || q.pi.size() != q.n * q.n)
    throw std::invalid_argument("quasipartition: table sizes disagree with n");
  const std::size_t m = q.n ? q.g[0].size() : 0;
  for (const auto& row : q.g) {
    if (row.size() != m) throw std::invalid_argument("quasipartition: ragged order embedding");
    for (std::size_t x : row)
      if (x < 1 || x > q.n)
        throw std::invalid_argument("quasipartition: order embedding values must lie in [1, n]");
  }
  const Quasipartition induced = quasipartition_from_order(q.g);
  for (std::size_t i = 0; i < q.pi.size(); ++i) {
    if (q.pi[i] != induced.pi[i]) {
      throw std::invalid_argument("quasipartition: pi(" + std::to_string(i / q.n) + "," +
                                  std::to_string(i % q.n) +
                                  ") disagrees with the order embedding");
    }
  }
}

namespace {

// Writes s * concat(e_{g_1(u)}, ..., e_{g_m(u)}) into dst (length m * n).
void write_order_block(const Quasipartition& q, std::size_t u, double scale, double* dst) {
  for (std::size_t c = 0; c < q.g[u].size(); ++c)
    for (std::size_t j = 0; j < q.n; ++j) dst[c * q.n + j] = (j + 1 > q.g[u][c]) ? scale : 0.0;
}

}  // namespace

EmbeddingCertificate quasipartition_embed_sum(const Quasipartition& q, double scale) {
  validate_quasipartition(q);
  if (!(scale >= 0.0)) throw std::invalid_argument("quasipartition scale must be >= 0");
  const std::size_t m = q.n ? q.g[0].size() : 0;
  if (m == 0) throw std::invalid_argument("quasipartition: empty order embedding");
  EmbeddingCertificate cert;
  cert.head.family = HeadFamily::kIqeSum;
  cert.head.k = 1;
  cert.head.l = m * q.n;
  cert.latents = Array(Shape{q.n, m * q.n});
  for (std::size_t u = 0; u < q.n; ++u)
    write_order_block(q, u, scale, cert.latents.values().data() + u * m * q.n);
  const std::size_t l = cert.head.l;
  cert.max_error = max_pair_error(
      cert.latents, [l](Tape& t, Var u, Var v) { return heads::iqe_sum(t, u, v, 1, l); },
      [&](std::size_t u, std::size_t v) { return scale * q(u, v); });
  cert.note = "single IQE component over m blocks of e_i indicators";
  return cert;
}

EmbeddingCertificate convex_combination_embed(const std::vector<Quasipartition>& parts,
                                              const std::vector<double>& weights) {
  if (parts.empty() || parts.size() != weights.size())
    throw std::invalid_argument("convex combination: need one weight per quasipartition");
  const std::size_t n = parts[0].n;
  std::size_t l = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    validate_quasipartition(parts[i]);
    if (parts[i].n != n) throw std::invalid_argument("convex combination: node counts differ");
    if (!(weights[i] >= 0.0)) throw std::invalid_argument("convex combination: negative weight");
    l = std::max(l, parts[i].g[0].size() * n);
  }
  const std::size_t k = parts.size();
  EmbeddingCertificate cert;
  cert.head.family = HeadFamily::kIqeSum;
  cert.head.k = k;
  cert.head.l = l;
  cert.latents = Array(Shape{n, k * l}, 0.0);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t i = 0; i < k; ++i)
      write_order_block(parts[i], u, weights[i], cert.latents.values().data() + u * k * l + i * l);
  cert.max_error = max_pair_error(
      cert.latents, [k, l](Tape& t, Var u, Var v) { return heads::iqe_sum(t, u, v, k, l); },
      [&](std::size_t u, std::size_t v) {
        double s = 0.0;
        for (std::size_t i = 0; i < k; ++i) s += weights[i] * parts[i](u, v);
        return s;
      });
  cert.note = "one zero-padded IQE component per weighted quasipartition";
  return cert;
}

double integral_pqe_lh(std::span<const double> u, std::span<const double> v, double c) {
  if (u.size() != v.size()) throw std::invalid_argument("integral_pqe_lh: size mismatch");
  std::vector<std::pair<double, int>> events;
  for (std::size_t j = 0; j < u.size(); ++j) {
    if (v[j] > u[j]) {
      events.emplace_back(u[j], +1);
      events.emplace_back(v[j], -1);
    }
  }
  std::sort(events.begin(), events.end());
  double total = 0.0;
  int coverage = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    coverage += events[i].second;
    if (i + 1 < events.size() && coverage > 0) {
      const double len = events[i + 1].first - events[i].first;
      total += len * -std::expm1(-c * coverage);
    }
  }
  return total;
}

std::vector<LimitRow> integral_pqe_limit_check(std::span<const double> u,
                                               std::span<const double> v,
                                               std::span<const double> c_grid) {
  const double component = heads::interval_union_length(u, v);
  std::vector<LimitRow> rows;
  for (double c : c_grid) {
    LimitRow r;
    r.c = c;
    r.integral = integral_pqe_lh(u, v, c);
    r.component = component;
    r.error = std::abs(r.integral - component);
    rows.push_back(r);
  }
  return rows;
}

namespace {

Array uniform_rows(std::size_t rows, std::size_t dim, double range, Rng& rng) {
  Array a(Shape{rows, dim});
  for (double& x : a.values()) x = rng.uniform(-range, range);
  return a;
}

Array row_copy(const Array& a, std::size_t r) { return rows_of(a, {r}).reshaped(Shape{a.dim(1)}); }

}  // namespace

std::optional<Witness> find_negativity_witness(const HeadSpec& spec, std::uint64_t seed,
                                               const SearchConfig& config) {
  ParamStore store;
  const heads::LatentHead head(spec, store, seed);
  Rng rng(derive_seed(seed, 31));
  const std::size_t dim = spec.latent_dim();
  std::size_t tried = 0;
  while (tried < config.budget) {
    const std::size_t b = std::min(config.batch, config.budget - tried);
    const Array u = uniform_rows(b, dim, config.range, rng);
    const Array v = uniform_rows(b, dim, config.range, rng);
    Tape tape;
    const auto d = tape.value(head.distance(tape, tape.constant(u), tape.constant(v))).values();
    for (std::size_t i = 0; i < b; ++i) {
      if (d[i] < -config.threshold) {
        return Witness{{row_copy(u, i), row_copy(v, i)}, d[i], seed, tried + i + 1};
      }
    }
    tried += b;
  }
  return std::nullopt;
}

std::optional<Witness> find_triangle_witness(const HeadSpec& spec, std::uint64_t seed,
                                             const SearchConfig& config) {
  ParamStore store;
  const heads::LatentHead head(spec, store, seed);
  Rng rng(derive_seed(seed, 32));
  const std::size_t dim = spec.latent_dim();
  std::size_t tried = 0;
  while (tried < config.budget) {
    const std::size_t b = std::min(config.batch, config.budget - tried);
    const Array x = uniform_rows(b, dim, config.range, rng);
    const Array y = uniform_rows(b, dim, config.range, rng);
    const Array z = uniform_rows(b, dim, config.range, rng);
    Tape tape;
    const Var cx = tape.constant(x), cy = tape.constant(y), cz = tape.constant(z);
    const auto dxy = tape.value(head.distance(tape, cx, cy)).values();
    const auto dyz = tape.value(head.distance(tape, cy, cz)).values();
    const auto dxz = tape.value(head.distance(tape, cx, cz)).values();
    for (std::size_t i = 0; i < b; ++i) {
      const double violation = dxz[i] - dxy[i] - dyz[i];
      if (violation > config.threshold) {
        return Witness{{row_copy(x, i), row_copy(y, i), row_copy(z, i)}, violation, seed,
                       tried + i + 1};
      }
    }
    tried += b;
  }
  return std::nullopt;
}

CollinearWitness mrn_collinear_witness(HeadFamily family) {
  if (family != HeadFamily::kMrnOrig && family != HeadFamily::kMrnFixed)
    throw std::invalid_argument("collinear witness applies to mrn families only");
  const auto variant = family == HeadFamily::kMrnOrig ? heads::Variant::kOrig : heads::Variant::kFixed;
  Tape tape;
  // Rows are the pairs (0,1), (1,2), (0,2); the asymmetric part is held at zero.
  const Var a = tape.constant(Array(Shape{3, 1}, std::vector<double>{0.0, 1.0, 0.0}));
  const Var b = tape.constant(Array(Shape{3, 1}, std::vector<double>{1.0, 2.0, 2.0}));
  const Var zero = tape.constant(Array(Shape{3, 1}, 0.0));
  const auto d = tape.value(heads::mrn_combine(tape, a, b, zero, zero, variant)).values();
  return CollinearWitness{d[0], d[1], d[2]};
}

bool AuditReport::satisfies_constraints(double tol) const {
  return identity_residual <= tol && triangle_violation <= tol && min_value >= -1e-12;
}

bool AuditReport::homogeneous(double tol) const {
  return std::all_of(homogeneity_residual.begin(), homogeneity_residual.end(),
                     [tol](double r) { return r <= tol; });
}

AuditReport axiom_sample_audit(const BatchDistance& distance, std::size_t dim, std::uint64_t seed,
                               const AuditCounts& counts) {
  AuditReport report;
  report.min_value = std::numeric_limits<double>::infinity();
  report.homogeneity_residual.assign(counts.alphas.size(), 0.0);
  Rng rng(derive_seed(seed, 41));
  const auto scaled = [](const Array& a, double s) {
    Array out = a;
    for (double& x : out.values()) x *= s;
    return out;
  };

  for (std::size_t done = 0; done < counts.pairs;) {
    const std::size_t b = std::min(counts.batch, counts.pairs - done);
    const Array u = uniform_rows(b, dim, counts.range, rng);
    const Array v = uniform_rows(b, dim, counts.range, rng);
    const auto duu = distance(u, u);
    const auto duv = distance(u, v);
    const auto dvu = distance(v, u);
    for (std::size_t i = 0; i < b; ++i) {
      report.identity_residual = std::max(report.identity_residual, std::abs(duu[i]));
      report.min_value = std::min(report.min_value, duv[i]);
      report.symmetry_residual = std::max(report.symmetry_residual, std::abs(duv[i] - dvu[i]));
    }
    for (std::size_t a = 0; a < counts.alphas.size(); ++a) {
      const double alpha = counts.alphas[a];
      const auto ds = distance(scaled(u, alpha), scaled(v, alpha));
      for (std::size_t i = 0; i < b; ++i) {
        const double expect = alpha * duv[i];
        const double rel = std::abs(ds[i] - expect) / std::max(std::abs(expect), 1e-12);
        report.homogeneity_residual[a] = std::max(report.homogeneity_residual[a], rel);
      }
    }
    done += b;
  }

  for (std::size_t done = 0; done < counts.triples;) {
    const std::size_t b = std::min(counts.batch, counts.triples - done);
    const Array x = uniform_rows(b, dim, counts.range, rng);
    const Array y = uniform_rows(b, dim, counts.range, rng);
    const Array z = uniform_rows(b, dim, counts.range, rng);
    const auto dxy = distance(x, y);
    const auto dyz = distance(y, z);
    const auto dxz = distance(x, z);
    for (std::size_t i = 0; i < b; ++i)
      report.triangle_violation = std::max(report.triangle_violation, dxz[i] - dxy[i] - dyz[i]);
    done += b;
  }
  return report;
}

AuditReport audit_family(const HeadSpec& spec, std::uint64_t seed, const AuditCounts& counts,
                         std::size_t feature_dim) {
  AuditReport report;
  if (is_pair_baseline(spec.family)) {
    model::ModelSpec ms;
    ms.head = spec;
    ms.feature_dim = feature_dim;
    ms.hidden = {32, 32};
    auto m = std::make_shared<model::Model>(ms, seed);
    const BatchDistance fn = [m](const Array& u, const Array& v) {
      const std::size_t b = u.dim(0), w = u.dim(1);
      Array table(Shape{2 * b, w});
      std::copy_n(u.values().data(), b * w, table.values().data());
      std::copy_n(v.values().data(), b * w, table.values().data() + b * w);
      model::PairIndex pairs;
      for (std::size_t i = 0; i < b; ++i) pairs.push(i, b + i);
      return m->predict_values(table, pairs, nullptr, b);
    };
    report = axiom_sample_audit(fn, feature_dim, seed, counts);
  } else {
    auto store = std::make_shared<ParamStore>();
    auto head = std::make_shared<heads::LatentHead>(spec, *store, seed);
    const BatchDistance fn = [store, head](const Array& u, const Array& v) {
      Tape tape;
      const auto d = tape.value(head->distance(tape, tape.constant(u), tape.constant(v))).values();
      return std::vector<double>(d.begin(), d.end());
    };
    report = axiom_sample_audit(fn, spec.latent_dim(), seed, counts);
    report.head_params = head->param_count();
  }
  report.family = std::string(to_string(spec.family));
  return report;
}

void write_capability_csv(const std::filesystem::path& path, const std::vector<AuditReport>& rows,
                          const std::vector<double>& alphas) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "family,head_params,identity_residual,triangle_violation,min_value,symmetry_residual";
  for (double a : alphas) os << ",homogeneity_a" << a;
  os << ",quasimetric_constraints,positive_homogeneity\n";
  char buf[64];
  auto num = [&](double x) {
    std::snprintf(buf, sizeof buf, "%.6g", x);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    os << r.family << ',' << r.head_params << ',' << num(r.identity_residual) << ','
       << num(r.triangle_violation) << ',' << num(r.min_value) << ',' << num(r.symmetry_residual);
    for (double h : r.homogeneity_residual) os << ',' << num(h);
    os << ',' << (r.satisfies_constraints() ? "yes" : "no") << ','
       << (r.homogeneous() ? "yes" : "no") << '\n';
  }
}

}  // namespace qmet::theory
