#pragma once

// Constructive embeddings, limit checks, witness searches, and axiom audits.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qmet/array.hpp"
#include "qmet/graphs.hpp"
#include "qmet/head_spec.hpp"

namespace qmet::theory {

using diff::Array;

/// A latent table plus the head that reads it, with the worst reconstruction
/// error against the target quasimetric.
struct EmbeddingCertificate {
  Array latents;  // [n, latent_dim]
  HeadSpec head;
  double max_error = 0.0;
  std::string note;
};

/// f(x) = (-d(x, z))_z with k = n, l = 1, read by IQE-maxmean with alpha
/// pinned to 1, so that max_z (f(y)_z - f(x)_z)^+ = max_z (d(x,z) - d(y,z))^+
/// = d(x, y). Rejects infinite distances and n > 512.
EmbeddingCertificate exact_embed_maxmean(const graphs::DistanceOracle& oracle);

/// {0,1}-valued quasimetric with an order embedding g: node -> [n]^m such
/// that pi(u, v) = 0 iff g(u) <= g(v) coordinate-wise. Entries of g are 1-based.
struct Quasipartition {
  std::size_t n = 0;
  std::vector<std::uint8_t> pi;               // row-major n x n
  std::vector<std::vector<std::size_t>> g;    // n rows of m coordinates

  std::uint8_t operator()(std::size_t u, std::size_t v) const { return pi[u * n + v]; }
};

/// pi induced by g.
Quasipartition quasipartition_from_order(std::vector<std::vector<std::size_t>> g);
/// Throws if pi and g disagree anywhere or g is out of range.
void validate_quasipartition(const Quasipartition& q);

/// f(u) = s * concat(e_{g_1(u)}, ..., e_{g_m(u)}), e_i in {0,1}^n with the
/// first i entries zero, read by a single IQE component (k = 1, l = m * n).
EmbeddingCertificate quasipartition_embed_sum(const Quasipartition& q, double scale);

/// sum_i w_i pi_i through one IQE-sum component per quasipartition (blocks
/// zero-padded to a common l). All quasipartitions share n.
EmbeddingCertificate convex_combination_embed(const std::vector<Quasipartition>& parts,
                                              const std::vector<double>& weights);

/// Integral(c) = int (1 - exp(-c * #{j : x in [u_j, max(u_j, v_j)]})) dx,
/// evaluated exactly over maximal segments of constant coverage.
double integral_pqe_lh(std::span<const double> u, std::span<const double> v, double c);

struct LimitRow {
  double c = 0.0;
  double integral = 0.0;
  double component = 0.0;
  double error = 0.0;
};

std::vector<LimitRow> integral_pqe_limit_check(std::span<const double> u,
                                               std::span<const double> v,
                                               std::span<const double> c_grid);

struct Witness {
  std::vector<Array> points;  // latent rows involved (2 for pairs, 3 for triples)
  double value = 0.0;         // d for negativity, violation for triangle witnesses
  std::uint64_t seed = 0;
  std::size_t samples_tried = 0;
};

struct SearchConfig {
  std::size_t budget = 100000;
  double range = 3.0;
  std::size_t batch = 4096;
  double threshold = 1e-9;
};

/// Random-init head (seeded) and uniform latent pairs in [-range, range]^D;
/// returns the first pair with d(u, v) < -threshold.
std::optional<Witness> find_negativity_witness(const HeadSpec& spec, std::uint64_t seed,
                                               const SearchConfig& config = {});

/// Same, for triples with d(u, w) > d(u, v) + d(v, w) + threshold.
std::optional<Witness> find_triangle_witness(const HeadSpec& spec, std::uint64_t seed,
                                             const SearchConfig& config = {});

/// MRN symmetric part with phi_s the identity on 1-d latents 0, 1, 2: returns
/// (d(0,1), d(1,2), d(0,2)) for the given variant's symmetric term.
struct CollinearWitness {
  double d01 = 0.0;
  double d12 = 0.0;
  double d02 = 0.0;
  bool violated() const { return d02 > d01 + d12; }
};
CollinearWitness mrn_collinear_witness(HeadFamily family);

/// Batched distance function over rows of U and V ([B, dim] each).
using BatchDistance = std::function<std::vector<double>(const Array& u, const Array& v)>;

struct AuditCounts {
  std::size_t pairs = 10000;
  std::size_t triples = 100000;
  double range = 3.0;
  std::vector<double> alphas{0.5, 2.0, 10.0};
  std::size_t batch = 4096;
};

struct AuditReport {
  std::string family;
  std::size_t head_params = 0;
  double identity_residual = 0.0;    // max |d(u, u)|
  double triangle_violation = 0.0;   // max (d(u,w) - d(u,v) - d(v,w)), floored at 0
  double min_value = 0.0;            // min d(u, v)
  double symmetry_residual = 0.0;    // max |d(u, v) - d(v, u)|
  std::vector<double> homogeneity_residual;  // per alpha, max relative error

  bool satisfies_constraints(double tol = 1e-9) const;
  bool homogeneous(double tol = 1e-9) const;
};

AuditReport axiom_sample_audit(const BatchDistance& distance, std::size_t dim,
                               std::uint64_t seed, const AuditCounts& counts = {});

/// Audits one family at a seeded random init: latent heads over uniform
/// latents, pair baselines over uniform input features through a full model.
AuditReport audit_family(const HeadSpec& spec, std::uint64_t seed, const AuditCounts& counts = {},
                         std::size_t feature_dim = 16);

/// Capability matrix: family, head_params, identity_residual,
/// triangle_violation, min_value, symmetry_residual, homogeneity residuals,
/// and the two derived verdicts.
void write_capability_csv(const std::filesystem::path& path, const std::vector<AuditReport>& rows,
                          const std::vector<double>& alphas);

}  // namespace qmet::theory
