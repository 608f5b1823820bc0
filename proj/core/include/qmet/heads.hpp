#pragma once

// Latent quasimetric heads d_latent(u, v) and the symmetric metric heads.
//
// Latents arrive as [B, D] batches with D = k * l. IQE and PQE view each row
// as a k x l matrix (row-major); the other heads treat it as a flat vector.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "qmet/head_spec.hpp"
#include "qmet/tape.hpp"

namespace qmet::heads {

using diff::ParamId;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

enum class Variant { kOrig, kFixed };

/// Lebesgue measure of the union of [u_j, max(u_j, v_j)] over one row.
/// Sorts intervals by left endpoint and merges in one pass.
double interval_union_length(std::span<const double> u, std::span<const double> v);

/// Per-row interval-union measures: [B, k*l] x [B, k*l] -> [B, k].
/// Differentiable through the sort of the 2l endpoints of each row.
Var iqe_components(Tape& tape, Var u, Var v, std::size_t k, std::size_t l);

/// alpha * max + (1 - alpha) * mean over the last axis of [B, k]; alpha is a
/// scalar node.
Var maxmean_reduce(Tape& tape, Var components, Var alpha);

Var iqe_sum(Tape& tape, Var u, Var v, std::size_t k, std::size_t l);
Var iqe_maxmean(Tape& tape, Var u, Var v, std::size_t k, std::size_t l, Var alpha);

/// Per-component PQE-LH terms alpha_i (1 - exp(-sum_j (u_ij - v_ij)^+)), [B, k].
Var pqe_lh_components(Tape& tape, Var u, Var v, std::size_t k, std::size_t l, Var alpha);
/// Sum of the PQE-LH components; alpha is a [k] node of nonnegative scales.
Var pqe_lh(Tape& tape, Var u, Var v, std::size_t k, std::size_t l, Var alpha);

/// MRN from already-projected latents: symmetric part ||su - sv||_2 (squared
/// for kOrig) plus max_i (au_i - av_i)^+.
Var mrn_combine(Tape& tape, Var sym_u, Var sym_v, Var asym_u, Var asym_v, Variant variant);

Var euclid_distance(Tape& tape, Var u, Var v);
Var l1_distance(Tape& tape, Var u, Var v);
/// Angle between rows after normalizing to unit length. Zero rows are rejected.
Var sphere_angle(Tape& tape, Var u, Var v);

/// Maps a raw baseline output to a distance. `clamped`, when given, receives
/// the number of discounted outputs that fell outside (0, 1].
Var apply_output_transform(Tape& tape, Var raw, OutputTransform transform, double gamma,
                           std::size_t* clamped = nullptr);

/// Trainable parameters inside d_latent only; 0 for IQE-sum and for the pair
/// baselines (which have no latent head).
std::size_t head_param_count(const HeadSpec& spec);

/// A latent head with its parameters registered in a ParamStore.
class LatentHead {
 public:
  /// Registers parameters in `store`; initialization is reproducible per seed.
  /// Pair-baseline families are rejected.
  LatentHead(const HeadSpec& spec, ParamStore& store, std::uint64_t seed);

  const HeadSpec& spec() const { return spec_; }
  std::size_t param_count() const;

  /// [B, D] x [B, D] -> [B].
  Var distance(Tape& tape, Var u, Var v) const;
  /// Per-component values [B, c] where the family has components (IQE, PQE,
  /// Deep Norm, Wide Norm, MRN sym/asym); nullopt for the metric heads.
  std::optional<Var> components(Tape& tape, Var u, Var v) const;

  /// Current maxmean alpha (families that use one).
  std::optional<double> maxmean_alpha() const;

 private:
  Var p(Tape& tape, ParamId id) const { return tape.param(*store_, id); }
  Var alpha(Tape& tape) const;
  Var deep_norm_components(Tape& tape, Var u, Var v) const;
  Var wide_norm_components(Tape& tape, Var u, Var v) const;
  Var mrn_projection(Tape& tape, Var x, ParamId first, ParamId second) const;

  HeadSpec spec_;
  ParamStore* store_;
  // Deep Norm: input injections U_t, nonnegative (softplus) inner weights W_t
  // for t >= 1, maxrelu coefficients per maxrelu layer.
  std::vector<ParamId> inject_;
  std::vector<ParamId> inner_;
  std::vector<ParamId> relu_a_;
  std::vector<ParamId> relu_b_;
  // Wide Norm softplus weights, PQE scales, metric scales/weights.
  std::optional<ParamId> weights_;
  // MRN projectors: symmetric (first, second), asymmetric (first, second).
  std::vector<ParamId> mrn_;
  std::optional<ParamId> alpha_raw_;
};

struct ProfileRow {
  double scale = 0.0;
  double distance = 0.0;
  std::vector<double> components;
};

/// d_latent(s * u0, s * v0) and per-component values for every scale s.
/// u0 and v0 are single latent rows of length latent_dim.
std::vector<ProfileRow> profile_head(const LatentHead& head, std::span<const double> u0,
                                     std::span<const double> v0, std::span<const double> scales);

}  // namespace qmet::heads
