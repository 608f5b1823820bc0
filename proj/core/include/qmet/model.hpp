#pragma once

// A full distance model d(x, y) over a table of input features.
//
// Latent and metric families encode each input once and compare latents with
// the head. Inputs may carry several "slots" (e.g. one latent per action in
// the grid world); the encoder then emits slots * latent_dim values per row.
// The two pair baselines are asym-dot (two encoders, row-wise dot product)
// and unconstrained (one network on the concatenated features with
// slots * slots outputs), both followed by the spec's output transform.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <vector>

#include "qmet/encoder.hpp"
#include "qmet/head_spec.hpp"
#include "qmet/heads.hpp"
#include "qmet/tape.hpp"

namespace qmet::model {

using diff::Array;
using diff::ParamStore;
using diff::Tape;
using diff::Var;
using enc::Mode;

struct ModelSpec {
  HeadSpec head;
  std::size_t feature_dim = 64;
  std::vector<std::size_t> hidden{128, 128, 128};
  bool feature_norm = false;
  std::size_t slots = 1;

  void validate() const;
  /// Encoder shape implied by the head family.
  enc::EncoderSpec encoder_spec() const;
};

/// Ordered pairs of (row, slot) indices into a feature table.
struct PairIndex {
  std::vector<std::size_t> src;
  std::vector<std::size_t> tgt;
  std::vector<std::size_t> src_slot;  // empty means slot 0 everywhere
  std::vector<std::size_t> tgt_slot;

  std::size_t size() const { return src.size(); }
  void push(std::size_t s, std::size_t t, std::size_t s_slot = 0, std::size_t t_slot = 0);
  /// Sub-range [begin, end).
  PairIndex range(std::size_t begin, std::size_t end) const;
};

struct Prediction {
  Var distance;            // [B]
  std::size_t clamped = 0;  // discounted outputs clamped into (0, 1]
};

class Model {
 public:
  Model(ModelSpec spec, std::uint64_t seed);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }

  /// Trainable parameters inside the latent head only.
  std::size_t head_param_count() const;
  const heads::LatentHead* head() const { return head_ ? &*head_ : nullptr; }

  /// Predicted distances for the pairs, recorded on `tape`. `features` is the
  /// full [rows, feature_dim] table; only referenced rows are encoded.
  Prediction predict(Tape& tape, const Array& features, const PairIndex& pairs, Mode mode);

  /// Eval-mode predictions without gradient bookkeeping, evaluated in chunks.
  std::vector<double> predict_values(const Array& features, const PairIndex& pairs,
                                     std::size_t* clamped = nullptr, std::size_t chunk = 4096);

  /// Raw latent rows [rows * slots, latent_dim] in eval mode (latent and
  /// metric families only).
  Array latents(const Array& features);

  /// Writes every parameter (and normalization statistics) to `path` with a
  /// JSON sidecar; load() restores them into a model built from the same spec.
  void save(const std::filesystem::path& path, std::size_t step) const;
  std::size_t load(const std::filesystem::path& path);

 private:
  Var encode_rows(Tape& tape, enc::Encoder& encoder, const Array& features,
                  const std::vector<std::size_t>& rows, Mode mode);

  ModelSpec spec_;
  std::uint64_t seed_;
  std::unique_ptr<ParamStore> store_;
  std::unique_ptr<enc::Encoder> encoder_;
  std::unique_ptr<enc::Encoder> target_encoder_;  // asym-dot only
  std::optional<heads::LatentHead> head_;
};

}  // namespace qmet::model
