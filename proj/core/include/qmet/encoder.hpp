#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qmet/tape.hpp"

namespace qmet::enc {

using diff::Array;
using diff::ParamId;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

enum class Mode { kTrain, kEval };

/// ReLU MLP: input -> hidden... -> output, optional feature normalization
/// after each hidden activation.
struct EncoderSpec {
  std::size_t input_dim = 64;
  std::vector<std::size_t> hidden{128, 128, 128};
  std::size_t output_dim = 48;
  bool feature_norm = false;
  double norm_momentum = 0.1;
  double norm_eps = 1e-5;

  void validate() const;
};

/// Running statistics of one normalization layer.
struct NormStats {
  Array running_mean;
  Array running_var;
};

class Encoder {
 public:
  /// Registers weights (Kaiming-uniform over fan-in) in `store`; identical
  /// seeds give bit-identical parameters.
  Encoder(EncoderSpec spec, ParamStore& store, std::uint64_t seed, const std::string& name = "enc");

  const EncoderSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  /// [B, input_dim] -> [B, output_dim]. Train mode normalizes with batch
  /// statistics and updates the running statistics; eval mode is a fixed
  /// affine map per normalization layer.
  Var encode(Tape& tape, Var x, Mode mode);

  const std::vector<NormStats>& norm_stats() const { return stats_; }
  std::vector<NormStats>& norm_stats() { return stats_; }

  /// Parameter ids owned by this encoder, in layer order.
  std::vector<ParamId> param_ids() const;

  /// Flat little-endian float64 dump of parameters and running statistics,
  /// plus `<path>.json` with the spec, seed, and step count.
  void save(const std::filesystem::path& path, std::size_t step) const;
  /// Loads values written by save(); the spec must match. Returns the step.
  std::size_t load(const std::filesystem::path& path);

 private:
  EncoderSpec spec_;
  std::uint64_t seed_;
  ParamStore* store_;
  std::vector<ParamId> weights_;
  std::vector<ParamId> biases_;
  std::vector<ParamId> gains_;
  std::vector<ParamId> shifts_;
  std::vector<NormStats> stats_;
};

}  // namespace qmet::enc
