#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qmet/graphs.hpp"
#include "qmet/model.hpp"
#include "qmet/tape.hpp"

namespace qmet::train {

using diff::Array;
using diff::ParamStore;
using diff::Tape;
using diff::Var;

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every tensor of a ParamStore.
class Adam {
 public:
  explicit Adam(ParamStore& store, AdamConfig config = {});

  /// Applies one update from the store's accumulated gradients. Returns false
  /// (and leaves parameters and moments untouched) if any gradient is
  /// non-finite.
  bool step(double lr);

  std::size_t steps() const { return steps_; }
  std::size_t skipped() const { return skipped_; }

 private:
  ParamStore* store_;
  AdamConfig config_;
  std::vector<Array> m_;
  std::vector<Array> v_;
  std::size_t steps_ = 0;
  std::size_t skipped_ = 0;
};

/// base * 0.5 * (1 + cos(pi * step / total)); `step` is clamped into [0, total].
double cosine_lr(std::size_t step, std::size_t total, double base);

/// gamma^d as a tape op, exp(d ln gamma).
Var discount(Tape& tape, Var distance, double gamma);

/// mean_i (gamma^pred_i - target_i)^2 with targets already discounted.
Var discounted_mse(Tape& tape, Var pred, const std::vector<double>& discounted_target,
                   double gamma);

/// mean over triples of max(0, gamma^(d_xy + d_yz) - gamma^d_xz)^2.
Var triangle_regularizer(Tape& tape, Var d_xy, Var d_yz, Var d_xz, double gamma);

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 2048;
  double lr = 1e-3;
  double gamma = 0.9;
  double reg_weight = 0.0;
  /// Triples per step for the regularizer; 0 means batch_size / 3.
  std::size_t triplets = 0;
  /// Validation metrics every this many epochs (0: only after the last one).
  std::size_t eval_every = 0;
  std::uint64_t seed = 0;
  AdamConfig adam{};

  void validate() const;
};

struct MetricsRecord {
  double mse = 0.0;        // vs gamma-discounted distances
  double l1_finite = 0.0;  // mean |pred - d| where d < inf
  double pred_inf = 0.0;   // mean prediction where d = inf (NaN when none)
  bool overflow = false;   // some prediction was non-finite
  std::size_t clamped = 0;
  std::size_t n_pairs = 0;
  std::size_t n_finite = 0;
  std::size_t n_inf = 0;

  double mse_e3() const { return mse * 1e3; }
};

/// Table-style metrics from predictions and true (possibly infinite) distances.
MetricsRecord metrics_from(std::span<const double> predicted, std::span<const double> truth,
                           double gamma);

MetricsRecord evaluate(model::Model& model, const Array& features,
                       const std::vector<graphs::PairRecord>& pairs, double gamma);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  MetricsRecord metrics;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::vector<double> step_loss;
  MetricsRecord final_val;
  MetricsRecord final_train;
  bool diverged = false;
  std::size_t steps = 0;
  std::size_t skipped_steps = 0;
};

/// Optional per-epoch callback (epoch index, epoch mean loss).
using EpochHook = std::function<void(std::size_t, double)>;

/// Minimizes discounted MSE (+ reg_weight * triangle regularizer for the pair
/// baselines) with Adam and a cosine schedule. A non-finite loss aborts and
/// returns the partial history with `diverged` set.
TrainResult train(model::Model& model, const graphs::PairDataset& data, const TrainConfig& config,
                  const EpochHook& hook = {});

/// metrics.csv with header epoch,split,mse,l1_finite,pred_inf,lr,loss.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history);

}  // namespace qmet::train
