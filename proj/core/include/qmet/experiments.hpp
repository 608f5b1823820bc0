#pragma once

// Experiment harness: expands a config into (cell x seed) runs, executes them
// on a bounded worker pool, and aggregates per-run results.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qmet/config.hpp"

namespace qmet::exp {

namespace fs = std::filesystem;

struct RunRecord {
  std::size_t cell_index = 0;
  /// Grid coordinates of the cell, e.g. "head.family=iqe-sum;train.lr=0.001".
  std::string cell;
  std::string kind;
  std::string family;  // head family tag of the cell
  std::string fingerprint;
  std::uint64_t seed = 0;
  std::string status;  // "ok", "diverged", or "failed"
  std::string error;
  std::vector<std::pair<std::string, double>> metrics;

  std::string run_id() const { return fingerprint + "-s" + std::to_string(seed); }
  /// NaN when absent.
  double metric(std::string_view name) const;
};

/// Executes one resolved cell for one seed, writing `<out>/<run_id>/`.
/// Failures are captured in the returned record rather than thrown.
RunRecord run_one(const cfg::ConfigDoc& cell, std::size_t cell_index, std::string label,
                  std::uint64_t seed, const fs::path& out);

struct SuiteOverrides {
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<std::string> out;
  std::optional<std::size_t> jobs;
};

struct SuiteResult {
  std::vector<RunRecord> runs;  // cell-major, then seed order
  fs::path out;
  /// True when no run succeeded and at least one diverged.
  bool all_diverged() const;
};

using Progress = std::function<void(const RunRecord&)>;

/// Runs every (cell x seed), then writes runs.csv, aggregate.csv, and
/// kind-specific summaries (capability.csv and witnesses.csv for audits,
/// ablate_curve.csv for ablations) into the output directory. Config errors
/// surface as cfg::ConfigError before any run starts.
SuiteResult run_suite(const cfg::ConfigDoc& doc, const SuiteOverrides& overrides = {},
                      const Progress& progress = {});

struct AggregateRow {
  std::size_t cell_index = 0;
  std::string cell;
  std::string fingerprint;
  std::string metric;
  std::size_t n = 0;         // successful runs contributing
  std::size_t n_failed = 0;  // diverged or failed runs in the cell
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation (0 when n < 2)

  /// "mean ± sd" with three decimals.
  std::string formatted() const;
};

/// Mean and sample standard deviation per (cell, metric) over successful runs.
/// Non-finite metric values are skipped.
std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& runs);

/// Reads every `<out>/*/result.json`, ordered by cell index then seed.
std::vector<RunRecord> load_runs(const fs::path& out);

void write_runs_csv(const fs::path& path, const std::vector<RunRecord>& runs);
void write_aggregate_csv(const fs::path& path, const std::vector<AggregateRow>& rows);

/// Mean of `metric` over successful runs of the cells whose label contains
/// every `key=value` fragment in `where`. NaN when nothing matches.
double cell_mean(const std::vector<RunRecord>& runs, std::string_view metric,
                 const std::vector<std::string>& where);

}  // namespace qmet::exp
