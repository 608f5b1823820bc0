#pragma once

// Experiment configuration: flat `key = value` text with `[section]` headers,
// `#` comments, and comma-separated lists for the keys that span a grid.

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qmet/graphs.hpp"
#include "qmet/head_spec.hpp"
#include "qmet/model.hpp"
#include "qmet/trainer.hpp"

namespace qmet::cfg {

/// Invalid configuration; `field()` is the dotted key at fault.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class ExperimentKind { kGraph, kGridworld, kAudit, kAblateKl, kProfile };

std::string_view to_string(ExperimentKind kind);

struct GraphParams {
  graphs::GraphKind kind = graphs::GraphKind::kDense;
  std::size_t nodes = 300;
  double train_fraction = 0.1;
  std::size_t feature_dim = 64;
};

struct GridParams {
  std::size_t width = 8;
  std::size_t height = 8;
  std::size_t doors = 2;
  std::size_t trajectories = 128;
  double epsilon = 0.6;
  std::size_t episode_cap = 200;
  std::size_t goals = 50;
  std::size_t plan_cap = 300;
  bool average_goal_actions = true;
  std::size_t goal_action = 0;
};

struct AuditParams {
  std::size_t pairs = 10000;
  std::size_t triples = 100000;
  std::size_t witness_budget = 100000;
  std::size_t witness_seeds = 20;
  // Head size used for the Deep Norm / MRN witness searches.
  std::size_t witness_k = 1;
  std::size_t witness_l = 4;
  std::size_t witness_hidden = 4;
};

struct AblateParams {
  std::size_t total_dim = 48;
  std::size_t k = 4;  // one grid cell per k; l = total_dim / k
};

struct ProfileParams {
  std::vector<double> scales{0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
};

/// One fully resolved grid cell.
struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kGraph;
  model::ModelSpec model;
  train::TrainConfig train;
  GraphParams graph;
  GridParams grid;
  AuditParams audit;
  AblateParams ablate;
  ProfileParams profile;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::string out = "runs";
  std::size_t jobs = 1;
};

/// Parsed key/value document. Keys are `section.name`; list keys keep every
/// comma-separated entry.
class ConfigDoc {
 public:
  static ConfigDoc parse(std::string_view text);
  static ConfigDoc load(const std::string& path);
  /// The documented defaults, as parseable text.
  static std::string defaults_text();

  void set(const std::string& key, std::vector<std::string> values);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::vector<std::string>& get(const std::string& key) const;
  const std::map<std::string, std::vector<std::string>>& entries() const { return values_; }

  /// Keys whose value lists have more than one entry, in canonical order.
  std::vector<std::string> grid_keys() const;
  /// Every combination of the grid keys as single-valued documents.
  std::vector<ConfigDoc> expand() const;

  /// Canonical `key=value` lines (sorted), excluding run-control keys.
  std::string canonical() const;
  /// 16-hex-digit FNV-1a hash of canonical().
  std::string fingerprint() const;

  /// Typed view; throws ConfigError naming the field on bad values.
  ExperimentConfig resolve() const;

 private:
  std::map<std::string, std::vector<std::string>> values_;
};

}  // namespace qmet::cfg
