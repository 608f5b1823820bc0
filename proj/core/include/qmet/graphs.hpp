#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string_view>
#include <vector>

#include "qmet/array.hpp"

namespace qmet::graphs {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class GraphKind { kDense, kSparse, kSparseBlock };

std::string_view to_string(GraphKind kind);
GraphKind parse_graph_kind(std::string_view tag);

/// Unit-weight directed graph without self-loops.
struct DirectedGraph {
  std::size_t n = 0;
  std::vector<std::vector<std::uint32_t>> adj;

  explicit DirectedGraph(std::size_t nodes = 0) : n(nodes), adj(nodes) {}
  /// Adds x -> y; self-loops and duplicates are ignored.
  void add_edge(std::size_t x, std::size_t y);
  bool has_edge(std::size_t x, std::size_t y) const;
  std::size_t edge_count() const;
};

/// Dense: p = 0.1. Sparse: p = 2/n, reseeded up to 100 times until strongly
/// connected (otherwise the attempt with the largest strongly connected
/// component is kept). Sparse-block: 4 equal blocks, intra-block p = 4/n,
/// inter-block p = 0.5/n^2.
DirectedGraph generate_graph(GraphKind kind, std::size_t n, std::uint64_t seed);

/// Block id of node x under the sparse-block layout.
std::size_t block_of(std::size_t x, std::size_t n);

/// Size of the largest strongly connected component.
std::size_t largest_scc_size(const DirectedGraph& g);
bool strongly_connected(const DirectedGraph& g);

/// Exact all-pairs hop distances, +infinity when unreachable.
struct DistanceOracle {
  std::size_t n = 0;
  std::vector<double> d;  // row-major n x n

  double operator()(std::size_t x, std::size_t y) const { return d[x * n + y]; }
  bool all_finite() const;
};

/// One BFS per source.
DistanceOracle all_pairs_distances(const DirectedGraph& g);

struct PairRecord {
  std::uint32_t source = 0;
  std::uint32_t target = 0;
  double distance = 0.0;    // may be +infinity
  double discounted = 0.0;  // gamma^distance, 0 when unreachable
};

struct PairDataset {
  std::vector<PairRecord> train;
  std::vector<PairRecord> val;
  diff::Array features;  // [n, feature_dim]
  double gamma = 0.9;
};

/// gamma^d with gamma^inf = 0.
double discount(double d, double gamma);

/// Uniform split of all n^2 ordered pairs; node features are fixed
/// unit-variance Gaussian vectors drawn from the seed.
PairDataset build_dataset(const DistanceOracle& oracle, std::size_t feature_dim,
                          double train_fraction, double gamma, std::uint64_t seed);

/// Compact binary round trip of a graph and its oracle.
void save_graph(const std::filesystem::path& path, const DirectedGraph& g,
                const DistanceOracle& oracle);
void load_graph(const std::filesystem::path& path, DirectedGraph& g, DistanceOracle& oracle);

/// CSV with header source,target,d,discounted (unreachable d written as inf).
void write_pairs_csv(const std::filesystem::path& path, const std::vector<PairRecord>& pairs);

}  // namespace qmet::graphs
