#include "qmet/graphs.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>

#include "qmet/random.hpp"

namespace qmet::graphs {

std::string_view to_string(GraphKind kind) {
  switch (kind) {
    case GraphKind::kDense: return "dense";
    case GraphKind::kSparse: return "sparse";
    case GraphKind::kSparseBlock: return "sparse-block";
  }
  return "unknown";
}

GraphKind parse_graph_kind(std::string_view tag) {
  if (tag == "dense") return GraphKind::kDense;
  if (tag == "sparse") return GraphKind::kSparse;
  if (tag == "sparse-block") return GraphKind::kSparseBlock;
  throw std::invalid_argument("unknown graph kind '" + std::string(tag) + "'");
}

void DirectedGraph::add_edge(std::size_t x, std::size_t y) {
  if (x >= n || y >= n) throw std::out_of_range("edge endpoint outside graph");
  if (x == y || has_edge(x, y)) return;
  adj[x].push_back(static_cast<std::uint32_t>(y));
}

bool DirectedGraph::has_edge(std::size_t x, std::size_t y) const {
  const auto& row = adj.at(x);
  return std::find(row.begin(), row.end(), static_cast<std::uint32_t>(y)) != row.end();
}

std::size_t DirectedGraph::edge_count() const {
  std::size_t total = 0;
  for (const auto& row : adj) total += row.size();
  return total;
}

std::size_t block_of(std::size_t x, std::size_t n) { return std::min<std::size_t>(3, x * 4 / n); }

namespace {

// Independent Bernoulli(p) edges between every ordered pair, with p chosen
// per pair by `prob`.
DirectedGraph bernoulli_graph(std::size_t n, Rng& rng,
                              const std::function<double(std::size_t, std::size_t)>& prob) {
  DirectedGraph g(n);
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y)
      if (x != y && rng.bernoulli(prob(x, y))) g.adj[x].push_back(static_cast<std::uint32_t>(y));
  return g;
}

}  // namespace

DirectedGraph generate_graph(GraphKind kind, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("generate_graph: need n >= 2");
  const double nd = static_cast<double>(n);
  switch (kind) {
    case GraphKind::kDense: {
      Rng rng(seed);
      return bernoulli_graph(n, rng, [](std::size_t, std::size_t) { return 0.1; });
    }
    case GraphKind::kSparse: {
      const double p = std::min(1.0, 2.0 / nd);
      DirectedGraph best;
      std::size_t best_scc = 0;
      for (std::uint64_t attempt = 0; attempt <= 100; ++attempt) {
        Rng rng(derive_seed(seed, attempt));
        DirectedGraph g = bernoulli_graph(n, rng, [p](std::size_t, std::size_t) { return p; });
        const std::size_t scc = largest_scc_size(g);
        if (scc == n) return g;
        if (scc > best_scc) {
          best_scc = scc;
          best = std::move(g);
        }
      }
      return best;
    }
    case GraphKind::kSparseBlock: {
      if (n < 8) throw std::invalid_argument("sparse-block graphs need n >= 8 (4 blocks of >= 2)");
      const double intra = std::min(1.0, 4.0 / nd);
      const double inter = 0.5 / (nd * nd);
      Rng rng(seed);
      return bernoulli_graph(n, rng, [&](std::size_t x, std::size_t y) {
        return block_of(x, n) == block_of(y, n) ? intra : inter;
      });
    }
  }
  throw std::invalid_argument("generate_graph: unknown kind");
}

std::size_t largest_scc_size(const DirectedGraph& g) {
  // Iterative Tarjan.
  const std::size_t n = g.n;
  constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
  std::vector<std::size_t> index(n, kUnset), low(n, 0);
  std::vector<char> on_stack(n, 0);
  std::vector<std::size_t> stack;
  std::size_t counter = 0, best = 0;
  struct Frame {
    std::size_t node;
    std::size_t edge;
  };
  for (std::size_t root = 0; root < n; ++root) {
    if (index[root] != kUnset) continue;
    std::vector<Frame> call{{root, 0}};
    index[root] = low[root] = counter++;
    stack.push_back(root);
    on_stack[root] = 1;
    while (!call.empty()) {
      Frame& f = call.back();
      if (f.edge < g.adj[f.node].size()) {
        const std::size_t w = g.adj[f.node][f.edge++];
        if (index[w] == kUnset) {
          index[w] = low[w] = counter++;
          stack.push_back(w);
          on_stack[w] = 1;
          call.push_back({w, 0});
        } else if (on_stack[w]) {
          low[f.node] = std::min(low[f.node], index[w]);
        }
        continue;
      }
      const std::size_t v = f.node;
      call.pop_back();
      if (!call.empty()) low[call.back().node] = std::min(low[call.back().node], low[v]);
      if (low[v] == index[v]) {
        std::size_t size = 0;
        std::size_t w;
        do {
          w = stack.back();
          stack.pop_back();
          on_stack[w] = 0;
          ++size;
        } while (w != v);
        best = std::max(best, size);
      }
    }
  }
  return best;
}

bool strongly_connected(const DirectedGraph& g) { return largest_scc_size(g) == g.n; }

bool DistanceOracle::all_finite() const {
  return std::all_of(d.begin(), d.end(), [](double x) { return std::isfinite(x); });
}

DistanceOracle all_pairs_distances(const DirectedGraph& g) {
  DistanceOracle o;
  o.n = g.n;
  o.d.assign(g.n * g.n, kInf);
  std::vector<std::uint32_t> queue(g.n);
  for (std::size_t s = 0; s < g.n; ++s) {
    double* row = o.d.data() + s * g.n;
    std::size_t head = 0, tail = 0;
    row[s] = 0.0;
    queue[tail++] = static_cast<std::uint32_t>(s);
    while (head < tail) {
      const std::uint32_t x = queue[head++];
      for (std::uint32_t y : g.adj[x]) {
        if (std::isinf(row[y])) {
          row[y] = row[x] + 1.0;
          queue[tail++] = y;
        }
      }
    }
  }
  return o;
}

double discount(double d, double gamma) { return std::isinf(d) ? 0.0 : std::pow(gamma, d); }

PairDataset build_dataset(const DistanceOracle& oracle, std::size_t feature_dim,
                          double train_fraction, double gamma, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("train fraction must lie in (0, 1)");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0, 1)");
  if (feature_dim == 0) throw std::invalid_argument("feature dim must be >= 1");
  const std::size_t n = oracle.n;
  const std::size_t total = n * n;
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(total)));
  if (n_train == 0 || n_train == total)
    throw std::invalid_argument("train fraction " + std::to_string(train_fraction) + " on " +
                                std::to_string(total) + " pairs leaves an empty split");

  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  Rng split_rng(derive_seed(seed, 11));
  split_rng.shuffle(order);

  PairDataset ds;
  ds.gamma = gamma;
  ds.train.reserve(n_train);
  ds.val.reserve(total - n_train);
  for (std::size_t i = 0; i < total; ++i) {
    const std::size_t id = order[i];
    PairRecord r;
    r.source = static_cast<std::uint32_t>(id / n);
    r.target = static_cast<std::uint32_t>(id % n);
    r.distance = oracle.d[id];
    r.discounted = discount(r.distance, gamma);
    (i < n_train ? ds.train : ds.val).push_back(r);
  }

  ds.features = diff::Array(diff::Shape{n, feature_dim});
  Rng feat_rng(derive_seed(seed, 12));
  for (double& x : ds.features.values()) x = feat_rng.normal();
  return ds;
}

namespace {

constexpr char kMagic[8] = {'Q', 'M', 'G', 'R', 'A', 'P', 'H', '1'};

template <typename T>
void put(std::ofstream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("graph file truncated");
  return v;
}

}  // namespace

void save_graph(const std::filesystem::path& path, const DirectedGraph& g,
                const DistanceOracle& oracle) {
  if (oracle.n != g.n) throw std::invalid_argument("save_graph: oracle size differs from graph");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os.write(kMagic, sizeof kMagic);
  put<std::uint64_t>(os, g.n);
  for (const auto& row : g.adj) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(row.size()));
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size() * sizeof(std::uint32_t)));
  }
  // Distances are small integers or infinity; store as uint16 with 0xffff = inf.
  for (double d : oracle.d) {
    if (std::isfinite(d) && d >= 65535.0) throw std::runtime_error("distance too large to store");
    put<std::uint16_t>(os, std::isinf(d) ? std::uint16_t{0xffff} : static_cast<std::uint16_t>(d));
  }
}

void load_graph(const std::filesystem::path& path, DirectedGraph& g, DistanceOracle& oracle) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw std::runtime_error(path.string() + " is not a graph file");
  const auto n = static_cast<std::size_t>(get<std::uint64_t>(is));
  g = DirectedGraph(n);
  for (std::size_t x = 0; x < n; ++x) {
    g.adj[x].resize(get<std::uint32_t>(is));
    is.read(reinterpret_cast<char*>(g.adj[x].data()),
            static_cast<std::streamsize>(g.adj[x].size() * sizeof(std::uint32_t)));
    if (!is) throw std::runtime_error("graph file truncated");
  }
  oracle.n = n;
  oracle.d.resize(n * n);
  for (double& d : oracle.d) {
    const auto v = get<std::uint16_t>(is);
    d = v == 0xffff ? kInf : static_cast<double>(v);
  }
}

void write_pairs_csv(const std::filesystem::path& path, const std::vector<PairRecord>& pairs) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "source,target,d,discounted\n";
  char buf[64];
  for (const auto& p : pairs) {
    os << p.source << ',' << p.target << ',';
    if (std::isinf(p.distance))
      os << "inf";
    else
      os << static_cast<long long>(p.distance);
    std::snprintf(buf, sizeof buf, ",%.17g\n", p.discounted);
    os << buf;
  }
}

}  // namespace qmet::graphs
