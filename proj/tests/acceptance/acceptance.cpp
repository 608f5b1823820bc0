// End-to-end acceptance driver. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gradient_cases.hpp"
#include "oracles.hpp"
#include "qmet/config.hpp"
#include "qmet/experiments.hpp"
#include "qmet/graphs.hpp"
#include "qmet/random.hpp"
#include "qmet/theory.hpp"

namespace fs = std::filesystem;
using namespace qmet;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

const std::vector<HeadFamily> kQuasimetricHeads{HeadFamily::kIqeSum,        HeadFamily::kIqeMaxMean,
                                                HeadFamily::kPqeLh,         HeadFamily::kDeepNormFixed,
                                                HeadFamily::kWideNorm,      HeadFamily::kMrnFixed};

// ---------------------------------------------------------------- 1
Verdict axiom_suite() {
  theory::AuditCounts counts;
  counts.pairs = 10000;
  counts.triples = 100000;
  double worst_identity = 0.0, worst_triangle = 0.0;
  std::string worst_family;
  for (HeadFamily f : kQuasimetricHeads) {
    HeadSpec spec;
    spec.family = f;
    for (std::uint64_t init = 1; init <= 5; ++init) {
      const auto r = theory::audit_family(spec, init, counts);
      if (r.identity_residual > worst_identity || r.triangle_violation > worst_triangle)
        worst_family = std::string(to_string(f));
      worst_identity = std::max(worst_identity, r.identity_residual);
      worst_triangle = std::max(worst_triangle, r.triangle_violation);
    }
  }
  const bool axioms = worst_identity <= 1e-9 && worst_triangle <= 1e-9;

  theory::SearchConfig search;
  search.budget = 100000;
  auto small = [](HeadFamily f) {
    HeadSpec s;
    s.family = f;
    s.k = 1;
    s.l = 4;
    s.hidden = 4;
    return s;
  };
  std::size_t negativity = 0, triangle = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto n = theory::find_negativity_witness(small(HeadFamily::kDeepNormOrig), seed, search);
    if (n && n->value < -search.threshold) ++negativity;
    const auto t = theory::find_triangle_witness(small(HeadFamily::kMrnOrig), seed, search);
    if (t && t->value > search.threshold) ++triangle;
  }
  const auto col = theory::mrn_collinear_witness(HeadFamily::kMrnOrig);
  const auto col_fixed = theory::mrn_collinear_witness(HeadFamily::kMrnFixed);
  // The collinear triple 0, 1, 2 in one dimension: squared gaps 1, 1, 4.
  const bool collinear = col.violated() && col.d02 > col.d01 + col.d12 && !col_fixed.violated();

  std::ostringstream os;
  os << "identity " << fmt("%.2e", worst_identity) << ", triangle " << fmt("%.2e", worst_triangle)
     << (worst_family.empty() ? "" : " (worst " + worst_family + ")") << "; deep-norm-orig negativity "
     << negativity << "/20, mrn-orig triangle " << triangle << "/20, collinear " << col.d01 << "+" << col.d12
     << " < " << col.d02;
  return {axioms && negativity >= 1 && triangle >= 1 && collinear, os.str()};
}

// ---------------------------------------------------------------- 2
// Direct check on fresh random latents, independent of the audit sampler.
double homogeneity_error(HeadFamily family, double alpha, std::uint64_t seed) {
  HeadSpec spec;
  spec.family = family;
  diff::ParamStore store;
  const heads::LatentHead head(spec, store, seed);
  Rng rng(derive_seed(seed, 202));
  const std::size_t rows = 2000, dim = spec.latent_dim();
  std::vector<double> u(rows * dim), v(rows * dim);
  for (auto& x : u) x = rng.uniform(-3.0, 3.0);
  for (auto& x : v) x = rng.uniform(-3.0, 3.0);
  auto eval = [&](double scale) {
    std::vector<double> su(u), sv(v);
    for (auto& x : su) x *= scale;
    for (auto& x : sv) x *= scale;
    diff::Tape t;
    const auto d = head.distance(t, t.constant(diff::Array::matrix(rows, dim, su)),
                                 t.constant(diff::Array::matrix(rows, dim, sv)));
    const auto vals = t.value(d).values();
    return std::vector<double>(vals.begin(), vals.end());
  };
  const auto base = eval(1.0);
  const auto scaled = eval(alpha);
  double worst = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    const double want = alpha * base[i];
    worst = std::max(worst, std::abs(scaled[i] - want) / std::max(std::abs(want), 1e-12));
  }
  return worst;
}

Verdict homogeneity() {
  double iqe = 0.0;
  for (HeadFamily f : {HeadFamily::kIqeSum, HeadFamily::kIqeMaxMean})
    for (double a : {0.5, 2.0, 10.0})
      for (std::uint64_t s = 1; s <= 3; ++s) iqe = std::max(iqe, homogeneity_error(f, a, s));
  double pqe = std::numeric_limits<double>::infinity();
  for (std::uint64_t s = 1; s <= 3; ++s) pqe = std::min(pqe, homogeneity_error(HeadFamily::kPqeLh, 10.0, s));
  return {iqe <= 1e-9 && pqe > 0.1,
          "IQE max relative error " + fmt("%.2e", iqe) + "; PQE-LH at alpha=10 " + fmt("%.3f", pqe)};
}

// ---------------------------------------------------------------- 3
graphs::DirectedGraph random_strongly_connected(std::size_t n, Rng& rng) {
  // A randomly ordered Hamiltonian cycle plus random chords at a random density.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  graphs::DirectedGraph g(n);
  for (std::size_t i = 0; i < n; ++i) g.add_edge(order[i], order[(i + 1) % n]);
  const std::size_t chords = rng.index(2 * n + 1);
  for (std::size_t e = 0; e < chords; ++e) g.add_edge(rng.index(n), rng.index(n));
  return g;
}

Verdict exact_representation() {
  Rng rng(31);
  const std::size_t sizes[] = {5, 10, 20, 50};
  double worst = 0.0;
  std::size_t graphs_checked = 0;
  for (std::size_t trial = 0; trial < 50; ++trial) {
    const std::size_t n = sizes[trial % 4];
    const auto g = random_strongly_connected(n, rng);
    if (oracle::largest_mutual_class(g) != n) return {false, "generator produced a graph that is not strongly connected"};
    const auto fw = oracle::floyd_warshall(g);
    const auto cert = theory::exact_embed_maxmean(graphs::all_pairs_distances(g));
    if (cert.head.family != HeadFamily::kIqeMaxMean || cert.head.l != 1)
      return {false, "certificate does not use an IQE-maxmean head with l = 1"};
    // Recompute IQE-maxmean at alpha = 1: max over components of the union length.
    const std::size_t k = cert.head.k, l = cert.head.l;
    for (std::size_t x = 0; x < n; ++x) {
      for (std::size_t y = 0; y < n; ++y) {
        double d = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
          std::vector<double> u(l), v(l);
          for (std::size_t j = 0; j < l; ++j) {
            u[j] = cert.latents.at(x, i * l + j);
            v[j] = cert.latents.at(y, i * l + j);
          }
          d = std::max(d, oracle::union_length(u, v));
        }
        worst = std::max(worst, std::abs(d - fw[x * n + y]));
      }
    }
    worst = std::max(worst, cert.max_error);
    ++graphs_checked;
  }
  return {worst <= 1e-9, std::to_string(graphs_checked) + " graphs, max error " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------- 4
double component_sum(const theory::EmbeddingCertificate& c, std::size_t x, std::size_t y) {
  double total = 0.0;
  for (std::size_t i = 0; i < c.head.k; ++i) {
    std::vector<double> u(c.head.l), v(c.head.l);
    for (std::size_t j = 0; j < c.head.l; ++j) {
      u[j] = c.latents.at(x, i * c.head.l + j);
      v[j] = c.latents.at(y, i * c.head.l + j);
    }
    total += oracle::union_length(u, v);
  }
  return total;
}

theory::Quasipartition random_quasipartition(Rng& rng, std::size_t n, std::size_t m) {
  std::vector<std::vector<std::size_t>> g(n, std::vector<std::size_t>(m));
  for (auto& row : g)
    for (auto& x : row) x = 1 + rng.index(n);
  return theory::quasipartition_from_order(std::move(g));
}

// pi from g computed here, not by the library.
std::uint8_t order_pi(const std::vector<std::vector<std::size_t>>& g, std::size_t u, std::size_t v) {
  for (std::size_t c = 0; c < g[u].size(); ++c)
    if (g[u][c] > g[v][c]) return 1;
  return 0;
}

Verdict quasipartition_embedding() {
  Rng rng(41);
  const double scales[] = {0.5, 1.0, 7.25};
  double worst_single = 0.0, worst_mix = 0.0;
  for (std::size_t trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.index(9), m = 1 + rng.index(5);
    const auto q = random_quasipartition(rng, n, m);
    const double s = scales[trial % 3];
    const auto cert = theory::quasipartition_embed_sum(q, s);
    if (cert.head.k != 1) return {false, "single-component embedding used k != 1"};
    for (std::size_t x = 0; x < n; ++x)
      for (std::size_t y = 0; y < n; ++y)
        worst_single = std::max(worst_single, std::abs(component_sum(cert, x, y) - s * order_pi(q.g, x, y)));
  }
  for (std::size_t trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.index(9), parts = 2 + rng.index(3);
    std::vector<theory::Quasipartition> qs;
    std::vector<double> w;
    for (std::size_t p = 0; p < parts; ++p) {
      qs.push_back(random_quasipartition(rng, n, 1 + rng.index(4)));
      w.push_back(rng.uniform());
    }
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    for (auto& x : w) x /= total;
    const auto cert = theory::convex_combination_embed(qs, w);
    if (cert.head.family != HeadFamily::kIqeSum) return {false, "convex combination not read by IQE-sum"};
    for (std::size_t x = 0; x < n; ++x) {
      for (std::size_t y = 0; y < n; ++y) {
        double want = 0.0;
        for (std::size_t p = 0; p < parts; ++p) want += w[p] * order_pi(qs[p].g, x, y);
        worst_mix = std::max(worst_mix, std::abs(component_sum(cert, x, y) - want));
      }
    }
  }
  return {worst_single <= 1e-9 && worst_mix <= 1e-9,
          "100 order embeddings max error " + fmt("%.2e", worst_single) + "; 20 convex combinations " +
              fmt("%.2e", worst_mix)};
}

// ---------------------------------------------------------------- 5
Verdict integral_limit() {
  Rng rng(51);
  const std::vector<double> grid{1, 10, 100, 1000};
  double worst_final = 0.0;
  std::size_t non_monotone = 0, strict_first = 0;
  for (std::size_t row = 0; row < 100; ++row) {
    const std::size_t l = 1 + rng.index(8);
    std::vector<double> u(l), v(l);
    for (std::size_t j = 0; j < l; ++j) {
      u[j] = rng.uniform(-2.0, 2.0);
      v[j] = rng.uniform(-2.0, 2.0);
    }
    const auto rows = theory::integral_pqe_limit_check(u, v, grid);
    const double exact = oracle::union_length(u, v);
    // Independent error at each c, as the library row reports it.
    for (const auto& r : rows)
      if (std::abs(r.component - exact) > 1e-12) return {false, "component disagrees with the interval-union oracle"};
    for (std::size_t i = 1; i < rows.size(); ++i) non_monotone += rows[i].error > rows[i - 1].error;
    strict_first += exact > 0.0 && rows[1].error < rows[0].error;
    worst_final = std::max(worst_final, rows.back().error);
  }
  // Once e^-c underflows the error is exactly 0, so later steps compare as equal.
  return {non_monotone == 0 && worst_final < 1e-3,
          "non-increasing violations " + std::to_string(non_monotone) + ", strict drop 1->10 in " +
              std::to_string(strict_first) + " rows, max error at c=1000 " + fmt("%.2e", worst_final)};
}

// ---------------------------------------------------------------- 6
Verdict gradients() {
  double worst = 0.0;
  std::size_t failed = 0, checked = 0;
  std::set<std::string> targets;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto out = gradcase::run_case(i, 6006);
    targets.insert(out.target.substr(0, out.target.find('/')));
    const bool ok = out.report.passed && !out.report.nondifferentiable_point && !out.redraw && out.report.checked > 0;
    failed += !ok;
    checked += out.report.checked;
    worst = std::max(worst, out.report.max_rel_error);
  }
  return {failed == 0 && targets.size() == gradcase::target_count(),
          "100 configurations over " + std::to_string(targets.size()) + " targets, " + std::to_string(checked) +
              " coordinates, " + std::to_string(failed) + " failed, max relative error " + fmt("%.2e", worst)};
}

// ------------------------------------------------------------- suites
struct Suites {
  fs::path work;
  std::size_t jobs;

  exp::SuiteResult run(const std::string& name, const std::string& subdir) const {
    auto doc = cfg::ConfigDoc::load(std::string(QMET_CONFIG_DIR) + "/" + name + ".cfg");
    exp::SuiteOverrides o;
    o.out = (work / subdir).string();
    o.jobs = jobs;
    const auto t0 = std::chrono::steady_clock::now();
    auto r = exp::run_suite(doc, o);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "  [%s: %zu runs in %.0f s]\n", name.c_str(), r.runs.size(), secs);
    return r;
  }
};

std::size_t count_ok(const exp::SuiteResult& r) {
  return static_cast<std::size_t>(
      std::count_if(r.runs.begin(), r.runs.end(), [](const exp::RunRecord& x) { return x.status == "ok"; }));
}

Verdict graph_regression(const Suites& s) {
  const auto heads = s.run("graph_desk", "graph_desk");
  const auto base = s.run("graph_baselines_desk", "graph_baselines_desk");
  const auto reg = s.run("graph_regularized_desk", "graph_regularized_desk");
  const double iqe = exp::cell_mean(heads.runs, "val_mse", {"head.family=iqe-sum"});
  double best_metric = std::numeric_limits<double>::infinity();
  std::string best_metric_name;
  for (const char* f : {"metric-euclid", "metric-l1", "metric-sphere", "metric-mix"}) {
    const double m = exp::cell_mean(heads.runs, "val_mse", {std::string("head.family=") + f});
    if (m < best_metric) best_metric = m, best_metric_name = f;
  }
  double best_free = std::numeric_limits<double>::infinity();
  std::string best_free_name;
  for (const char* t : {"direct", "exp", "square", "discounted", "sigmoid-discounted"}) {
    // Diverged transforms contribute nothing; NaN never wins the comparison.
    const double m = exp::cell_mean(base.runs, "val_mse", {std::string("head.transform=") + t});
    if (m < best_free) best_free = m, best_free_name = t;
  }
  const double regularized = exp::cell_mean(reg.runs, "val_mse", {});
  const bool complete = count_ok(heads) == heads.runs.size() && count_ok(reg) == reg.runs.size();
  const bool pass = complete && std::isfinite(iqe) && iqe < best_metric && iqe <= 1.5 * best_free &&
                    !(regularized < iqe);
  std::ostringstream os;
  os << "val MSE x1e3: iqe-sum " << fmt("%.3f", 1e3 * iqe) << ", best metric (" << best_metric_name << ") "
     << fmt("%.3f", 1e3 * best_metric) << ", best unconstrained (" << best_free_name << ") "
     << fmt("%.3f", 1e3 * best_free) << " (ratio " << fmt("%.2f", iqe / best_free) << "), regularized "
     << fmt("%.3f", 1e3 * regularized);
  if (!complete) os << "; some runs did not finish";
  return {pass, os.str()};
}

Verdict ablation(const Suites& s) {
  const auto r = s.run("ablate_desk", "ablate_desk");
  const double l12 = exp::cell_mean(r.runs, "val_mse", {"ablate.k=4"});
  const double l1 = exp::cell_mean(r.runs, "val_mse", {"ablate.k=48"});
  std::ostringstream os;
  os << "val MSE x1e3: l=12 (k=4) " << fmt("%.3f", 1e3 * l12) << ", l=1 (k=48) " << fmt("%.3f", 1e3 * l1);
  return {std::isfinite(l12) && std::isfinite(l1) && l12 < l1, os.str()};
}

Verdict gridworld(const Suites& s) {
  const auto r = s.run("rl_desk", "rl_desk");
  const double iqe = exp::cell_mean(r.runs, "success_rate", {"head.family=iqe-maxmean"});
  const double free = exp::cell_mean(r.runs, "success_rate", {"head.family=unconstrained"});
  double oracle_min = 1.0;
  for (const auto& run : r.runs) oracle_min = std::min(oracle_min, run.metric("oracle_success_rate"));
  std::ostringstream os;
  os << "success: iqe-maxmean " << fmt("%.3f", iqe) << ", unconstrained " << fmt("%.3f", free)
     << ", oracle min " << fmt("%.3f", oracle_min) << " over " << r.runs.size() << " runs";
  return {count_ok(r) == r.runs.size() && iqe >= free && oracle_min == 1.0, os.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Verdict determinism(const Suites& s) {
  // Re-run a training config from scratch with a different worker count.
  const fs::path first = s.work / "graph_regularized_desk" / "aggregate.csv";
  if (!fs::exists(first)) s.run("graph_regularized_desk", "graph_regularized_desk");
  Suites again{s.work, s.jobs == 1 ? std::size_t{2} : std::size_t{1}};
  fs::remove_all(s.work / "determinism_rerun");
  again.run("graph_regularized_desk", "determinism_rerun");
  const std::string a = slurp(first), b = slurp(s.work / "determinism_rerun" / "aggregate.csv");
  return {!a.empty() && a == b, std::to_string(a.size()) + " bytes, " + (a == b ? "identical" : "different")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qmet acceptance"};
  std::string work = "acceptance_runs";
  std::size_t jobs = 0;
  std::vector<int> only;
  app.add_option("--work", work, "directory for experiment runs");
  app.add_option("--jobs", jobs, "worker threads for suites (0 = hardware)");
  app.add_option("--only", only, "criteria to evaluate (default: all)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  fs::create_directories(work);
  const Suites suites{work, jobs};

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"axiom suite", axiom_suite},
      {"homogeneity", homogeneity},
      {"exact representation", exact_representation},
      {"quasipartition embedding", quasipartition_embedding},
      {"integral limit", integral_limit},
      {"gradient correctness", gradients},
      {"random-graph regression", [&] { return graph_regression(suites); }},
      {"(k,l) ablation direction", [&] { return ablation(suites); }},
      {"grid-world planning", [&] { return gridworld(suites); }},
      {"determinism", [&] { return determinism(suites); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s %d %s: %s\n", v.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
