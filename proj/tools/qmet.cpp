// qmet: data generation, training grids, audits, RL runs, ablations,
// profiles, and aggregation from one entry point.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "qmet/config.hpp"
#include "qmet/csv.hpp"
#include "qmet/experiments.hpp"
#include "qmet/graphs.hpp"

namespace fs = std::filesystem;
using namespace qmet;

namespace {

constexpr int kConfigError = 2;
constexpr int kAllDiverged = 3;

struct Common {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t jobs = 0;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "config file (key = value with [sections])")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seeds, "seed(s), overriding experiment.seeds")->delimiter(',');
  cmd->add_option("--out", c.out, "output directory, overriding experiment.out");
  cmd->add_option("--jobs", c.jobs, "worker threads, overriding experiment.jobs")->check(CLI::PositiveNumber);
  cmd->add_option("--set", c.sets, "extra key=value assignment (repeatable)");
}

// Loads the config, applies --set, and pins experiment.kind.
cfg::ConfigDoc load_doc(const Common& c, std::string_view kind) {
  cfg::ConfigDoc doc = c.config.empty() ? cfg::ConfigDoc{} : cfg::ConfigDoc::load(c.config);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw cfg::ConfigError("--set", "expected key=value, got '" + s + "'");
    const cfg::ConfigDoc one = cfg::ConfigDoc::parse(s);
    for (const auto& [k, v] : one.entries()) doc.set(k, v);
  }
  if (doc.has("experiment.kind") && doc.get("experiment.kind").front() != kind) {
    throw cfg::ConfigError("experiment.kind", "this subcommand runs '" + std::string(kind) + "' but the config says '" +
                                                  doc.get("experiment.kind").front() + "'");
  }
  doc.set("experiment.kind", {std::string(kind)});
  return doc;
}

exp::SuiteOverrides overrides(const Common& c) {
  exp::SuiteOverrides o;
  if (!c.seeds.empty()) o.seeds = c.seeds;
  if (!c.out.empty()) o.out = c.out;
  if (c.jobs) o.jobs = c.jobs;
  return o;
}

void print_summary(const std::vector<exp::AggregateRow>& rows, const std::vector<std::string>& metrics) {
  for (const auto& r : rows) {
    if (std::find(metrics.begin(), metrics.end(), r.metric) == metrics.end()) continue;
    std::printf("  %-48s %-22s %s  (n=%zu, failed=%zu)\n", r.cell.c_str(), r.metric.c_str(),
                r.formatted().c_str(), r.n, r.n_failed);
  }
}

int run_kind(const Common& c, std::string_view kind, const std::vector<std::string>& headline) {
  const cfg::ConfigDoc doc = load_doc(c, kind);
  const auto suite = exp::run_suite(doc, overrides(c), [](const exp::RunRecord& r) {
    std::printf("[%s] %s seed=%llu %s%s%s\n", r.status.c_str(), r.cell.c_str(),
                static_cast<unsigned long long>(r.seed), r.run_id().c_str(), r.error.empty() ? "" : ": ",
                r.error.c_str());
    std::fflush(stdout);
  });
  std::printf("wrote %s\n", (suite.out / "aggregate.csv").string().c_str());
  print_summary(exp::aggregate(suite.runs), headline);
  return suite.all_diverged() ? kAllDiverged : 0;
}

int gen_graph(const Common& c) {
  const cfg::ConfigDoc doc = load_doc(c, "graph");
  const auto conf = doc.resolve();
  const auto seeds = c.seeds.empty() ? conf.seeds : c.seeds;
  const fs::path out = c.out.empty() ? fs::path(conf.out) : fs::path(c.out);
  for (auto seed : seeds) {
    const fs::path dir = out / ("graph-" + std::string(graphs::to_string(conf.graph.kind)) + "-n" +
                                std::to_string(conf.graph.nodes) + "-s" + std::to_string(seed));
    fs::create_directories(dir);
    const auto g = graphs::generate_graph(conf.graph.kind, conf.graph.nodes, seed);
    const auto oracle = graphs::all_pairs_distances(g);
    const auto data = graphs::build_dataset(oracle, conf.graph.feature_dim, conf.graph.train_fraction,
                                            conf.train.gamma, seed);
    graphs::save_graph(dir / "graph.bin", g, oracle);
    graphs::write_pairs_csv(dir / "train_pairs.csv", data.train);
    graphs::write_pairs_csv(dir / "val_pairs.csv", data.val);
    std::size_t finite = 0;
    for (std::size_t i = 0; i < oracle.n; ++i)
      for (std::size_t j = 0; j < oracle.n; ++j) finite += oracle(i, j) < graphs::kInf;
    const nlohmann::ordered_json summary = {
        {"kind", graphs::to_string(conf.graph.kind)}, {"nodes", g.n},
        {"edges", g.edge_count()},                   {"largest_scc", graphs::largest_scc_size(g)},
        {"finite_pairs", finite},                    {"train_pairs", data.train.size()},
        {"val_pairs", data.val.size()},              {"seed", seed}};
    std::ofstream(dir / "summary.json") << summary.dump(2) << '\n';
    std::printf("%s: %zu edges, largest SCC %zu, %zu/%zu finite pairs\n", dir.string().c_str(), g.edge_count(),
                graphs::largest_scc_size(g), finite, oracle.n * oracle.n);
  }
  return 0;
}

int aggregate_dir(const std::string& dir) {
  const auto runs = exp::load_runs(dir);
  if (runs.empty()) {
    std::fprintf(stderr, "no result.json files under %s\n", dir.c_str());
    return 1;
  }
  const auto rows = exp::aggregate(runs);
  exp::write_runs_csv(fs::path(dir) / "runs.csv", runs);
  exp::write_aggregate_csv(fs::path(dir) / "aggregate.csv", rows);
  std::printf("aggregated %zu runs into %s\n", runs.size(), (fs::path(dir) / "aggregate.csv").string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qmet: quasimetric embedding laboratory"};
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print every config key with its default and exit");

  Common common;
  auto* gen = app.add_subcommand("gen-graph", "generate graphs, distance oracles, and pair splits");
  auto* train = app.add_subcommand("train", "random-graph distance regression over a config grid");
  auto* audit = app.add_subcommand("audit", "axiom audits and witness searches per head family");
  auto* rl = app.add_subcommand("rl", "offline goal-conditioned Q-learning in the door grid world");
  auto* ablate = app.add_subcommand("ablate-kl", "(k, l) sweep at fixed latent size");
  auto* profile = app.add_subcommand("profile", "distance along a scaled latent pair");
  for (auto* cmd : {gen, train, audit, rl, ablate, profile}) {
    add_common(cmd, common);
    cmd->add_flag("--print-defaults", print_defaults, "print every config key with its default and exit");
  }
  auto* agg = app.add_subcommand("aggregate", "recompute runs.csv and aggregate.csv from result.json files");
  std::string agg_dir;
  agg->add_option("--out", agg_dir, "directory holding run subdirectories")->required();

  CLI11_PARSE(app, argc, argv);

  if (print_defaults) {
    std::cout << cfg::ConfigDoc::defaults_text();
    return 0;
  }
  try {
    if (*gen) return gen_graph(common);
    if (*train) return run_kind(common, "graph", {"val_mse_e3", "val_l1_finite", "val_pred_inf"});
    if (*audit)
      return run_kind(common, "audit", {"identity_residual", "triangle_violation", "min_value", "witness_found"});
    if (*rl) return run_kind(common, "gridworld", {"success_rate", "oracle_success_rate"});
    if (*ablate) return run_kind(common, "ablate-kl", {"val_mse_e3", "val_pred_inf"});
    if (*profile) return run_kind(common, "profile", {"distance_at_max", "linearity_residual"});
    if (*agg) return aggregate_dir(agg_dir);
  } catch (const cfg::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::cout << app.help();
  return 0;
}
