#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "oracles.hpp"
#include "qmet/csv.hpp"
#include "qmet/experiments.hpp"

using namespace qmet;
namespace fs = std::filesystem;

namespace {

fs::path fresh(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("qmet_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

cfg::ConfigDoc tiny_graph_doc() {
  return cfg::ConfigDoc::parse(R"(
[experiment]
kind = graph
seeds = 1,2,3
[head]
family = iqe-sum, metric-euclid
k = 2
l = 4
[encoder]
hidden = 16
[graph]
nodes = 30
feature_dim = 8
train_fraction = 0.2
[train]
epochs = 3
batch_size = 64
)");
}

}  // namespace

TEST(Csv, RoundTripWithQuoting) {
  const auto path = fresh("csv.csv");
  {
    csv::Writer w(path, {"a", "b"});
    w.row({"x,y", "say \"hi\""});
    w.row({"1", ""});
  }
  const auto t = csv::read(path);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][0], "x,y");
  EXPECT_EQ(t.rows[0][1], "say \"hi\"");
  EXPECT_EQ(t.rows[1][1], "");
  EXPECT_EQ(t.column("b"), 1u);
  EXPECT_THROW(csv::parse("a,b\n1\n"), std::runtime_error);
}

TEST(Csv, FormatDoubleRoundTrips) {
  for (double x : {0.1, 1.0 / 3.0, 1e-300, 123456789.125}) EXPECT_EQ(std::stod(csv::format_double(x)), x);
  EXPECT_EQ(csv::format_double(std::nan("")), "nan");
  EXPECT_EQ(csv::format_double(-INFINITY), "-inf");
}

TEST(Experiments, SuiteWritesRunsAndAggregates) {
  const auto out = fresh("suite");
  exp::SuiteOverrides o;
  o.out = out.string();
  const auto suite = exp::run_suite(tiny_graph_doc(), o);
  ASSERT_EQ(suite.runs.size(), 6u);
  for (const auto& r : suite.runs) {
    EXPECT_EQ(r.status, "ok") << r.error;
    EXPECT_TRUE(fs::exists(out / r.run_id() / "metrics.csv"));
    EXPECT_TRUE(fs::exists(out / r.run_id() / "result.json"));
  }
  EXPECT_FALSE(suite.all_diverged());

  // Independent recomputation of mean and sample sd from the per-run files.
  const auto table = csv::read(out / "aggregate.csv");
  std::map<std::string, std::vector<double>> per_cell;
  for (const auto& r : exp::load_runs(out)) per_cell[r.cell].push_back(r.metric("val_mse_e3"));
  std::size_t checked = 0;
  for (const auto& row : table.rows) {
    if (row[table.column("metric")] != "val_mse_e3") continue;
    const auto [m, sd] = oracle::mean_sd(per_cell.at(row[table.column("cell")]));
    EXPECT_NEAR(std::stod(row[table.column("mean")]), m, 1e-12 * std::abs(m));
    EXPECT_NEAR(std::stod(row[table.column("sd")]), sd, 1e-9 * std::abs(sd) + 1e-15);
    EXPECT_NE(row[table.column("formatted")].find(" ± "), std::string::npos);
    ++checked;
  }
  EXPECT_EQ(checked, 2u);
}

TEST(Experiments, RerunAndReaggregateAreBitIdentical) {
  const auto a = fresh("det_a"), b = fresh("det_b");
  exp::SuiteOverrides oa, ob;
  oa.out = a.string();
  ob.out = b.string();
  ob.jobs = 2;
  exp::run_suite(tiny_graph_doc(), oa);
  exp::run_suite(tiny_graph_doc(), ob);
  EXPECT_EQ(slurp(a / "aggregate.csv"), slurp(b / "aggregate.csv"));
  EXPECT_EQ(slurp(a / "runs.csv"), slurp(b / "runs.csv"));
  const std::string before = slurp(a / "aggregate.csv");
  exp::write_aggregate_csv(a / "aggregate.csv", exp::aggregate(exp::load_runs(a)));
  EXPECT_EQ(slurp(a / "aggregate.csv"), before);
}

TEST(Experiments, FailuresAreRecordedAndAggregationContinues) {
  const auto out = fresh("fail");
  auto doc = cfg::ConfigDoc::parse("[experiment]\nkind = profile\nseeds = 1,2\n[head]\nfamily = iqe-sum, asym-dot\n");
  exp::SuiteOverrides o;
  o.out = out.string();
  const auto suite = exp::run_suite(doc, o);
  ASSERT_EQ(suite.runs.size(), 4u);
  EXPECT_EQ(suite.runs[0].status, "ok");
  EXPECT_EQ(suite.runs[2].status, "failed");
  EXPECT_FALSE(suite.runs[2].error.empty());
  EXPECT_TRUE(fs::exists(out / "aggregate.csv"));
  EXPECT_FALSE(suite.all_diverged());
}

TEST(Experiments, AblationCurveHasOneRowPerKAndSeed) {
  const auto out = fresh("ablate");
  auto doc = tiny_graph_doc();
  doc.set("experiment.kind", {"ablate-kl"});
  doc.set("head.family", {"iqe-sum"});
  doc.set("ablate.total_dim", {"8"});
  doc.set("ablate.k", {"2", "8"});
  doc.set("experiment.seeds", {"1", "2"});
  exp::SuiteOverrides o;
  o.out = out.string();
  exp::run_suite(doc, o);
  const auto t = csv::read(out / "ablate_curve.csv");
  EXPECT_EQ(t.rows.size(), 4u);
  EXPECT_EQ(t.rows[0][t.column("l")], "4");
  EXPECT_EQ(t.rows[3][t.column("l")], "1");
}

TEST(Experiments, AuditWritesCapabilityMatrixRowPerFamily) {
  const auto out = fresh("audit");
  auto doc = cfg::ConfigDoc::parse(
      "[experiment]\nkind = audit\nseeds = 0\n[head]\nfamily = all\n[audit]\npairs = 200\ntriples = 500\n"
      "witness_budget = 2000\nwitness_seeds = 2\n");
  exp::SuiteOverrides o;
  o.out = out.string();
  exp::run_suite(doc, o);
  const auto t = csv::read(out / "capability.csv");
  EXPECT_EQ(t.rows.size(), all_head_families().size());
  EXPECT_EQ(t.rows[0][0], "iqe-sum");
  EXPECT_TRUE(fs::exists(out / "witnesses.csv"));
}

TEST(Experiments, CellMeanMatchesExactTokens) {
  std::vector<exp::RunRecord> runs(3);
  runs[0].cell = "head.transform=discounted";
  runs[1].cell = "head.transform=sigmoid-discounted";
  runs[2].cell = "head.transform=discounted";
  runs[2].status = "failed";
  for (std::size_t i = 0; i < 3; ++i) {
    if (runs[i].status.empty()) runs[i].status = "ok";
    runs[i].metrics = {{"m", static_cast<double>(i + 1)}};
  }
  EXPECT_EQ(exp::cell_mean(runs, "m", {"head.transform=discounted"}), 1.0);
  EXPECT_TRUE(std::isnan(exp::cell_mean(runs, "m", {"head.transform=exp"})));
}
