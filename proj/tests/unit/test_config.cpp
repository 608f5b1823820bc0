#include <gtest/gtest.h>

#include <set>

#include "qmet/config.hpp"

using namespace qmet;
using namespace qmet::cfg;

TEST(Config, ParsesSectionsCommentsAndLists) {
  const auto doc = ConfigDoc::parse(R"(
# comment line
[head]
family = iqe-sum, metric-l1   # trailing comment
k = 6
l = 8

[train]
lr = 1e-3,3e-4
graph.nodes = 50
)");
  EXPECT_EQ(doc.get("head.family"), (std::vector<std::string>{"iqe-sum", "metric-l1"}));
  EXPECT_EQ(doc.get("graph.nodes"), (std::vector<std::string>{"50"}));
  EXPECT_EQ(doc.get("train.epochs"), (std::vector<std::string>{"50"}));  // default
  EXPECT_EQ(doc.grid_keys(), (std::vector<std::string>{"head.family", "train.lr"}));
  const auto cells = doc.expand();
  ASSERT_EQ(cells.size(), 4u);
  std::set<std::string> prints;
  for (const auto& c : cells) prints.insert(c.fingerprint());
  EXPECT_EQ(prints.size(), 4u);
  const auto conf = cells[3].resolve();
  EXPECT_EQ(conf.model.head.family, HeadFamily::kMetricL1);
  EXPECT_DOUBLE_EQ(conf.train.lr, 3e-4);
  EXPECT_EQ(conf.model.head.k, 6u);
  EXPECT_EQ(conf.graph.nodes, 50u);
}

TEST(Config, ErrorsNameTheField) {
  auto field_of = [](const std::string& text) {
    try {
      ConfigDoc::parse(text).expand().front().resolve();
    } catch (const ConfigError& e) {
      return e.field();
    }
    return std::string("none");
  };
  EXPECT_EQ(field_of("[train]\nlr = fast\n"), "train.lr");
  EXPECT_EQ(field_of("[head]\nfamily = nope\n"), "head.family");
  EXPECT_EQ(field_of("[head]\nk = 0\n"), "head.k");
  EXPECT_EQ(field_of("[graph]\ntrain_fraction = 1.5\n"), "graph.train_fraction");
  EXPECT_EQ(field_of("[mystery]\nx = 1\n"), "mystery.x");
  EXPECT_EQ(field_of("[head]\nk = 1,2\n"), "head.k");
  EXPECT_EQ(field_of("[experiment]\nkind = ablate-kl\n[ablate]\nk = 5\n"), "ablate.k");
  EXPECT_EQ(field_of("no equals sign\n"), "line 1");
  EXPECT_EQ(field_of("[experiment]\nseeds =\n"), "experiment.seeds");
}

TEST(Config, FingerprintIgnoresRunControlKeys) {
  auto a = ConfigDoc::parse("[experiment]\nout = a\njobs = 4\nseeds = 1\n");
  auto b = ConfigDoc::parse("[experiment]\nout = b\n");
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  b.set("train.epochs", {"7"});
  EXPECT_NE(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.fingerprint().size(), 16u);
}

TEST(Config, AblationDerivesComponentSize) {
  const auto doc = ConfigDoc::parse("[experiment]\nkind = ablate-kl\n[ablate]\ntotal_dim = 48\nk = 4,6,8,12\n");
  const auto cells = doc.expand();
  ASSERT_EQ(cells.size(), 4u);
  std::vector<std::size_t> ls;
  for (const auto& c : cells) ls.push_back(c.resolve().model.head.l);
  EXPECT_EQ(ls, (std::vector<std::size_t>{12, 8, 6, 4}));
  // For other kinds the ablation list is inert.
  EXPECT_EQ(ConfigDoc{}.expand().size(), 1u);
}

TEST(Config, FamilyAllExpandsToEveryFamily) {
  const auto doc = ConfigDoc::parse("[head]\nfamily = all\n");
  EXPECT_EQ(doc.expand().size(), all_head_families().size());
}

TEST(Config, GridworldFixesSlotsAndFeatures) {
  const auto conf = ConfigDoc::parse("[experiment]\nkind = gridworld\n[gridworld]\nwidth = 6\nheight = 5\n").resolve();
  EXPECT_EQ(conf.model.slots, 4u);
  EXPECT_EQ(conf.model.feature_dim, 11u);
}

TEST(Config, HeadGammaFollowsTrainingDiscountUnlessSet) {
  EXPECT_DOUBLE_EQ(ConfigDoc::parse("[train]\ngamma = 0.95\n").resolve().model.head.gamma, 0.95);
  EXPECT_DOUBLE_EQ(ConfigDoc::parse("[train]\ngamma = 0.95\n[head]\ngamma = 0.8\n").resolve().model.head.gamma, 0.8);
}

TEST(Config, DefaultsTextParsesBackToDefaults) {
  const auto doc = ConfigDoc::parse(ConfigDoc::defaults_text());
  EXPECT_EQ(doc.canonical(), ConfigDoc{}.canonical());
  EXPECT_EQ(doc.fingerprint(), ConfigDoc{}.fingerprint());
}
