#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "qmet/encoder.hpp"
#include "qmet/model.hpp"
#include "qmet/random.hpp"

using namespace qmet;
using diff::Array;
using diff::ParamStore;
using diff::Tape;

namespace {

Array features(std::size_t rows, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(rows * dim);
  for (auto& x : v) x = rng.normal();
  return Array::matrix(rows, dim, v);
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("qmet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(Encoder, SameSeedSameParametersDifferentSeedDifferent) {
  enc::EncoderSpec spec;
  ParamStore a, b, c;
  enc::Encoder ea(spec, a, 7), eb(spec, b, 7), ec(spec, c, 8);
  for (auto id : ea.param_ids()) EXPECT_EQ(a.value(id), b.value(id));
  EXPECT_NE(a.value(ea.param_ids().front()), c.value(ec.param_ids().front()));
}

TEST(Encoder, KaimingUniformBounds) {
  enc::EncoderSpec spec;
  spec.input_dim = 64;
  ParamStore s;
  enc::Encoder e(spec, s, 1);
  const auto& w0 = s.value(e.param_ids().front());
  const double bound = std::sqrt(6.0 / 64.0);
  double max_abs = 0.0;
  for (double x : w0.values()) max_abs = std::max(max_abs, std::abs(x));
  EXPECT_LE(max_abs, bound);
  EXPECT_GT(max_abs, 0.9 * bound);
}

TEST(Encoder, OutputShapeAndValidation) {
  enc::EncoderSpec spec;
  spec.input_dim = 5;
  spec.hidden = {7};
  spec.output_dim = 3;
  ParamStore s;
  enc::Encoder e(spec, s, 1);
  Tape t;
  EXPECT_EQ(t.shape(e.encode(t, t.constant(features(4, 5, 1)), enc::Mode::kEval)), (diff::Shape{4, 3}));
  EXPECT_THROW(e.encode(t, t.constant(features(4, 6, 1)), enc::Mode::kEval), std::exception);
  spec.output_dim = 0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(Encoder, NormalizationTrainZeroMeanAndRunningStats) {
  enc::EncoderSpec spec;
  spec.input_dim = 4;
  spec.hidden = {6};
  spec.output_dim = 2;
  spec.feature_norm = true;
  ParamStore s;
  enc::Encoder e(spec, s, 3);
  const Array x = features(32, 4, 2);
  Tape t;
  e.encode(t, t.constant(x), enc::Mode::kTrain);
  // Running mean moved from 0 toward the batch mean by the momentum.
  const auto& stats = e.norm_stats().at(0);
  double moved = 0.0;
  for (double m : stats.running_mean.values()) moved += std::abs(m);
  EXPECT_GT(moved, 0.0);
  // Eval mode is deterministic and does not change the statistics.
  const Array before = stats.running_mean;
  Tape t1, t2;
  const Array y1 = t1.value(e.encode(t1, t1.constant(x), enc::Mode::kEval));
  const Array y2 = t2.value(e.encode(t2, t2.constant(x), enc::Mode::kEval));
  EXPECT_EQ(y1, y2);
  EXPECT_EQ(before, e.norm_stats().at(0).running_mean);
}

TEST(Encoder, SaveLoadRoundTrip) {
  const auto dir = temp_dir("encoder");
  enc::EncoderSpec spec;
  spec.feature_norm = true;
  ParamStore a, b;
  enc::Encoder ea(spec, a, 1), eb(spec, b, 2);
  Tape t;
  ea.encode(t, t.constant(features(8, 64, 1)), enc::Mode::kTrain);
  ea.save(dir / "enc.bin", 17);
  EXPECT_EQ(eb.load(dir / "enc.bin"), 17u);
  for (std::size_t i = 0; i < ea.param_ids().size(); ++i)
    EXPECT_EQ(a.value(ea.param_ids()[i]), b.value(eb.param_ids()[i]));
  EXPECT_EQ(ea.norm_stats().at(1).running_var, eb.norm_stats().at(1).running_var);
  enc::EncoderSpec other = spec;
  other.output_dim = 10;
  ParamStore c;
  enc::Encoder ec(other, c, 1);
  EXPECT_THROW(ec.load(dir / "enc.bin"), std::exception);
}

TEST(Model, PredictionsMatchHeadOnLatents) {
  model::ModelSpec spec;
  spec.feature_dim = 6;
  spec.hidden = {8};
  spec.head.family = HeadFamily::kIqeMaxMean;
  model::Model m(spec, 4);
  const Array x = features(5, 6, 3);
  model::PairIndex pairs;
  pairs.push(0, 1);
  pairs.push(3, 3);
  pairs.push(4, 2);
  const auto d = m.predict_values(x, pairs);
  ASSERT_EQ(d.size(), 3u);
  EXPECT_EQ(d[1], 0.0);
  // Recompute from latents with the head directly.
  const Array z = m.latents(x);
  Tape t;
  const std::size_t dim = spec.head.latent_dim();
  auto rowv = [&](std::size_t r) {
    return std::vector<double>(z.values().begin() + r * dim, z.values().begin() + (r + 1) * dim);
  };
  const auto du = t.constant(Array::matrix(2, dim, [&] {
    auto a = rowv(0), b = rowv(4);
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }()));
  const auto dv = t.constant(Array::matrix(2, dim, [&] {
    auto a = rowv(1), b = rowv(2);
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }()));
  const auto ref = t.value(m.head()->distance(t, du, dv));
  EXPECT_DOUBLE_EQ(d[0], ref[0]);
  EXPECT_DOUBLE_EQ(d[2], ref[1]);
}

TEST(Model, UnconstrainedSlotsSelectDistinctOutputs) {
  model::ModelSpec spec;
  spec.feature_dim = 4;
  spec.hidden = {8};
  spec.slots = 2;
  spec.head.family = HeadFamily::kUnconstrained;
  model::Model m(spec, 1);
  const Array x = features(3, 4, 9);
  model::PairIndex pairs;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b) pairs.push(0, 1, a, b);
  const auto d = m.predict_values(x, pairs);
  EXPECT_NE(d[0], d[1]);
  EXPECT_NE(d[1], d[2]);
  EXPECT_NE(d[2], d[3]);
}

TEST(Model, AsymDotUsesTwoEncoders) {
  model::ModelSpec spec;
  spec.feature_dim = 4;
  spec.hidden = {8};
  spec.head.family = HeadFamily::kAsymDot;
  model::Model m(spec, 1);
  const Array x = features(2, 4, 9);
  model::PairIndex pairs;
  pairs.push(0, 1);
  pairs.push(1, 0);
  const auto d = m.predict_values(x, pairs);
  EXPECT_NE(d[0], d[1]);
}

TEST(Model, SaveLoadReproducesPredictions) {
  const auto dir = temp_dir("model");
  model::ModelSpec spec;
  spec.feature_dim = 6;
  spec.hidden = {8, 8};
  spec.feature_norm = true;
  spec.head.family = HeadFamily::kWideNorm;
  model::Model a(spec, 1), b(spec, 2);
  const Array x = features(6, 6, 1);
  model::PairIndex pairs;
  for (std::size_t i = 0; i < 6; ++i) pairs.push(i, (i + 1) % 6);
  Tape t;
  a.predict(t, x, pairs, enc::Mode::kTrain);
  a.save(dir / "model.bin", 3);
  EXPECT_EQ(b.load(dir / "model.bin"), 3u);
  EXPECT_EQ(a.predict_values(x, pairs), b.predict_values(x, pairs));
}
