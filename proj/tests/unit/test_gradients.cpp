#include <gtest/gtest.h>

#include "gradient_cases.hpp"
#include "qmet/trainer.hpp"

using namespace qmet;

class GradientCase : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradientCase, MatchesFiniteDifferences) {
  const auto out = gradcase::run_case(GetParam(), 2024);
  EXPECT_TRUE(out.report.passed) << out.target << " max rel error " << out.report.max_rel_error;
  EXPECT_FALSE(out.report.nondifferentiable_point) << out.target;
  EXPECT_GT(out.report.checked, 0u) << out.target;
}

// Two passes over every target.
INSTANTIATE_TEST_SUITE_P(AllTargets, GradientCase,
                         ::testing::Range<std::size_t>(0, 2 * gradcase::target_count()));

TEST(TrainingLosses, RegularizerAndMseGradients) {
  diff::ParamStore s;
  Rng rng(5);
  const auto dxy = s.add("dxy", gradcase::random_matrix(rng, 1, 6, 1.0));
  const auto dyz = s.add("dyz", gradcase::random_matrix(rng, 1, 6, 1.0));
  const auto dxz = s.add("dxz", gradcase::random_matrix(rng, 1, 6, 3.0));
  for (auto id : {dxy, dyz, dxz}) {
    for (auto& x : s.value(id).values()) x = std::abs(x);
    s.value(id) = s.value(id).reshaped({6});
  }
  const std::vector<double> target{0.9, 0.81, 0.5, 0.1, 1.0, 0.0};
  auto build = [&](diff::Tape& t) {
    const auto a = t.param(s, dxy), b = t.param(s, dyz), c = t.param(s, dxz);
    return t.add(train::triangle_regularizer(t, a, b, c, 0.9),
                 train::discounted_mse(t, c, target, 0.9));
  };
  const auto r = diff::grad_check_all(build, s, 1e-6, 1e-4);
  EXPECT_TRUE(r.passed) << r.max_rel_error;
}
