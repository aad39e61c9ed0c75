#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "mqsel/selection.hpp"
#include "test_helpers.hpp"

using namespace mqsel;
using mqsel::test_support::random_dataset;

namespace {

/// K experiments sharing the active set {0..q-1} with unit slopes.
MultiExperimentDataset sparse_dataset(std::uint64_t seed, int K, int n, int p, int q, double signal) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z;
  std::vector<Experiment> ex;
  for (int k = 0; k < K; ++k) {
    Experiment e{Eigen::VectorXd(n), Eigen::MatrixXd(n, p)};
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < p; ++j) e.design(i, j) = z(gen);
      e.response(i) = z(gen);
      for (int j = 0; j < q; ++j) e.response(i) += signal * e.design(i, j);
    }
    ex.push_back(std::move(e));
  }
  return MultiExperimentDataset::validate(std::move(ex));
}

const QuantileGrid kThree({0.25, 0.5, 0.75});

}  // namespace

TEST(Mqbic, ClosedForm) {
  const auto v = mqbic_from_loss(10.0, 2, 100.0, 2.0);
  EXPECT_NEAR(v.value, std::log(10.0) + 4.0 * std::log(100.0) / 200.0, 1e-12);
  EXPECT_NEAR(v.value, 2.394689, 1e-6);
  EXPECT_NEAR(v.log_loss, 2.302585, 1e-6);
  EXPECT_NEAR(v.size_term, 0.092103, 1e-6);
}

TEST(Mqbic, EmptySupportHasNoSizeTerm) {
  std::mt19937_64 gen(3);
  const auto data = random_dataset(gen, 2, 30, 3);
  const auto v = mqbic(data, kThree, {}, MqbicConfig{1.0, 3});
  EXPECT_EQ(v.size_term, 0.0);
  const auto fit = fit_unpenalized(data, kThree, {});
  EXPECT_NEAR(v.value, std::log(raw_check_sum(kThree, fit.residuals, 2)), 1e-12);
}

TEST(Mqbic, DecompositionReassembles) {
  std::mt19937_64 gen(5);
  for (int rep = 0; rep < 10; ++rep) {
    const auto data = random_dataset(gen, 2, 40, 4);
    const auto v = mqbic(data, kThree, {0, 2}, MqbicConfig{1.7, 4});
    EXPECT_NEAR(v.log_loss + v.size_term, v.value, 1e-12);
    EXPECT_NEAR(std::log(v.loss_sum), v.log_loss, 1e-12);
    EXPECT_NEAR(v.size_term, 2.0 * 1.7 * std::log(40.0) / 80.0, 1e-12);
    EXPECT_TRUE(std::isfinite(v.value));
  }
}

TEST(Mqbic, IncreasingInSizeAtFixedLoss) {
  double prev = -1e300;
  for (std::size_t s = 0; s < 6; ++s) {
    const double v = mqbic_from_loss(3.0, s, 50.0, 1.2).value;
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(Mqbic, UselessPredictorIncreasesCriterion) {
  // Column 1 is identically zero, so its coefficient cannot move the loss.
  std::mt19937_64 gen(11);
  auto data = random_dataset(gen, 1, 30, 2);
  auto ex = data.experiments();
  ex[0].design.col(1).setZero();
  data = MultiExperimentDataset::validate(ex);
  const MqbicConfig cfg{1.0, 2};
  const auto small = mqbic(data, kThree, {0}, cfg);
  const auto big = mqbic(data, kThree, {0, 1}, cfg);
  EXPECT_NEAR(small.loss_sum, big.loss_sum, 1e-9 * small.loss_sum);
  EXPECT_GT(big.value, small.value);
}

TEST(Mqbic, Errors) {
  std::mt19937_64 gen(1);
  const auto data = random_dataset(gen, 1, 20, 3);
  try {
    mqbic(data, kThree, {0, 1}, MqbicConfig{1.0, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SupportTooLarge);
  }
  EXPECT_THROW(mqbic_from_loss(0.0, 1, 10.0, 1.0), Error);
  try {
    mqbic_from_loss(0.0, 1, 10.0, 1.0);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ZeroLoss);
  }
  // Two observations, one slope: the median fit interpolates.
  Experiment e{Eigen::Vector2d(1.0, 3.0), Eigen::MatrixXd(2, 1)};
  e.design << 0.0, 1.0;
  const auto tiny = MultiExperimentDataset::validate({e});
  try {
    mqbic(tiny, QuantileGrid({0.5}), {0}, MqbicConfig{1.0, 1}, SolverConfig{});
    FAIL();
  } catch (const Error& err) {
    EXPECT_EQ(err.code(), ErrorCode::ZeroLoss);
  }
  EXPECT_THROW((MqbicConfig{0.0, 1}.validate()), Error);
  EXPECT_THROW((MqbicConfig{1.0, 0}.validate()), Error);
}

TEST(DefaultT, Values) {
  EXPECT_NEAR(default_T(100), 1.535057, 1e-6);
  EXPECT_NEAR(default_T(100, 6.0), 0.767528, 1e-6);
  EXPECT_NEAR(default_T(static_cast<std::size_t>(std::exp(3.0))), std::log(20.0) / 3.0, 1e-12);
  try {
    default_T(1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidInput);
  }
  EXPECT_THROW(default_T(10, 0.0), Error);
}

TEST(DefaultT, EulerCubeGivesOne) {
  // ln p / 3 == 1 exactly when p = e^3; the integer nearest e^3 is 20.
  EXPECT_NEAR(std::log(std::exp(3.0)) / 3.0, 1.0, 1e-15);
}

TEST(DefaultMaxModelSize, Formula) {
  EXPECT_EQ(MqbicConfig::default_max_model_size(100.0), 5u);
  EXPECT_EQ(MqbicConfig::default_max_model_size(1.0), 1u);
  EXPECT_EQ(MqbicConfig::default_max_model_size(5.0), 1u);
}

TEST(SelectLambda, DominantLambdaSelectsNothing) {
  std::mt19937_64 gen(7);
  const auto data = random_dataset(gen, 2, 40, 5);
  const double top = lambda_max(data, kThree);
  const auto report = select_lambda(data, kThree, PenaltySpec::scad(0.0), {10.0 * top}, MqbicConfig{1.0, 5});
  ASSERT_TRUE(report.chosen_lambda.has_value());
  EXPECT_DOUBLE_EQ(*report.chosen_lambda, 10.0 * top);
  EXPECT_TRUE(report.selected_predictors.empty());
  EXPECT_EQ(report.candidates.size(), 1u);
}

TEST(SelectLambda, EmptyGrid) {
  std::mt19937_64 gen(7);
  const auto data = random_dataset(gen, 1, 20, 2);
  try {
    select_lambda(data, kThree, PenaltySpec::scad(0.0), {}, MqbicConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyGrid);
  }
}

TEST(SelectLambda, TieGoesToSmallerLambda) {
  // Above lambda_max every fit is the empty model with identical loss.
  std::mt19937_64 gen(8);
  const auto data = random_dataset(gen, 2, 30, 3);
  const double top = lambda_max(data, kThree);
  const auto report = select_lambda(data, kThree, PenaltySpec::mcp(0.0), {3 * top, 2 * top, 5 * top}, MqbicConfig{1.0, 3});
  EXPECT_DOUBLE_EQ(*report.chosen_lambda, 2 * top);
  ASSERT_EQ(report.candidates.size(), 3u);
  for (const auto& c : report.candidates) EXPECT_EQ(c.criterion.value, report.candidates.front().criterion.value);
}

TEST(SelectLambda, ChosenAttainsMinimumAndIsDeterministic) {
  const auto data = sparse_dataset(21, 2, 80, 10, 2, 1.0);
  const auto grid = default_lambda_grid(data, kThree, {}, true, 15);
  const MqbicConfig cfg{default_T(10), 10};
  const auto a = select_lambda(data, kThree, PenaltySpec::scad(0.0), grid, cfg);
  const auto b = select_lambda(data, kThree, PenaltySpec::scad(0.0), grid, cfg);
  for (const auto& c : a.candidates) {
    EXPECT_TRUE(std::isfinite(c.criterion.value));
    EXPECT_GE(c.criterion.value, a.candidates[a.chosen_index].criterion.value);
  }
  EXPECT_EQ(a.chosen_lambda, b.chosen_lambda);
  EXPECT_EQ(a.selected_predictors, b.selected_predictors);
  EXPECT_EQ(a.refit.coefficients, b.refit.coefficients);
  EXPECT_EQ(a.selected_predictors, (std::vector<std::size_t>{0, 1}));
}

TEST(SelectLambda, CriterionUsesPenalizedFit) {
  const auto data = sparse_dataset(22, 2, 60, 6, 2, 1.0);
  const double lam = 0.2 * lambda_max(data, kThree);
  const MqbicConfig cfg{1.0, 6};
  const auto report = select_lambda(data, kThree, PenaltySpec::scad(0.0), {lam}, cfg);
  const auto fit = fit_penalized(data, kThree, PenaltySpec::scad(lam));
  const double loss = raw_check_sum(kThree, fit.residuals, 2);
  EXPECT_NEAR(report.candidates[0].criterion.loss_sum, loss, 1e-9 * loss);
  EXPECT_EQ(report.candidates[0].support, active_set(fit.coefficients));
}

TEST(SelectLambda, ZeroLambdaNotChosenWhenOverparameterized) {
  // p > n K M: the unpenalized path pays for every predictor.
  const auto data = sparse_dataset(1, 1, 10, 40, 1, 2.0);
  const QuantileGrid mid({0.5});
  auto grid = default_lambda_grid(data, mid, {}, true, 10);
  grid.push_back(0.0);
  const auto report = select_lambda(data, mid, PenaltySpec::scad(0.0), grid, MqbicConfig{default_T(40), 40});
  ASSERT_TRUE(report.chosen_lambda.has_value());
  EXPECT_GT(*report.chosen_lambda, 0.0);
}

TEST(ExhaustiveSearch, SingleCandidate) {
  const auto data = sparse_dataset(3, 2, 50, 4, 2, 1.0);
  const auto report = exhaustive_search(data, kThree, {{1, 0}}, MqbicConfig{1.0, 4});
  EXPECT_EQ(report.selected_predictors, (std::vector<std::size_t>{0, 1}));
  EXPECT_FALSE(report.chosen_lambda.has_value());
}

TEST(ExhaustiveSearch, TrueModelBeatsEmpty) {
  const auto data = sparse_dataset(4, 2, 100, 5, 2, 1.0);
  const auto report = exhaustive_search(data, kThree, {{}, {0, 1}}, MqbicConfig{default_T(5), 5});
  EXPECT_EQ(report.selected_predictors, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(report.chosen_index, 1u);
}

TEST(ExhaustiveSearch, Errors) {
  const auto data = sparse_dataset(4, 1, 20, 3, 1, 1.0);
  try {
    exhaustive_search(data, kThree, {}, MqbicConfig{1.0, 3});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::CandidateListEmpty);
  }
  try {
    exhaustive_search(data, kThree, {{0, 1, 2}}, MqbicConfig{1.0, 2});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SupportTooLarge);
  }
}

TEST(ExhaustiveSearch, NoiseChainPrefersEmpty) {
  int empty_wins = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto data = sparse_dataset(1000 + seed, 2, 100, 2, 0, 0.0);
    const auto report = exhaustive_search(data, kThree, {{}, {0}, {0, 1}}, MqbicConfig{default_T(20), 2});
    if (report.selected_predictors.empty()) ++empty_wins;
  }
  EXPECT_GE(empty_wins, 40);
}

TEST(ExhaustiveSearch, OverfittingGuard) {
  int guarded = 0;
  const MqbicConfig cfg{default_T(20), 5};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto data = sparse_dataset(2000 + seed, 2, 200, 20, 3, 1.0);
    const auto truth = mqbic(data, kThree, {0, 1, 2}, cfg);
    const auto bigger = mqbic(data, kThree, {0, 1, 2, 3 + seed % 17}, cfg);
    if (bigger.value > truth.value) ++guarded;
  }
  EXPECT_GE(guarded, 45);
}

TEST(Subsets, Enumeration) {
  const auto s = subsets_up_to(4, 2);
  EXPECT_EQ(s.size(), 1u + 4u + 6u);
  EXPECT_TRUE(s.front().empty());
  EXPECT_EQ(s[1], (std::vector<std::size_t>{0}));
  EXPECT_EQ(s.back(), (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(all_subsets(5).size(), 32u);
  EXPECT_EQ(subsets_up_to(20, 5).size(), 1u + 20u + 190u + 1140u + 4845u + 15504u);
  EXPECT_THROW(all_subsets(16), Error);
  EXPECT_THROW(subsets_up_to(100, 6, 1000), Error);
}

TEST(CombinedAnalysis, IdenticalExperiments) {
  const auto one = sparse_dataset(9, 1, 60, 5, 2, 1.0);
  const auto two = MultiExperimentDataset::validate({one.experiment(0), one.experiment(0)});
  const MqbicConfig cfg{default_T(5), 5};
  const auto report = combined_analysis(two, 0.5, PenaltySpec::scad(0.0), {}, cfg);
  ASSERT_EQ(report.per_experiment.size(), 2u);
  EXPECT_EQ(report.per_experiment[0].selected_predictors, report.per_experiment[1].selected_predictors);
  EXPECT_EQ(report.selected_predictors, report.per_experiment[0].selected_predictors);
}

TEST(CombinedAnalysis, UnionOfSelections) {
  // Experiment 0 driven by predictor 0, experiment 1 by predictor 1.
  std::mt19937_64 gen(17);
  std::normal_distribution<double> z;
  std::vector<Experiment> ex;
  for (int k = 0; k < 2; ++k) {
    Experiment e{Eigen::VectorXd(80), Eigen::MatrixXd(80, 4)};
    for (int i = 0; i < 80; ++i) {
      for (int j = 0; j < 4; ++j) e.design(i, j) = z(gen);
      e.response(i) = 3.0 * e.design(i, k) + 0.3 * z(gen);
    }
    ex.push_back(std::move(e));
  }
  const auto data = MultiExperimentDataset::validate(ex);
  const auto report = combined_analysis(data, 0.5, PenaltySpec::scad(0.0), {}, MqbicConfig{std::log(80.0), 4});
  EXPECT_EQ(report.per_experiment[0].selected_predictors, (std::vector<std::size_t>{0}));
  EXPECT_EQ(report.per_experiment[1].selected_predictors, (std::vector<std::size_t>{1}));
  EXPECT_EQ(report.selected_predictors, (std::vector<std::size_t>{0, 1}));
  EXPECT_NEAR(report.coefficients.slope(1, 0, 1), 3.0, 0.3);
}

TEST(CombinedAnalysis, SingleExperimentMatchesSelectLambda) {
  const auto data = sparse_dataset(10, 1, 60, 5, 2, 1.0);
  const MqbicConfig cfg{default_T(5), 5};
  const QuantileGrid single({0.5});
  const auto grid = default_lambda_grid(data, single);
  const auto ca = combined_analysis(data, 0.5, PenaltySpec::scad(0.0), grid, cfg);
  const auto di = select_lambda(data, single, PenaltySpec::scad(0.0), grid, cfg);
  EXPECT_EQ(ca.selected_predictors, di.selected_predictors);
  EXPECT_EQ(ca.per_experiment[0].chosen_lambda, di.chosen_lambda);
  EXPECT_EQ(ca.coefficients, di.refit.coefficients);
}
