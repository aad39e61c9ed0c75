#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "mqsel/simbench.hpp"

using namespace mqsel;

namespace {

double correlation(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const Eigen::ArrayXd x = a.array() - a.mean();
  const Eigen::ArrayXd y = b.array() - b.mean();
  return (x * y).sum() / std::sqrt((x * x).sum() * (y * y).sum());
}

double ks_uniform(Eigen::VectorXd u) {
  std::sort(u.data(), u.data() + u.size());
  const double n = static_cast<double>(u.size());
  double d = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    d = std::max(d, static_cast<double>(i + 1) / n - u(i));
    d = std::max(d, u(i) - static_cast<double>(i) / n);
  }
  return d;
}

SimScenario large_scenario(ErrorFamily family) {
  auto s = SimScenario::table1(10, 42);
  s.n = 5000;
  s.nonzero_spec = {{0, 0}, {1, 5}};
  s.error_family = family;
  return s;
}

}  // namespace

TEST(Rng, DeterministicAndInRange) {
  Rng a(5), b(5), c(6);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const double u = a.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_EQ(u, b.uniform());
    differs |= u != c.uniform();
  }
  EXPECT_TRUE(differs);
  EXPECT_NE(replication_seed(1, 0), replication_seed(1, 1));
  EXPECT_NE(replication_seed(1, 0), replication_seed(2, 0));
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s1 = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s1 += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s1 / n, 0.0, 0.01);
  EXPECT_NEAR(s2 / n, 1.0, 0.01);
}

TEST(Scenario, Validation) {
  auto s = SimScenario::table1();
  EXPECT_NO_THROW(s.validate());
  auto bad = s;
  bad.ar_rho = 1.0;
  try {
    bad.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidScenario);
  }
  bad = s;
  bad.error_cross_corr = -1.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = s;
  bad.nonzero_spec.emplace_back(2, 0);
  EXPECT_THROW(bad.validate(), Error);
  bad = s;
  bad.nonzero_spec.emplace_back(0, 100);
  EXPECT_THROW(bad.validate(), Error);
  bad = s;
  bad.coef_low = 2.0;
  EXPECT_THROW(bad.validate(), Error);
  bad = s;
  bad.hetero_column = {2};
  EXPECT_THROW(bad.validate(), Error);
  EXPECT_THROW(SimScenario::preset("table9"), Error);
}

TEST(Scenario, Presets) {
  const auto t1 = SimScenario::table1();
  EXPECT_EQ(t1.n, 100u);
  EXPECT_EQ(t1.p, 100u);
  EXPECT_EQ(t1.K, 2u);
  EXPECT_EQ(t1.quantiles.size(), 5u);
  EXPECT_DOUBLE_EQ(t1.quantiles[0], 1.0 / 6.0);
  EXPECT_EQ(t1.nonzero_spec.size(), 10u);
  EXPECT_EQ(t1.grouping, Grouping::complete);
  const auto t2 = SimScenario::table2();
  EXPECT_EQ(t2.grouping, Grouping::incomplete);
  EXPECT_EQ(t2.error_family, ErrorFamily::normal);
  EXPECT_EQ(SimScenario::table3().error_family, ErrorFamily::t3);

  const auto g1 = generate(t1);
  EXPECT_EQ(g1.true_active, (std::vector<std::size_t>{0, 2, 5, 11, 14, 19}));
  const auto g2 = generate(t2);
  EXPECT_EQ(g2.true_active, (std::vector<std::size_t>{0, 2, 3, 5, 8, 11, 14, 19, 24}));
  for (const auto& [k, j] : t1.nonzero_spec) {
    const double a = g1.mean_slopes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
    EXPECT_GE(a, 0.05);
    EXPECT_LE(a, 1.0);
  }
}

TEST(Generate, LatentCovariance) {
  const auto g = generate(large_scenario(ErrorFamily::normal));
  for (const auto& X : g.latent) {
    for (Eigen::Index i = 0; i < X.cols(); ++i) {
      for (Eigen::Index j = i; j < X.cols(); ++j) {
        const Eigen::ArrayXd a = X.col(i).array() - X.col(i).mean();
        const Eigen::ArrayXd b = X.col(j).array() - X.col(j).mean();
        const double cov = (a * b).sum() / static_cast<double>(X.rows() - 1);
        EXPECT_NEAR(cov, std::pow(0.5, static_cast<double>(j - i)), 0.05) << i << "," << j;
      }
    }
    EXPECT_NEAR(correlation(X.col(0), X.col(2)), 0.25, 0.05);
  }
}

TEST(Generate, ErrorCrossCorrelation) {
  for (auto family : {ErrorFamily::normal, ErrorFamily::t3}) {
    const auto g = generate(large_scenario(family));
    EXPECT_NEAR(correlation(g.errors.col(0), g.errors.col(1)), 0.7, 0.05) << to_string(family);
  }
}

TEST(Generate, HeteroColumnUniform) {
  const auto s = large_scenario(ErrorFamily::normal);
  const auto g = generate(s);
  for (std::size_t k = 0; k < s.K; ++k) {
    const Eigen::VectorXd u = g.data.experiment(k).design.col(static_cast<Eigen::Index>(s.hetero_column[k]));
    EXPECT_GT(u.minCoeff(), 0.0);
    EXPECT_LT(u.maxCoeff(), 1.0);
    EXPECT_LT(ks_uniform(u), 0.03);
  }
}

TEST(Generate, Deterministic) {
  const auto s = SimScenario::table3(30, 77);
  const auto a = generate(s);
  const auto b = generate(s);
  EXPECT_TRUE(a.data == b.data);
  EXPECT_EQ(a.truth, b.truth);
  auto t = s;
  t.seed = 78;
  EXPECT_FALSE(generate(t).data == a.data);
}

TEST(Generate, TrueQuantileCoefficients) {
  const auto s = SimScenario::table1(30, 3);
  const auto g = generate(s);
  for (std::size_t k = 0; k < s.K; ++k) {
    for (std::size_t m = 0; m < s.quantiles.size(); ++m) {
      for (std::size_t j = 0; j < s.p; ++j) {
        double expected = g.mean_slopes(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j));
        if (j == s.hetero_column[k]) {
          expected = expected + 0.7 * boost::math::quantile(boost::math::normal_distribution<double>(), s.quantiles[m]);
        }
        EXPECT_EQ(g.truth.slope(k, m, j), expected);
      }
    }
  }
  EXPECT_NEAR(error_quantile(ErrorFamily::t3, 0.975), 3.182446305284263, 1e-12);
  EXPECT_NEAR(error_quantile(ErrorFamily::normal, 5.0 / 6.0), 0.967421566101701, 1e-12);
}

TEST(Generate, ResponsesFollowModel) {
  const auto s = SimScenario::table2(25, 5);
  const auto g = generate(s);
  for (std::size_t k = 0; k < s.K; ++k) {
    const auto& e = g.data.experiment(k);
    const auto h = static_cast<Eigen::Index>(s.hetero_column[k]);
    const Eigen::VectorXd mean = e.design * g.mean_slopes.row(static_cast<Eigen::Index>(k)).transpose();
    for (Eigen::Index i = 0; i < e.response.size(); ++i) {
      EXPECT_NEAR(e.response(i), mean(i) + 0.7 * g.errors(i, static_cast<Eigen::Index>(k)) * e.design(i, h), 1e-12);
    }
  }
}

TEST(Metrics, Examples) {
  CoefficientTensor zero(1, 1, 10);
  const auto m = psr_fdr_ae({1, 2, 3}, {2, 3, 7}, zero, zero, 10);
  EXPECT_NEAR(m.psr, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.fdr, 1.0 / 7.0, 1e-15);
  EXPECT_EQ(m.ae, 0.0);

  const auto exact = psr_fdr_ae({1, 2}, {1, 2}, zero, zero, 10);
  EXPECT_EQ(exact.psr, 1.0);
  EXPECT_EQ(exact.fdr, 0.0);

  CoefficientTensor a(2, 1, 3), b(2, 1, 3);
  b.slope(0, 0, 1) = 0.25;
  b.slope(1, 0, 2) = -0.75;
  b.intercept(1, 0) = 9.0;
  EXPECT_NEAR(psr_fdr_ae({0}, {0}, a, b, 3).ae, 0.5, 1e-15);
}

TEST(Metrics, Errors) {
  CoefficientTensor t(1, 1, 4);
  try {
    psr_fdr_ae({}, {1}, t, t, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateDenominator);
  }
  try {
    psr_fdr_ae({0, 1, 2, 3}, {1}, t, t, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DegenerateDenominator);
  }
  EXPECT_THROW(psr_fdr_ae({0}, {9}, t, t, 4), Error);
  EXPECT_THROW(psr_fdr_ae({0}, {1}, t, CoefficientTensor(1, 2, 4), 4), Error);
}

TEST(Metrics, Bounds) {
  Rng r(4);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<std::size_t> truth, est;
    for (std::size_t j = 0; j < 12; ++j) {
      if (r.uniform() < 0.3 || j == 0) truth.push_back(j);
      if (r.uniform() < 0.5) est.push_back(j);
    }
    if (truth.size() == 12) truth.pop_back();
    CoefficientTensor a(2, 2, 12), b(2, 2, 12);
    for (std::size_t j = 0; j < 12; ++j) b.slope(1, 1, j) = r.normal();
    const auto m = psr_fdr_ae(truth, est, a, b, 12);
    EXPECT_GE(m.psr, 0.0);
    EXPECT_LE(m.psr, 1.0);
    EXPECT_GE(m.fdr, 0.0);
    EXPECT_LE(m.fdr, 1.0);
    EXPECT_GT(m.ae, 0.0);
    EXPECT_EQ(psr_fdr_ae(truth, est, b, b, 12).ae, 0.0);
  }
}

TEST(Method, Parse) {
  EXPECT_EQ(Method::parse("DI").kind, Method::Kind::data_integration);
  const auto ca = Method::parse("CA-3/6");
  EXPECT_EQ(ca.kind, Method::Kind::combined_analysis);
  EXPECT_DOUBLE_EQ(ca.tau, 0.5);
  EXPECT_EQ(ca.label, "CA-(3/6)");
  EXPECT_DOUBLE_EQ(Method::parse("CA-(2/6)").tau, 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(Method::parse("CA-0.25").tau, 0.25);
  EXPECT_THROW(Method::parse("XX"), Error);
  EXPECT_THROW(Method::parse("CA-7/6"), Error);
  EXPECT_THROW(Method::parse("CA-abc"), Error);
}

TEST(RunStudy, DominantGridSelectsNothing) {
  const auto s = SimScenario::table1(30, 1);
  StudyConfig cfg;
  cfg.lambda_grid = {1e6};
  const auto report = run_study(s, 1, {Method::di()}, cfg);
  ASSERT_EQ(report.methods.size(), 1u);
  EXPECT_EQ(report.methods[0].mean.psr, 0.0);
  EXPECT_EQ(report.methods[0].mean.fdr, 0.0);
  EXPECT_EQ(report.methods[0].sd.psr, 0.0);
}

TEST(RunStudy, DeterministicAndSeeded) {
  auto s = SimScenario::table2(30, 3);
  s.n = 60;
  StudyConfig cfg;
  cfg.lambda_points = 8;
  const std::vector<Method> methods{Method::di(), Method::parse("CA-3/6")};
  const auto a = run_study(s, 2, methods, cfg);
  const auto b = run_study(s, 2, methods, cfg);
  ASSERT_EQ(a.methods.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.methods[i].selected, b.methods[i].selected);
    EXPECT_EQ(a.methods[i].chosen_lambda, b.methods[i].chosen_lambda);
    EXPECT_EQ(a.methods[i].mean.ae, b.methods[i].mean.ae);
  }
  EXPECT_EQ(a.replication_seeds, (std::vector<std::uint64_t>{replication_seed(3, 0), replication_seed(3, 1)}));
  EXPECT_EQ(a.methods[1].label, "CA-(3/6)");
}

TEST(RunStudy, Errors) {
  const auto s = SimScenario::table1(20, 1);
  EXPECT_THROW(run_study(s, 0, {Method::di()}), Error);
  EXPECT_THROW(run_study(s, 1, {}), Error);
}
